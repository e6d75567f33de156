import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fracmg.grid import build_single_notch_mesh
from fracmg.increment import IncrementProblem
from fracmg.materials import MaterialModel

BENCH = dict(lam=121.0, mu=80.0, k=1.0e-5, g_c=2.7e-3, l=0.03125)


def make_material(**overrides):
    """Benchmark material with overrides."""
    args = dict(BENCH)
    args.update(overrides)
    return MaterialModel(**args)


def make_problem(refine_steps=0, coarse_nx=4, coarse_ny=2, load=1.0e-3,
                 obstacle=None, material=None, **mat_overrides):
    """Small notch problem for solver tests."""
    hier, bc = build_single_notch_mesh(L=1.0, refine_steps=refine_steps,
                                       coarse_nx=coarse_nx, coarse_ny=coarse_ny)
    model = material or make_material(**mat_overrides)
    M = hier.finest.num_vertices
    obstacle = np.zeros(M) if obstacle is None else obstacle
    return IncrementProblem(hier, model, bc, load, obstacle)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
