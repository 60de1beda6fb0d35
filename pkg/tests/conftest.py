import logging

import numpy as np
import pytest

from latmax.config import settings
from latmax.lattice import Field
from latmax.schemas import KernelSpec, LatticeSpec, SimSpec


@pytest.fixture(autouse=True)
def _log_level(caplog):
    caplog.set_level(logging.INFO)


@pytest.fixture
def gen():
    return np.random.default_rng(20240101)


@pytest.fixture
def small_chunks(monkeypatch):
    """Small sampler chunks so a few thousand draws span several waves"""
    monkeypatch.setattr(settings, "CHUNK_SIZE", 1000)
    return settings


@pytest.fixture
def white_fields(gen):
    def make(n=200, shape=(50, 50)):
        return [Field.from_array(gen.standard_normal(shape)) for _ in range(n)]

    return make


@pytest.fixture
def sim_spec():
    def make(eta=1.0, size=30, dim=2, n_fields=10, seed=11, **kw):
        return SimSpec(
            lattice=LatticeSpec.cube(dim, size),
            kernel=KernelSpec.isotropic(eta),
            n_fields=n_fields,
            seed=seed,
            **kw,
        )

    return make
