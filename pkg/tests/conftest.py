import numpy as np
import pytest
import scipy.sparse as sp

from vibroimpact.model import FEModel, TwinBeamSpec, build_twin_beam_model
from vibroimpact.presets import twin_beam_rom
from vibroimpact.rom import boundary_transform


def single_dof_model(m: float = 2.0, k: float = 0.0) -> FEModel:
    """One lumped mass with a ``z`` DOF; ``k`` adds a grounding spring."""
    return FEModel(
        M=sp.csr_matrix([[m]]),
        K=sp.csr_matrix([[k]]),
        nodes={0: {"z": 0}},
        constrained_dofs=np.array([], dtype=int),
        b=np.array([1.0]),
        observers={"mass": 0},
    ).validate()


@pytest.fixture(scope="session")
def beam_spec():
    return TwinBeamSpec()


@pytest.fixture(scope="session")
def twin_model(beam_spec):
    return build_twin_beam_model(beam_spec)


@pytest.fixture(scope="session")
def twin_tm(twin_model):
    return boundary_transform(twin_model)


@pytest.fixture(scope="session")
def rom12():
    return twin_beam_rom(12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
