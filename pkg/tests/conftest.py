import numpy as np
import pytest
import scipy.sparse as sp

from qcollide.basis import PureState, SparseOperator


def random_sparse_hermitian(rng, dim, density=0.2, scale=1.0) -> SparseOperator:
    n_entries = max(1, int(density * dim * dim / 2))
    rows = rng.integers(0, dim, n_entries)
    cols = rng.integers(0, dim, n_entries)
    vals = scale * (rng.normal(size=n_entries) + 1j * rng.normal(size=n_entries))
    upper = sp.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()
    h = upper + upper.conj().T
    return SparseOperator(dim=dim, matrix=h.tocsr())


def random_state(rng, enum) -> PureState:
    amps = rng.normal(size=enum.total_dim) + 1j * rng.normal(size=enum.total_dim)
    amps /= np.linalg.norm(amps)
    return PureState(amplitudes=amps, enumeration=enum)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
