import os
import subprocess
import sys

import numpy as np
import pytest

from placebocil import kernels
from placebocil.kernels import _pykernels as py

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")


@pytest.fixture
def ck():
    return kernels.get_backend("cython")


def random_case(seed, n=40, f=6, c_old=3, c_new=2):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, f))
    feats[0] = 0.0  # zero-norm row
    return feats, rng.normal(size=(c_old, f)), rng.normal(size=(c_new, f))


@needs_compiled
@pytest.mark.parametrize("seed", range(5))
def test_cosine_and_score_agree(ck, seed):
    feats, old, new = random_case(seed)
    np.testing.assert_allclose(ck.cosine_matrix(feats, old), py.cosine_matrix(feats, old), atol=1e-12)
    for beta, gamma in [(0, 0), (1, 1), (2, 0.5)]:
        np.testing.assert_allclose(
            ck.score_matrix(feats, old, new, beta, gamma), py.score_matrix(feats, old, new, beta, gamma), atol=1e-12
        )


@needs_compiled
def test_score_edge_shapes(ck):
    feats, old, _ = random_case(0, c_old=1)
    empty_new = np.zeros((0, feats.shape[1]))
    np.testing.assert_allclose(
        ck.score_matrix(feats, old, empty_new, 1.0, 1.0), py.score_matrix(feats, old, empty_new, 1.0, 1.0)
    )


@needs_compiled
@pytest.mark.parametrize("seed", range(5))
def test_greedy_select_agrees(ck, seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=(30, 4)), 1)  # rounding creates ties
    ids = rng.permutation(1000)[:30].astype(np.int64)
    np.testing.assert_array_equal(ck.greedy_select(scores, 3, ids), py.greedy_select(scores, 3, ids))


@needs_compiled
def test_greedy_select_underflow(ck):
    with pytest.raises(ValueError):
        ck.greedy_select(np.zeros((3, 2)), 2, np.arange(3, dtype=np.int64))


@needs_compiled
@pytest.mark.parametrize("seed", range(5))
def test_herding_agrees(ck, seed):
    feats, _, _ = random_case(seed, n=25)
    np.testing.assert_array_equal(ck.herding_order(feats, 10), py.herding_order(feats, 10))


def test_python_greedy_underflow():
    with pytest.raises(ValueError):
        py.greedy_select(np.zeros((3, 2)), 2, np.arange(3))


def test_cosine_bounds_and_zero_rows():
    feats, old, _ = random_case(1)
    cos = py.cosine_matrix(feats, old)
    assert np.all(np.abs(cos) <= 1.0)
    assert not cos[0].any()


def test_pure_python_switch():
    env = dict(os.environ, PLACEBOCIL_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from placebocil import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_get_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
