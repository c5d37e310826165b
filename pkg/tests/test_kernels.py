"""The compiled kernels and the numpy fallback must agree bit for bit."""
import os
import subprocess
import sys

import numpy as np
import pytest

from capplan import _kernels_py, kernels

compiled = pytest.importorskip("capplan._kernels", reason="Cython extension not built")


def _random_log_instance(rng, N, T):
    A = rng.random((N, N)) + 1e-3
    A /= A.sum(1, keepdims=True)
    B = rng.random((T, N))
    B[rng.random((T, N)) < 0.3] = 0.0
    B[np.arange(T), rng.integers(N, size=T)] += 0.1
    with np.errstate(divide="ignore"):
        return np.log(A), np.log(B)


def test_viterbi_backends_agree():
    rng = np.random.default_rng(0)
    for _ in range(300):
        N, T = int(rng.integers(1, 8)), int(rng.integers(1, 7))
        la, lb = _random_log_instance(rng, N, T)
        assert np.array_equal(compiled.viterbi_path(la, lb, 1e-9), _kernels_py.viterbi_path(la, lb, 1e-9))


def test_viterbi_backends_agree_on_full_ties():
    la = np.log(np.full((3, 3), 1 / 3))
    lb = np.log(np.full((4, 3), 1 / 3))
    assert compiled.viterbi_path(la, lb, 1e-9).tolist() == [0, 0, 0, 0]
    assert _kernels_py.viterbi_path(la, lb, 1e-9).tolist() == [0, 0, 0, 0]


def test_counting_backends_agree():
    rng = np.random.default_rng(1)
    plans = rng.integers(7, size=(500, 4))
    assert np.array_equal(compiled.count_marginals(plans, 7), _kernels_py.count_marginals(plans, 7))
    lengths = rng.integers(0, 6, size=40)
    flat = rng.integers(7, size=lengths.sum())
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    assert np.array_equal(compiled.count_transitions(flat, offsets, 7),
                          _kernels_py.count_transitions(flat, offsets, 7))


def test_read_only_inputs_accepted():
    plans = np.zeros((3, 2), dtype=np.int64)
    plans.setflags(write=False)
    assert compiled.count_marginals(plans, 2).tolist() == [[3, 0], [3, 0]]


@pytest.mark.skipif(os.environ.get("CAPPLAN_PURE_PYTHON") == "1", reason="fallback forced")
def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_env_var_forces_fallback():
    env = dict(os.environ, CAPPLAN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import capplan.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
