import os
import subprocess
import sys

import numpy as np
import pytest

from lidarflow import kernels
from lidarflow.kernels import _numpy

numba_mod = pytest.importorskip("lidarflow.kernels._numba")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(rng, dtype):
    tol = 1e-5 if dtype == np.float32 else 1e-12
    src = rng.standard_normal((2, 3, 9, 11)).astype(dtype)
    flow = rng.uniform(-3, 3, (2, 2, 9, 11)).astype(dtype)
    g = rng.standard_normal((2, 3, 9, 11)).astype(dtype)
    assert np.allclose(numba_mod.backwarp_forward(src, flow), _numpy.backwarp_forward(src, flow), atol=tol)
    for a, b in zip(numba_mod.backwarp_backward(src, flow, g), _numpy.backwarp_backward(src, flow, g)):
        assert np.allclose(a, b, atol=tol)
    f2 = rng.standard_normal(src.shape).astype(dtype)
    gc = rng.standard_normal((2, 25, 9, 11)).astype(dtype)
    assert np.allclose(numba_mod.correlation_forward(src, f2, 2), _numpy.correlation_forward(src, f2, 2), atol=tol)
    for a, b in zip(numba_mod.correlation_backward(src, f2, gc, 2), _numpy.correlation_backward(src, f2, gc, 2)):
        assert np.allclose(a, b, atol=tol)
    cols = rng.standard_normal((2, 3, 3, 3, 4, 5)).astype(dtype)
    assert np.allclose(numba_mod.col2im(cols, (2, 3, 9, 11), 2, 1), _numpy.col2im(cols, (2, 3, 9, 11), 2, 1), atol=tol)


def test_env_flag_selects_numpy():
    env = dict(os.environ, LIDARFLOW_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import lidarflow.kernels as k; print(k.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"
    assert kernels.BACKEND in ("numba", "numpy")
