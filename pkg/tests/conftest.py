"""Shared fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

import quiet.autograd as ag
from quiet.autograd import Tape, Tensor, backward


@pytest.fixture(autouse=True)
def _f64_default():
    ag.set_default_dtype(np.float64)
    yield
    ag.set_default_dtype(np.float64)


def central_diff(build_loss, param: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar loss wrt one parameter."""
    fd = np.zeros_like(param.data)
    flat = param.data.ravel()
    fd_flat = fd.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(build_loss().data)
        flat[i] = orig - eps
        down = float(build_loss().data)
        flat[i] = orig
        fd_flat[i] = (up - down) / (2.0 * eps)
    return fd


def grad_check(build_loss, params, eps: float = 1e-4, rtol: float = 1e-3,
               atol: float = 1e-6) -> float:
    """Assert analytic gradients match central differences; returns max rel err."""
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.zero_grad()
    with Tape():
        loss = build_loss()
    backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter missing gradient after backward"
        fd = central_diff(build_loss, p, eps=eps)
        denom = np.maximum(np.abs(fd), np.abs(p.grad))
        err = np.abs(p.grad - fd) / np.maximum(denom, atol / rtol)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        np.testing.assert_allclose(p.grad, fd, rtol=rtol, atol=atol)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
