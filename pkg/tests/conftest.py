"""Shared fixtures and numerical oracles for the envfield test-suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_difference(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Independent gradient oracle: central differences of scalar ``fn`` at float64 ``x``."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            up = float(fn(x))
            flat[i] = old - h
            down = float(fn(x))
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def assert_gradient_matches(fn, x: torch.Tensor, tol: float = 1e-3, h: float = 1e-4) -> float:
    """Compare autograd against :func:`central_difference`; returns the max relative error."""
    x = x.detach().clone().double().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(x), x)
    numeric = central_difference(fn, x, h)
    err = relative_error(auto.detach().numpy(), numeric.numpy())
    assert err < tol, f"autograd and finite differences disagree: relative error {err:.2e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
