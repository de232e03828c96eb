"""Shared test utilities: the float64 finite-difference gradient oracle.

The oracle is independent of the autodiff path it checks: it re-runs the
forward function with perturbed inputs and central differences (h = 1e-3)
in float64, then compares against the analytic gradients from backward().
"""

from __future__ import annotations

import numpy as np

from mmdetect import autodiff as ad
from mmdetect.autodiff import Tensor


def fd_gradient(f, tensors: list[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of scalar f() w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def fd_gradient_sampled(f, tensor: Tensor, coords: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Finite differences at a subset of flat coordinates of one tensor."""
    out = np.zeros(len(coords))
    flat = tensor.data.reshape(-1)
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f().data)
        flat[i] = orig - h
        f_minus = float(f().data)
        flat[i] = orig
        out[n] = (f_plus - f_minus) / (2.0 * h)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst per-coordinate relative error with an absolute-tolerance floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def norm_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """L2-relative error; the right metric for long float32 reductions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_gradients(f, tensors: list[Tensor], tol: float = 1e-3, h: float = 1e-3) -> float:
    """Assert analytic grads of scalar f() match the FD oracle; returns worst error."""
    for t in tensors:
        t.grad = None
    loss = f()
    ad.backward(loss)
    worst = 0.0
    fd = fd_gradient(f, tensors, h)
    for t, g_fd in zip(tensors, fd):
        assert t.grad is not None, "no gradient reached a requires_grad leaf"
        worst = max(worst, rel_err(t.grad, g_fd))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst


def f64_tensor(rng, shape, scale=1.0, requires_grad=True) -> Tensor:
    """Random float64 tensor from a CounterRng stream."""
    data = rng.normal(shape, scale).astype(np.float64)
    return Tensor(data, requires_grad=requires_grad, dtype=np.float64)


def check_gradients_sampled(f, named_tensors: dict[str, Tensor], coord_rng,
                            n_coords: int = 20, tol: float = 1e-3,
                            h: float = 1e-4) -> float:
    """Composite-graph gradient check on sampled coordinates.

    Compares analytic and FD gradients with a norm-relative metric per
    tensor, which is robust to isolated near-zero-gradient coordinates in
    wide models while still catching wrong backward rules.
    """
    tensors = list(named_tensors.values())
    for t in tensors:
        t.grad = None
    ad.backward(f())
    worst = 0.0
    for name, t in named_tensors.items():
        assert t.grad is not None, f"no gradient reached {name}"
        size = t.data.size
        k = min(size, n_coords)
        coords = coord_rng.shuffled(size)[:k]
        analytic = t.grad.reshape(-1)[coords]
        fd = fd_gradient_sampled(f, t, coords, h)
        err = float(np.linalg.norm(analytic - fd) /
                    max(np.linalg.norm(analytic), np.linalg.norm(fd), 1e-9))
        assert err < tol, f"gradient mismatch on {name}: norm rel err {err:.3e}"
        worst = max(worst, err)
    return worst
