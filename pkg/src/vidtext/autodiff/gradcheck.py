"""Central finite-difference verification of tape gradients."""
import numpy as np

from vidtext.autodiff.tensor import Tensor, no_grad
from vidtext.errors import ContractError


def grad_check(f, x, eps=1e-5, max_coords=None, seed=0, abs_tol=0.0):
    """Compare tape gradients of ``f`` against central differences.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` is called as
    ``f(*xs)`` and must return a scalar Tensor. Returns the largest
    ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`` over the checked
    coordinates. ``max_coords`` caps the number of coordinates sampled
    per tensor (all of them by default).

    ``abs_tol`` treats a coordinate as agreeing when ``|g_ad| + |g_fd|``
    is below it. Gradients that vanish exactly (e.g. attention key biases,
    which softmax shift-invariance cancels) otherwise report a relative
    error of 1 from finite-difference round-off alone.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if eps <= 0:
        raise ContractError("eps must be positive")
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, g_ad in zip(xs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            g_flat = g_ad.reshape(-1)
            for i in coords:
                saved = flat[i]
                flat[i] = saved + eps
                fp = f(*xs).item()
                flat[i] = saved - eps
                fm = f(*xs).item()
                flat[i] = saved
                fd = (fp - fm) / (2 * eps)
                scale = abs(g_flat[i]) + abs(fd)
                if scale < abs_tol:
                    continue
                err = abs(g_flat[i] - fd) / max(1e-12, scale)
                worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst
