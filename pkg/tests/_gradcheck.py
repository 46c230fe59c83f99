"""Central finite-difference gradient checking against the autodiff engine."""

from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

import clindistill.autodiff as ad
from clindistill.autodiff import Tensor


def central_diff(f: Callable[[], float], x: np.ndarray, idx: Tuple[int, ...],
                 h: float = 1e-5) -> float:
    orig = x[idx]
    step = h * max(1.0, abs(orig))
    x[idx] = orig + step
    hi = f()
    x[idx] = orig - step
    lo = f()
    x[idx] = orig
    return (hi - lo) / (2.0 * step)


def check_tensor_grad(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                      max_coords: int = 6, seed: int = 0,
                      rtol: float = 1e-4) -> float:
    """Compare autodiff gradients with central differences on sampled
    coordinates of every tensor in `params`.  Returns the worst relative
    error seen; raises AssertionError past `rtol`."""
    loss = loss_fn()
    ad.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        assert t.grad is not None, f"no gradient for {name}"
        flat_size = t.data.size
        n = min(max_coords, flat_size)
        picks = rng.choice(flat_size, size=n, replace=False)
        analytic = np.empty(n)
        numeric = np.empty(n)
        def eval_loss() -> float:
            with ad.no_grad():
                return float(loss_fn().data)

        for j, flat_idx in enumerate(picks):
            idx = np.unravel_index(int(flat_idx), t.data.shape)
            analytic[j] = t.grad[idx]
            numeric[j] = central_diff(eval_loss, t.data, idx)
        denom = max(float(np.linalg.norm(analytic)),
                    float(np.linalg.norm(numeric)), 1e-8)
        abs_err = float(np.linalg.norm(analytic - numeric))
        rel = abs_err / denom
        worst = max(worst, rel)
        # near-zero gradients sit at the finite-difference roundoff floor
        # (|f|*eps/h ~ 1e-10); compare absolutely there
        assert rel < rtol or abs_err < 1e-9, \
            f"{name}: rel grad error {rel:.3e} >= {rtol} (abs {abs_err:.3e})"
    return worst
