"""Named parameter store, decoupled-weight-decay Adam, and the LR schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

from .autodiff import Tensor

GROUP_SLM = "slm"
GROUP_FUSION = "fusion"


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class ParamStore:
    """Named parameters partitioned into the SLM group and the fusion group
    (time-series encoder + knowledge attention). Each parameter carries a
    trainable flag that the phase schedule flips."""

    params: Dict[str, Tensor] = field(default_factory=dict)
    groups: Dict[str, str] = field(default_factory=dict)
    trainable: Dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, tensor: Tensor, group: str) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        if group not in (GROUP_SLM, GROUP_FUSION):
            raise ValueError(f"unknown group: {group}")
        tensor.requires_grad = True
        self.params[name] = tensor
        self.groups[name] = group
        self.trainable[name] = True
        return tensor

    def names(self) -> Iterable[str]:
        return self.params.keys()

    def group_names(self, group: str) -> list:
        return [n for n, g in self.groups.items() if g == group]

    def set_trainable(self, group: str, flag: bool) -> None:
        for name in self.group_names(group):
            self.trainable[name] = flag

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def group_hash(self, group: str) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.group_names(group)):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


class AdamW:
    """Adam with decoupled weight decay; skips frozen parameters entirely
    (their moment state is never created or advanced)."""

    def __init__(self, store: ParamStore, lr: float = 1e-5,
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: Dict[str, dict] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.store.params.items():
            if not self.store.trainable[name]:
                continue
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable parameter {name}")
            st = self.state.get(name)
            if st is None:
                st = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                self.state[name] = st
            st["step"] += 1
            t = st["step"]
            g = p.grad
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            m_hat = st["m"] / (1 - b1 ** t)
            v_hat = st["v"] / (1 - b2 ** t)
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to base_lr over the first 10% of steps, then
    constant (the post-warmup shape is a documented artifact choice)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    warmup = max(1, int(round(0.1 * total_steps)))
    if step >= warmup:
        return base_lr
    return base_lr * (step + 1) / warmup
