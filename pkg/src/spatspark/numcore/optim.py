"""LAMB optimizer and the linear warmup / linear anneal learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from .tensor import ContractError, DimensionError, Param, check_finite


@dataclass
class LambState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    max_trust: float = 10.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    # diagnostics from the most recent step: name -> (weight_norm, update_norm, ratio)
    last_trust: Dict[str, tuple] = field(default_factory=dict)


def lamb_step(params: Iterable[Param], state: LambState, lr: float,
              grads: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Apply one LAMB update in place.

    Per parameter block::

        m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
        u  = m_hat / (sqrt(v_hat) + eps) + wd * w
        r  = ||w|| / ||u||   (1 if either norm is 0, clipped to [0, max_trust])
        w <- w - lr r u
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    state.last_trust = {}
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != value shape {p.data.shape} for {p.name}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.data.shape:
            raise DimensionError(f"optimizer state shape mismatch for {p.name}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        w_norm = float(np.sqrt((p.data * p.data).sum()))
        u_norm = float(np.sqrt((update * update).sum()))
        if w_norm == 0.0 or u_norm == 0.0:
            ratio = 1.0
        else:
            ratio = min(max(w_norm / u_norm, 0.0), state.max_trust)
        state.last_trust[p.name] = (w_norm, u_norm, ratio)
        new = p.data - lr * ratio * update
        check_finite(new, "lamb_step", f"parameter {p.name}")
        p.data = new


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_epochs: float
    total_epochs: float
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ContractError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.base_lr < self.floor_lr:
            raise ContractError("base_lr must not be below floor_lr")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Linear ramp 0 -> base over the warmup, then linear descent base -> floor."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    w, total = schedule.warmup_epochs, schedule.total_epochs
    if epoch < w:
        return schedule.base_lr * epoch / w
    frac = (epoch - w) / (total - w)
    return schedule.base_lr + (schedule.floor_lr - schedule.base_lr) * frac
