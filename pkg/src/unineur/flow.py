"""Rectified-flow path, loss, AdamW training step and Euler sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from . import tensorio
from .conditioning import ConditionSet
from .tensor import NumericError, Tensor

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-2
CLIP_NORM = 1.0
WARMUP_FRACTION = 0.05


def make_path(z0, eps, sigma):
    """z_sigma = (1 - sigma) z0 + sigma eps; ``sigma`` is a scalar or one value per sample."""
    z0 = np.asarray(z0, np.float64)
    eps = np.asarray(eps, np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and noise {eps.shape} differ in shape")
    s = np.asarray(sigma, np.float64)
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("sigma must lie in [0, 1]")
    if s.ndim == 1 and z0.ndim > 1:
        s = s.reshape((-1,) + (1,) * (z0.ndim - 1))
    return (1.0 - s) * z0 + s * eps


def sample_sigma(rng: np.random.Generator, schedule: str = "uniform", size=None,
                 m: float = 0.0, s: float = 1.0):
    """uniform: U(0, 1).  logit_normal: logistic(m + s n), n ~ N(0, 1)."""
    if schedule == "uniform":
        return rng.uniform(0.0, 1.0, size)
    if schedule == "logit_normal":
        if s <= 0:
            raise ValueError("logit-normal scale must be positive")
        return 1.0 / (1.0 + np.exp(-(m + s * rng.standard_normal(size))))
    raise ValueError(f"unknown sigma schedule {schedule!r}")


@dataclass
class FlowBatch:
    z0: np.ndarray
    eps: np.ndarray
    sigma: np.ndarray
    cond: ConditionSet
    z_sigma: np.ndarray = None

    def __post_init__(self):
        if self.z_sigma is None:
            self.z_sigma = make_path(self.z0, self.eps, self.sigma)

    @property
    def target(self) -> np.ndarray:
        return self.eps - self.z0


def fm_loss_from_prediction(v: Tensor, batch: FlowBatch,
                            weight: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """mean over batch and elements of w(sigma) (v - (eps - z0))^2."""
    target = Tensor._wrap(batch.target)
    if weight is None:
        return T.mse(v, target)
    w = np.asarray(weight(np.asarray(batch.sigma)), np.float64).reshape((-1,) + (1,) * (v.ndim - 1))
    diff = T.sub(v, target)
    wt = Tensor._wrap(np.broadcast_to(w, v.shape).copy())
    return T.mean(T.mul(T.mul(diff, diff), wt))


def fm_loss(batch: FlowBatch, model, weight=None) -> Tensor:
    return fm_loss_from_prediction(model(batch.z_sigma, batch.sigma, batch.cond), batch, weight)


def warmup_lr(step: int, total_steps: int, base_lr: float,
              fraction: float = WARMUP_FRACTION) -> float:
    """Linear warm-up over the first ``fraction`` of steps, then constant."""
    warm = max(1, math.ceil(fraction * total_steps))
    return base_lr * min(1.0, (step + 1) / warm)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        for k in self.m:
            tensorio.save(out_dir / f"opt.m.{k}", self.m[k])
            tensorio.save(out_dir / f"opt.v.{k}", self.v[k])
        (out_dir / "opt.json").write_text(json.dumps({"t": self.t, "names": sorted(self.m)}))

    @classmethod
    def load(cls, in_dir) -> "AdamWState":
        in_dir = Path(in_dir)
        meta = json.loads((in_dir / "opt.json").read_text())
        st = cls(t=int(meta["t"]))
        for k in meta["names"]:
            st.m[k] = tensorio.load(in_dir / f"opt.m.{k}")
            st.v[k] = tensorio.load(in_dir / f"opt.v.{k}")
        return st


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = CLIP_NORM) -> float:
    total = math.sqrt(float(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * f
    return total


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
                 lr: float, weight_decay: float = WEIGHT_DECAY) -> AdamWState:
    b1, b2 = BETAS
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if lr != 0.0:
            p.data = p.data * (1.0 - lr * weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def train_step(model, batch: FlowBatch, opt_state: AdamWState | None, lr: float,
               weight=None) -> tuple[float, AdamWState]:
    """One AdamW step on the model's trainable tensors with global-norm clipping."""
    opt_state = opt_state if opt_state is not None else AdamWState()
    params = model.trainable()
    model.zero_grad()
    loss = fm_loss(batch, model, weight)
    val = loss.item()
    if not math.isfinite(val):
        raise NumericError(f"non-finite flow-matching loss {val} at optimizer step {opt_state.t}")
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    clip_grad_norm(grads)
    adamw_update(params, grads, opt_state, lr)
    model.zero_grad()
    return val, opt_state


def euler_sample(velocity: Callable, cond, steps: int, eps: np.ndarray) -> np.ndarray:
    """Integrate dz/dsigma = v from sigma=1 (noise ``eps``) down to sigma=0.

    ``velocity(z, sigma_vector, cond)`` returns an array shaped like ``z``.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    z = np.array(eps, dtype=np.float64)
    grid = np.linspace(1.0, 0.0, steps + 1)
    B = z.shape[0]
    for a, b in zip(grid[:-1], grid[1:]):
        v = velocity(z, np.full(B, a), cond)
        z = z - (a - b) * v
    return z


def sample_images(model, cond, steps: int, seed: int, shape) -> np.ndarray:
    """Euler-sample latents for ``cond`` from seeded noise."""
    eps = np.random.default_rng(seed).standard_normal(shape)
    return euler_sample(model.velocity, cond, steps, eps)
