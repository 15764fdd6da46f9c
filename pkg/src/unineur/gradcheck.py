"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` maps the input tensor(s) to a scalar Tensor and must be deterministic.
    With ``max_coords`` only a seeded random subset of each input's coordinates
    is differenced (the analytic gradient is still computed in full).
    """
    if not 0 < h <= 1e-3:
        raise ValueError(f"step h={h} outside (0, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs).item()
            flat[i] = orig - h
            fm = f(*xs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- suite

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    from . import tensor as T

    def r(*shape):
        return Tensor(rng.normal(size=shape))

    w3 = rng.normal(size=(2, 3, 5))
    w4 = rng.normal(size=(2, 3, 4))
    w8 = rng.normal(size=(2, 3, 8))
    cos_sin = rng.uniform(0, 2 * np.pi, (3, 4))
    cos, sin = np.cos(cos_sin), np.sin(cos_sin)
    mask = np.where(rng.uniform(size=(3, 5)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0
    w324 = rng.normal(size=(3, 2, 4))
    w24 = rng.normal(size=(2, 4))
    w23 = rng.normal(size=(2, 3))
    w249 = rng.normal(size=(2, 4, 9))

    def wsum(t, w):
        return T.sum(T.mul(t, Tensor._wrap(w)))

    return {
        "add": (lambda a, b: wsum(T.add(a, b), w4), [r(2, 3, 4), r(4)]),
        "sub": (lambda a, b: wsum(T.sub(a, b), w4), [r(2, 3, 4), r(3, 4)]),
        "mul": (lambda a, b: wsum(T.mul(a, b), w4), [r(2, 3, 4), r(2, 3, 4)]),
        "scale": (lambda a: wsum(T.scale(a, -1.7), w4), [r(2, 3, 4)]),
        "matmul": (lambda a, b: wsum(T.matmul(a, b), w3), [r(2, 3, 4), r(4, 5)]),
        "matmul_batched": (lambda a, b: wsum(T.matmul(a, b), w3), [r(2, 3, 4), r(2, 4, 5)]),
        "matmul_chain": (lambda a, b, c: wsum(T.matmul(T.matmul(a, b), c), w3),
                         [r(2, 3, 4), r(4, 6), r(6, 5)]),
        "transpose": (lambda a: wsum(T.transpose(a, (1, 0, 2)), w324), [r(2, 3, 4)]),
        "reshape": (lambda a: wsum(T.reshape(a, (3, 2, 4)), w324), [r(2, 3, 4)]),
        "concat": (lambda a, b: wsum(T.concat([a, b], axis=-1), w8), [r(2, 3, 4), r(2, 3, 4)]),
        "slice": (lambda a: wsum(T.slice(a, -1, 2, 6), w4), [r(2, 3, 8)]),
        "expand": (lambda a: wsum(T.expand(a, 1, 3), w4), [r(2, 4)]),
        "sum": (lambda a: wsum(T.sum(a, axis=1), w24), [r(2, 3, 4)]),
        "mean": (lambda a: wsum(T.mean(a, axis=-1), w23), [r(2, 3, 4)]),
        "gelu": (lambda a: wsum(T.gelu(a), w4), [r(2, 3, 4)]),
        "softmax": (lambda a: wsum(T.softmax(a, -1), w3), [r(2, 3, 5)]),
        "softmax_masked": (lambda a: wsum(T.softmax(T.add(a, Tensor._wrap(mask)), -1), w3), [r(2, 3, 5)]),
        "softmax_matmul": (lambda a, b: wsum(T.softmax(T.matmul(a, b), -1), w3), [r(2, 3, 4), r(4, 5)]),
        "layer_norm": (lambda a: wsum(T.layer_norm(a), w8), [r(2, 3, 8)]),
        "mse": (lambda a, b: T.mse(a, b), [r(2, 3, 4), r(2, 3, 4)]),
        "rope": (lambda a: wsum(T.rope(a, cos, sin), w8), [r(2, 3, 8)]),
        "unfold1d": (lambda a: wsum(T.unfold1d(a, 3, 2), w249), [r(2, 3, 9)]),
    }


def op_suite(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per op, each on freshly seeded random inputs."""
    rng = np.random.default_rng(seed)
    return {name: grad_check(f, xs, h) for name, (f, xs) in _op_cases(rng).items()}


def model_check(seed: int = 0, h: float = 1e-5, max_coords: int = 6,
                mode: str = "text+eeg") -> float:
    """Depth-1, d_model=16 denoiser with every parameter group perturbed off its init.

    Returns the worst relative error over a seeded subset of coordinates of
    every parameter tensor (LoRA, neural branch and backbone alike).
    """
    from .dit import DiT, DiTConfig
    from .flow import FlowBatch, fm_loss

    cfg = DiTConfig(depth=1, d_model=16, heads=2, d_k=8, d_v=8, image_size=4, patch=2,
                    text_len=3, d_text=8, d_pooled=4, d_neural=8, eeg_channels=2, eeg_tokens=2,
                    lora_rank=2, mlp_ratio=2, seed=seed)
    model = DiT(cfg)
    rng = np.random.default_rng([seed, 99])
    params = model.named_parameters()
    for name, p in params.items():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    B = 2
    z0 = rng.normal(size=(B, 4, 4, 3))
    eps = rng.normal(size=z0.shape)
    sigma = rng.uniform(0.1, 0.9, B)
    epochs = rng.normal(size=(B, 2, 16))
    ctx = [rng.normal(size=(B, 4, 4, 3))]
    names = sorted(params)
    tensors = [params[n] for n in names]

    def f(*ts):
        cond = model.assemble(mode, ["style 0", "style 1"], ctx, epochs)
        return fm_loss(FlowBatch(z0, eps, sigma, cond), model)

    return grad_check(f, tensors, h, max_coords=max_coords, seed=seed)


def run_suite(seed: int = 0) -> tuple[bool, dict[str, float]]:
    report = op_suite(seed)
    report["denoiser_depth1"] = model_check(seed)
    ok = all(v < (MODEL_TOLERANCE if k == "denoiser_depth1" else OP_TOLERANCE)
             for k, v in report.items())
    return ok, report
