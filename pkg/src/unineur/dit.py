"""Toy diffusion transformer denoiser v(z_sigma, sigma, c) and its checkpoints."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from . import tensorio
from .attention import AttentionParams, build_mutual_mask, masked_attention
from .conditioning import ConditionSet, Conditioner, NeuralBranch, TextStub
from .tensor import DimensionError, Tensor
from .tokens import (TokenBlock, assign_block_positions, default_axis_split, pack, patchify,
                     rope_tables, unpatchify)

SIGMA_EMBED_DIM = 64


@dataclass
class DiTConfig:
    depth: int = 4
    d_model: int = 64
    heads: int = 4
    d_k: int = 16
    d_v: int = 16
    patch: int = 2
    mlp_ratio: int = 4
    mask_mode: str = "hub"
    axis_split: tuple[int, int, int] | None = None
    seed: int = 0
    image_size: int = 16
    channels: int = 3
    text_len: int = 8              # M
    d_text: int = 64               # d
    d_pooled: int = 32             # d_g
    d_neural: int = 128            # d_f
    eeg_channels: int = 8          # C
    eeg_tokens: int = 4            # L_e
    lora_rank: int = 8
    lora_alpha: float | None = None
    rotate_text: bool = False
    eeg_spatial: bool = False
    fusion: str = "augment"

    def __post_init__(self):
        if self.axis_split is not None:
            self.axis_split = tuple(self.axis_split)
        for f in ("depth", "d_model", "heads", "d_k", "d_v", "patch", "mlp_ratio", "image_size"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.image_size % self.patch:
            raise ValueError("patch must divide image_size")

    @property
    def split(self) -> tuple[int, int, int]:
        s = self.axis_split or default_axis_split(self.d_k)
        if sum(s) != self.d_k:
            raise DimensionError(f"axis split {s} does not add up to d_k={self.d_k}")
        return s

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return g, g

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["axis_split"] = list(self.axis_split) if self.axis_split else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sigma_embedding(sigma: np.ndarray, dim: int = SIGMA_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(sigma, np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


class DiT:
    """Single-stream DiT with adaLN modulation, mutual-mask attention and LoRA.

    Parameters are grouped into ``base`` (the frozen backbone during adapter
    training), ``lora`` and ``neural``.
    """

    def __init__(self, config: DiTConfig):
        self.config = cfg = config
        rng = np.random.default_rng([cfg.seed, 0xD17])
        dm = cfg.d_model
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        hidden = dm * cfg.mlp_ratio
        self.base: dict[str, Tensor] = {}

        def lin(name, di, do, std=None, zero=False):
            s = 1.0 / math.sqrt(di) if std is None else std
            w = np.zeros((di, do)) if zero else rng.normal(0.0, s, (di, do))
            self.base[f"{name}.w"] = Tensor(w, name=f"{name}.w")
            self.base[f"{name}.b"] = Tensor(np.zeros(do), name=f"{name}.b")

        lin("embed.patch", patch_dim, dm)
        lin("embed.text", cfg.d_text, dm)
        lin("embed.sigma0", SIGMA_EMBED_DIM, dm)
        lin("embed.sigma1", dm, dm)
        lin("embed.pooled", cfg.d_pooled, dm)
        self.attn: list[AttentionParams] = []
        for i in range(cfg.depth):
            ap = AttentionParams.init(dm, cfg.heads, cfg.d_k, cfg.d_v, rng)
            for k in ("wq", "wk", "wv", "wo"):
                t = getattr(ap, k)
                t.name = f"blocks.{i}.attn.{k}"
                self.base[t.name] = t
            ap.add_lora(cfg.lora_rank, cfg.lora_alpha, np.random.default_rng([cfg.seed, 0x10A, i]))
            self.attn.append(ap)
            lin(f"blocks.{i}.mod", dm, 6 * dm, zero=True)
            lin(f"blocks.{i}.mlp0", dm, hidden)
            lin(f"blocks.{i}.mlp1", hidden, dm)
        lin("final.mod", dm, 2 * dm, zero=True)
        lin("final.out", dm, patch_dim, zero=True)

        self.stub = TextStub(cfg.d_text, cfg.d_pooled, seed=cfg.seed)
        self.base["text.pad"] = self.stub.pad
        self.branch = NeuralBranch(cfg.eeg_channels, cfg.d_neural, cfg.d_text, cfg.d_pooled,
                                   cfg.text_len, dm, cfg.eeg_tokens, seed=cfg.seed)
        self.conditioner = Conditioner(self.stub, self.branch, cfg.text_len, cfg.fusion)
        self._mask_cache: dict = {}

    # ---------------------------------------------------------------- params

    @property
    def lora(self) -> dict[str, Tensor]:
        out = {}
        for i, ap in enumerate(self.attn):
            for k, ad in ap.lora.items():
                out[f"lora.blocks.{i}.{k}.A"] = ad.A
                out[f"lora.blocks.{i}.{k}.B"] = ad.B
        return out

    @property
    def neural(self) -> dict[str, Tensor]:
        return self.branch.params

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.base, **self.lora, **self.neural}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def set_lora_enabled(self, on: bool) -> None:
        for ap in self.attn:
            ap.set_lora_enabled(on)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def assemble(self, mode, prompts=None, contexts=(), epochs=None) -> ConditionSet:
        return self.conditioner.assemble(mode, prompts, contexts, epochs)

    # ---------------------------------------------------------------- forward

    def _p(self, name):
        return self.base[name]

    def _linear(self, x, name):
        return T.add(T.matmul(x, self._p(f"{name}.w")), self._p(f"{name}.b"))

    def _layout(self, packed):
        key = (self.config.mask_mode, self.config.eeg_spatial,
               tuple((k, len(v)) for k, v in packed.block_sets.items()), bytes(packed.rotate))
        hit = self._mask_cache.get(key)
        if hit is None:
            mask = build_mutual_mask(packed.block_sets, self.config.mask_mode, packed.length)
            hit = (mask, rope_tables(packed.positions, self.config.split, packed.rotate))
            self._mask_cache[key] = hit
        return hit

    def pack_inputs(self, z_sigma, cond: ConditionSet):
        cfg = self.config
        patch = self._p("embed.patch.w")
        x = patchify(z_sigma, cfg.patch, patch)
        blocks = [TokenBlock("target", T.add(x.tokens, self._p("embed.patch.b")),
                             x.positions, grid=x.grid)]
        for i, ctx in enumerate(cond.Z_y, start=1):
            y = patchify(ctx, cfg.patch, patch, kind="context", index=i)
            blocks.append(TokenBlock("context", T.add(y.tokens, self._p("embed.patch.b")),
                                     y.positions, index=i, grid=y.grid))
        if cond.Z_e is not None:
            blocks.append(TokenBlock("eeg", cond.Z_e, np.zeros((cond.Z_e.shape[-2], 3), np.int64)))
        blocks = assign_block_positions(blocks, eeg_spatial=cfg.eeg_spatial)
        text = self._linear(cond.T, "embed.text")
        return pack(blocks, text, rotate_text=cfg.rotate_text)

    def forward(self, z_sigma, sigma, cond: ConditionSet) -> Tensor:
        """Velocity prediction with the same shape as ``z_sigma`` (B, H, W, ch)."""
        cfg = self.config
        z = z_sigma if isinstance(z_sigma, Tensor) else Tensor._wrap(np.asarray(z_sigma, np.float64))
        B = z.shape[0]
        expect = (cfg.image_size, cfg.image_size, cfg.channels)
        if z.shape[1:] != expect:
            raise DimensionError(f"latent shape {z.shape[1:]} != {expect}")
        sigma = np.broadcast_to(np.asarray(sigma, np.float64), (B,))
        self.set_lora_enabled(cond.mode != "text")

        packed = self.pack_inputs(z, cond)
        mask, rope = self._layout(packed)
        L = packed.length
        S = packed.tokens

        temb = Tensor._wrap(sigma_embedding(sigma))
        c = self._linear(T.gelu(self._linear(temb, "embed.sigma0")), "embed.sigma1")
        c = T.add(c, self._linear(cond.g, "embed.pooled"))
        c_act = T.gelu(c)

        dm = cfg.d_model
        for i, ap in enumerate(self.attn):
            mod = self._linear(c_act, f"blocks.{i}.mod")
            sh1, sc1, g1, sh2, sc2, g2 = (T.expand(T.slice(mod, -1, j * dm, (j + 1) * dm), 1, L)
                                          for j in range(6))
            h = T.layer_norm(S)
            h = T.add(T.add(h, T.mul(h, sc1)), sh1)
            S = T.add(S, T.mul(g1, masked_attention(h, ap, mask, rope)))
            h = T.layer_norm(S)
            h = T.add(T.add(h, T.mul(h, sc2)), sh2)
            m = self._linear(T.gelu(self._linear(h, f"blocks.{i}.mlp0")), f"blocks.{i}.mlp1")
            S = T.add(S, T.mul(g2, m))

        xs = packed.block_sets["x"]
        Lx = len(xs)
        hx = T.layer_norm(T.slice(S, 1, int(xs[0]), int(xs[-1]) + 1))
        fmod = self._linear(c_act, "final.mod")
        sh = T.expand(T.slice(fmod, -1, 0, dm), 1, Lx)
        sc = T.expand(T.slice(fmod, -1, dm, 2 * dm), 1, Lx)
        hx = T.add(T.add(hx, T.mul(hx, sc)), sh)
        out = self._linear(hx, "final.out")
        return unpatchify(out, cfg.patch, cfg.grid, cfg.channels)

    __call__ = forward

    def velocity(self, z, sigma, cond) -> np.ndarray:
        with T.no_grad():
            return self.forward(z, sigma, cond).data


# ---------------------------------------------------------------- freezing

def set_trainable(model: DiT, stage: str = "adapter") -> None:
    """``adapter``: only LoRA and neural-branch tensors learn; ``base`` trains the backbone.

    The base stage stands in for the pretrained backbone this machinery is
    normally attached to.
    """
    if stage not in ("adapter", "base"):
        raise ValueError(f"unknown stage {stage!r}")
    for p in model.base.values():
        p.requires_grad = stage == "base"
    for p in model.lora.values():
        p.requires_grad = stage == "adapter"
    for p in model.neural.values():
        p.requires_grad = stage == "adapter"


def trainable_count(model: DiT) -> int:
    return int(sum(p.data.size for p in model.trainable().values()))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: DiT, out_dir, step: int = 0, opt_state=None, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(model.config.to_dict(), indent=1, sort_keys=True))
    (out_dir / "step.txt").write_text(f"{step}\n")
    for name, t in model.named_parameters().items():
        tensorio.save(out_dir / name, t.data)
    tensorio.save(out_dir / "text.table", model.stub.table)
    tensorio.save(out_dir / "text.pooled", model.stub.pooled)
    lora_meta = {f"blocks.{i}.{k}": {"rank": ad.rank, "alpha": ad.alpha, "enabled": ad.enabled}
                 for i, ap in enumerate(model.attn) for k, ad in ap.lora.items()}
    (out_dir / "lora.json").write_text(json.dumps(lora_meta, indent=1, sort_keys=True))
    if opt_state is not None:
        opt_state.save(out_dir)
    if extra:
        (out_dir / "meta.json").write_text(json.dumps(extra, indent=1, sort_keys=True))
    return out_dir


def load_checkpoint(in_dir, with_opt: bool = False):
    in_dir = Path(in_dir)
    cfg = DiTConfig.from_dict(json.loads((in_dir / "config.json").read_text()))
    model = DiT(cfg)
    for name, t in model.named_parameters().items():
        arr = tensorio.load(in_dir / name)
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    model.stub.table = tensorio.load(in_dir / "text.table")
    model.stub.pooled = tensorio.load(in_dir / "text.pooled")
    meta = json.loads((in_dir / "lora.json").read_text())
    for i, ap in enumerate(model.attn):
        for k, ad in ap.lora.items():
            ad.alpha = float(meta[f"blocks.{i}.{k}"]["alpha"])
    step = int((in_dir / "step.txt").read_text().strip())
    if not with_opt:
        return model, step
    from .flow import AdamWState
    opt = AdamWState.load(in_dir) if (in_dir / "opt.json").exists() else None
    return model, step, opt
