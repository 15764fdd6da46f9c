"""Blockwise mutual attention mask, multi-head attention and LoRA adapters."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from . import tensorio
from .tensor import ContractError, DimensionError, Tensor

MASK_MODES = ("literal", "hub")
LORA_TARGETS = ("wq", "wk", "wv", "wo")


def build_mutual_mask(block_sets: Mapping[str, np.ndarray], mode: str = "hub",
                      length: int | None = None) -> np.ndarray:
    """L x L additive mask over {0, -inf}.

    A query may always read its own block.  Text queries read everything; in
    ``hub`` mode every query may additionally read the text block.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")
    L = length if length is not None else int(sum(len(v) for v in block_sets.values()))
    owner = np.full(L, -1)
    for bi, idx in enumerate(block_sets.values()):
        idx = np.asarray(idx, dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= L):
            raise ContractError(f"block indices out of range [0, {L})")
        if (owner[idx] >= 0).any() or len(np.unique(idx)) != len(idx):
            raise ContractError("block sets overlap")
        owner[idx] = bi
    if (owner < 0).any():
        raise ContractError("block sets do not cover every token")
    allowed = owner[:, None] == owner[None, :]
    txt = np.zeros(L, dtype=bool)
    if "txt" in block_sets:
        txt[np.asarray(block_sets["txt"], dtype=int)] = True
    allowed[txt, :] = True
    if mode == "hub":
        allowed[:, txt] = True
    return np.where(allowed, 0.0, -np.inf)


def mask_to_text(mask: np.ndarray) -> str:
    """One line per query row: ``.`` allowed, ``#`` blocked."""
    return "\n".join("".join("." if v == 0 else "#" for v in row) for row in mask) + "\n"


@dataclass
class LoraAdapter:
    target: str
    A: Tensor                      # d_in x r
    B: Tensor                      # r x d_out
    alpha: float
    enabled: bool = True

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, target: str, d_in: int, d_out: int, rank: int, alpha: float | None = None,
             rng: np.random.Generator | None = None, std: float = 0.02) -> "LoraAdapter":
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min({d_in}, {d_out})")
        rng = rng or np.random.default_rng(0)
        A = Tensor(rng.normal(0.0, std, (d_in, rank)), name=f"lora.{target}.A")
        B = Tensor(np.zeros((rank, d_out)), name=f"lora.{target}.B")
        return cls(target, A, B, float(2 * rank if alpha is None else alpha))


def lora_forward(x: Tensor, W0: Tensor, adapter: LoraAdapter | None = None) -> Tensor:
    """x W0 + (alpha / r) (x A) B; the branch is skipped when disabled."""
    base = T.matmul(x, W0)
    if adapter is None or not adapter.enabled:
        return base
    if adapter.A.shape[0] != W0.shape[0] or adapter.B.shape[1] != W0.shape[1] \
            or adapter.A.shape[1] != adapter.B.shape[0]:
        raise DimensionError(
            f"adapter {adapter.A.shape}x{adapter.B.shape} does not fit weight {W0.shape}")
    low = T.matmul(T.matmul(x, adapter.A), adapter.B)
    return T.add(base, T.scale(low, adapter.scaling))


def lora_merge(W0: Tensor | np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Dense W0 + (alpha / r) A B.  Not idempotent: merging twice adds the update twice."""
    w = W0.data if isinstance(W0, Tensor) else np.asarray(W0)
    return w + adapter.scaling * (adapter.A.data @ adapter.B.data)


def save_adapters(adapters: Mapping[str, LoraAdapter], out_dir, prefix: str = "lora") -> None:
    out_dir = Path(out_dir)
    meta = {}
    for key, ad in adapters.items():
        tensorio.save(out_dir / f"{prefix}.{key}.A", ad.A.data)
        tensorio.save(out_dir / f"{prefix}.{key}.B", ad.B.data)
        meta[key] = {"rank": ad.rank, "alpha": ad.alpha, "enabled": ad.enabled, "target": ad.target}
    (out_dir / f"{prefix}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_adapters(in_dir, prefix: str = "lora") -> dict[str, LoraAdapter]:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / f"{prefix}.json").read_text())
    out = {}
    for key, m in meta.items():
        A = Tensor(tensorio.load(in_dir / f"{prefix}.{key}.A"))
        B = Tensor(tensorio.load(in_dir / f"{prefix}.{key}.B"))
        if A.shape[1] != m["rank"]:
            raise ValueError(f"adapter {key}: stored rank {m['rank']} != A width {A.shape[1]}")
        out[key] = LoraAdapter(m.get("target", key), A, B, float(m["alpha"]), bool(m["enabled"]))
    return out


@dataclass
class AttentionParams:
    """Per-head projections stored side by side: head j owns columns j*d_k:(j+1)*d_k."""
    wq: Tensor                     # d_model x h*d_k
    wk: Tensor
    wv: Tensor                     # d_model x h*d_v
    wo: Tensor                     # h*d_v x d_model
    heads: int
    lora: dict[str, LoraAdapter] = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self):
        if self.wo.shape[0] != self.wv.shape[1]:
            raise DimensionError(f"W_O rows {self.wo.shape[0]} != h*d_v {self.wv.shape[1]}")
        if self.wq.shape != self.wk.shape or self.wq.shape[1] % self.heads:
            raise DimensionError("W_Q/W_K must match and split evenly across heads")

    @property
    def d_k(self) -> int:
        return self.wq.shape[1] // self.heads

    @property
    def d_v(self) -> int:
        return self.wv.shape[1] // self.heads

    @classmethod
    def init(cls, d_model: int, heads: int, d_k: int, d_v: int,
             rng: np.random.Generator) -> "AttentionParams":
        s = 1.0 / math.sqrt(d_model)
        return cls(Tensor(rng.normal(0, s, (d_model, heads * d_k))),
                   Tensor(rng.normal(0, s, (d_model, heads * d_k))),
                   Tensor(rng.normal(0, s, (d_model, heads * d_v))),
                   Tensor(rng.normal(0, 1.0 / math.sqrt(heads * d_v), (heads * d_v, d_model))),
                   heads)

    def add_lora(self, rank: int, alpha: float | None, rng: np.random.Generator) -> None:
        for name in LORA_TARGETS:
            W = getattr(self, name)
            self.lora[name] = LoraAdapter.init(name, W.shape[0], W.shape[1], rank, alpha, rng)

    def set_lora_enabled(self, on: bool) -> None:
        for ad in self.lora.values():
            ad.enabled = on


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, hd = x.shape
    n = len(lead)
    t = T.reshape(x, (*lead, L, heads, hd // heads))
    return T.transpose(t, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dh = x.shape
    n = len(lead)
    t = T.transpose(x, (*range(n), n + 1, n, n + 2))
    return T.reshape(t, (*lead, L, h * dh))


def masked_attention(S: Tensor, params: AttentionParams, mask: np.ndarray | None = None,
                     rope: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + M) V per head, heads concatenated then projected.

    ``rope`` is a (cos, sin) table pair of shape (L, d_k/2) applied to Q and K.
    Fully masked query rows contribute a zero head output.
    """
    L = S.shape[-2]
    if mask is not None and mask.shape != (L, L):
        raise DimensionError(f"mask {mask.shape} does not match sequence length {L}")
    lo = params.lora
    q = _split_heads(lora_forward(S, params.wq, lo.get("wq")), params.heads)
    k = _split_heads(lora_forward(S, params.wk, lo.get("wk")), params.heads)
    v = _split_heads(lora_forward(S, params.wv, lo.get("wv")), params.heads)
    if rope is not None:
        q = T.rope(q, *rope)
        k = T.rope(k, *rope)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(params.d_k))
    if mask is not None:
        scores = T.add(scores, Tensor._wrap(mask))
    att = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(att, v))
    return lora_forward(out, params.wo, lo.get("wo"))
