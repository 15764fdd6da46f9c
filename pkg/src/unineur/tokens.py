"""Patch tokenization, (block, h, w) rotary positions and multi-modal packing."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

ROPE_BASE = 10000.0
KIND_ORDER = {"target": 0, "context": 1, "eeg": 2, "text": 3}


@dataclass
class TokenBlock:
    kind: str                      # target | context | eeg | text
    tokens: Tensor                 # (..., L_b, d)
    positions: np.ndarray          # (L_b, 3) integer (b, h, w)
    index: int = 0                 # context number i (1-based) for kind == "context"
    grid: tuple[int, int] | None = None

    @property
    def block_index(self) -> int:
        return int(self.positions[0, 0]) if len(self.positions) else 0

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def name(self) -> str:
        return {"target": "x", "eeg": "e", "text": "txt"}.get(self.kind, f"y{self.index}")


@dataclass
class PackedSequence:
    tokens: Tensor                 # (..., L, d)
    positions: np.ndarray          # (L, 3)
    block_sets: dict[str, np.ndarray]
    rotate: np.ndarray = field(default=None)  # (L,) bool, False rows skip RoPE

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    def block(self, name: str) -> Tensor:
        idx = self.block_sets[name]
        return T.slice(self.tokens, -2, int(idx[0]), int(idx[-1]) + 1)


def grid_positions(b: int, gh: int, gw: int) -> np.ndarray:
    h, w = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([np.full(gh * gw, b), h.ravel(), w.ravel()], axis=1).astype(np.int64)


def patchify(image, p: int, proj: Tensor | None = None, kind: str = "target",
             index: int = 0) -> TokenBlock:
    """Split an (..., H, W, ch) image into p x p patches, flattened as (ph, pw, ch).

    ``proj`` (p*p*ch, d) linearly maps each patch; ``None`` keeps the raw patch.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    *lead, H, W, ch = x.shape
    if p <= 0 or H % p or W % p:
        raise DimensionError(f"patch size {p} does not divide image {H}x{W}")
    gh, gw = H // p, W // p
    n = len(lead)
    t = T.reshape(x, (*lead, gh, p, gw, p, ch))
    t = T.transpose(t, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    t = T.reshape(t, (*lead, gh * gw, p * p * ch))
    if proj is not None:
        t = T.matmul(t, proj)
    b = index if kind == "context" else 0
    return TokenBlock(kind, t, grid_positions(b, gh, gw), index=index, grid=(gh, gw))


def unpatchify(tokens: Tensor, p: int, grid: tuple[int, int], ch: int) -> Tensor:
    """Inverse of :func:`patchify` with identity projection."""
    *lead, L, width = tokens.shape
    gh, gw = grid
    if L != gh * gw or width != p * p * ch:
        raise DimensionError(f"cannot unpatchify {tokens.shape} to grid {grid}, p={p}, ch={ch}")
    n = len(lead)
    t = T.reshape(tokens, (*lead, gh, gw, p, p, ch))
    t = T.transpose(t, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(t, (*lead, gh * p, gw * p, ch))


def assign_block_positions(blocks: Sequence[TokenBlock], eeg_spatial: bool = False) -> list[TokenBlock]:
    """Target b=0, context i b=i, EEG b=N+1 with (N+1, 0, j).

    With ``eeg_spatial`` an EEG block carrying a ``grid`` gets (N+1, h, w).
    Text rows get (N+2, 0, j) so no triplet repeats, but are only rotated
    when packed with ``rotate_text``.
    """
    if sum(b.kind == "target" for b in blocks) > 1:
        raise ContractError("at most one target block is allowed")
    contexts = [b for b in blocks if b.kind == "context"]
    n_ctx = len(contexts)
    out = []
    ctx_seen = 0
    for blk in blocks:
        L = blk.length
        if blk.kind == "target":
            gh, gw = blk.grid or (1, L)
            pos = grid_positions(0, gh, gw)
        elif blk.kind == "context":
            ctx_seen += 1
            i = blk.index or ctx_seen
            gh, gw = blk.grid or (1, L)
            pos = grid_positions(i, gh, gw)
            blk = replace(blk, index=i)
        elif blk.kind == "eeg":
            if eeg_spatial and blk.grid is not None:
                pos = grid_positions(n_ctx + 1, *blk.grid)
            else:
                pos = grid_positions(n_ctx + 1, 1, L)
        elif blk.kind == "text":
            pos = grid_positions(n_ctx + 2, 1, L)
        else:
            raise ContractError(f"unknown block kind {blk.kind!r}")
        if len(pos) != L:
            raise DimensionError(f"{blk.kind} block has {L} tokens but grid gives {len(pos)}")
        out.append(replace(blk, positions=pos))
    return out


def default_axis_split(d: int) -> tuple[int, int, int]:
    db = 2 * round(d / 8)
    dh = 2 * round(3 * d / 16)
    return db, dh, d - db - dh


def rope_angles(positions: np.ndarray, axis_split: Sequence[int],
                base: float = ROPE_BASE) -> np.ndarray:
    """Per-token rotation angles of shape (L, d/2) for a (d_b, d_h, d_w) split."""
    if any(s % 2 or s < 0 for s in axis_split):
        raise DimensionError(f"rotary axis split {tuple(axis_split)} must be non-negative and even")
    cols = []
    for axis, dax in enumerate(axis_split):
        if dax == 0:
            continue
        theta = base ** (-2.0 * np.arange(dax // 2) / dax)
        cols.append(np.asarray(positions, dtype=np.float64)[:, axis:axis + 1] * theta[None, :])
    return np.concatenate(cols, axis=1)


def rope_tables(positions: np.ndarray, axis_split: Sequence[int], rotate: np.ndarray | None = None,
                base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    ang = rope_angles(positions, axis_split, base)
    if rotate is not None:
        ang = ang * np.asarray(rotate, dtype=np.float64)[:, None]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x, positions: np.ndarray, axis_split: Sequence[int] | None = None,
                base: float = ROPE_BASE) -> Tensor:
    """Rotate (..., L, d) rows by their (b, h, w) positions, one axis per feature slice."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = x.shape[-1]
    axis_split = tuple(axis_split) if axis_split is not None else default_axis_split(d)
    if sum(axis_split) != d:
        raise DimensionError(f"axis split {axis_split} does not add up to width {d}")
    cos, sin = rope_tables(positions, axis_split, base=base)
    return T.rope(x, cos, sin)


def pack(blocks: Sequence[TokenBlock], text: Tensor | None = None,
         rotate_text: bool = False) -> PackedSequence:
    """Concatenate [x; y_1..y_N; e; txt] and record each block's index set."""
    blocks = list(blocks)
    if text is not None:
        M = text.shape[-2]
        n_ctx = len([b for b in blocks if b.kind == "context"])
        pos = grid_positions(n_ctx + 2, 1, M)
        blocks.append(TokenBlock("text", text, pos))
    if not blocks:
        raise ContractError("nothing to pack")
    blocks.sort(key=lambda b: (KIND_ORDER[b.kind], b.index))
    d = blocks[0].tokens.shape[-1]
    for b in blocks:
        if b.tokens.shape[-1] != d:
            raise DimensionError(f"block {b.name} has width {b.tokens.shape[-1]}, expected {d}")
    sets, rot, start = {}, [], 0
    for b in blocks:
        sets[b.name] = np.arange(start, start + b.length)
        rot.append(np.full(b.length, b.kind != "text" or rotate_text))
        start += b.length
    tokens = blocks[0].tokens if len(blocks) == 1 else T.concat([b.tokens for b in blocks], axis=-2)
    positions = np.concatenate([b.positions for b in blocks], axis=0)
    return PackedSequence(tokens, positions, sets, np.concatenate(rot))
