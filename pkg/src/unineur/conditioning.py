"""Condition set assembly: text-encoder stubs and the EEG neural branch.

Prompt hashing is FNV-1a 64 over the UTF-8 bytes of each whitespace token;
the row index is the low 12 bits of the 64-bit hash (``hash % 4096``).  The
pooled vector uses the same hash of the whole prompt string.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

TABLE_ROWS = 4096
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MODES = ("text", "eeg", "text+eeg")


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def table_row(s: str) -> int:
    return fnv1a64(s.encode("utf-8")) % TABLE_ROWS


class TextStub:
    """Deterministic stand-in for the token-level and pooled text encoders."""

    def __init__(self, d: int, d_g: int, seed: int = 0):
        rng = np.random.default_rng([seed, 0x7E47])
        self.table = rng.normal(size=(TABLE_ROWS, d))
        self.pooled = rng.normal(size=(TABLE_ROWS, d_g))
        self.pad = Tensor(np.zeros(d), name="text.pad")
        self.d, self.d_g = d, d_g

    def encode(self, prompts: Sequence[str], M: int) -> tuple[Tensor, Tensor]:
        """Batched (T, g): T is (B, M, d), g is (B, d_g)."""
        if M < 1:
            raise ValueError("M must be at least 1")
        B = len(prompts)
        rows = np.zeros((B, M, self.d))
        is_pad = np.ones((B, M, 1))
        g = np.empty((B, self.d_g))
        for i, prompt in enumerate(prompts):
            toks = prompt.split()[:M]
            for j, tok in enumerate(toks):
                rows[i, j] = self.table[table_row(tok)]
                is_pad[i, j] = 0.0
            g[i] = self.pooled[table_row(prompt)]
        pad = T.expand(T.expand(self.pad, 0, M), 0, B)
        Tm = T.add(T.mul(pad, Tensor._wrap(np.broadcast_to(is_pad, rows.shape).copy())),
                   Tensor._wrap(rows))
        return Tm, Tensor._wrap(g)


def encode_text_stub(stub: TextStub, prompt: str, M: int) -> tuple[Tensor, Tensor]:
    """Single-prompt form: T is (M, d), g is (d_g,)."""
    Tb, gb = stub.encode([prompt], M)
    return T.reshape(Tb, Tb.shape[1:]), T.reshape(gb, gb.shape[1:])


def _linear(rng, d_in, d_out, name):
    w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out)), name=f"{name}.w")
    b = Tensor(np.zeros(d_out), name=f"{name}.b")
    return w, b


class NeuralBranch:
    """Strided temporal conv decoder, MLP adapter and the text-space projections."""

    KERNEL = 5
    STRIDE = 2

    def __init__(self, channels: int, d_f: int, d: int, d_g: int, M: int, d_model: int,
                 eeg_tokens: int, conv_widths=(32, 64), seed: int = 0):
        rng = np.random.default_rng([seed, 0xEE6])
        self.channels, self.d_f, self.d, self.d_g, self.M = channels, d_f, d, d_g, M
        self.d_model, self.eeg_tokens = d_model, eeg_tokens
        widths = [channels, *conv_widths, d_f]
        self.params: dict[str, Tensor] = {}
        for i in range(3):
            w, b = _linear(rng, widths[i] * self.KERNEL, widths[i + 1], f"neural.conv{i}")
            self.params[w.name], self.params[b.name] = w, b
        for name, (di, do) in {"neural.adapter0": (d_f, d_f), "neural.adapter1": (d_f, d_f),
                               "neural.proj_v": (d_f, d_g), "neural.proj_t": (d_f, M * d),
                               "neural.eeg_tokens": (d_f, eeg_tokens * d_model)}.items():
            w, b = _linear(rng, di, do, name)
            self.params[w.name], self.params[b.name] = w, b

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def _conv(self, x: Tensor, i: int) -> Tensor:
        B, C, W = x.shape
        pad = self.KERNEL // 2
        z = Tensor._wrap(np.zeros((B, C, pad)))
        xp = T.concat([z, x, z], axis=-1)
        cols = T.unfold1d(xp, self.KERNEL, self.STRIDE)             # B, W', C*k
        y = T.add(T.matmul(cols, self.p(f"neural.conv{i}.w")), self.p(f"neural.conv{i}.b"))
        return T.transpose(T.gelu(y), (0, 2, 1))                     # B, C', W'

    def decode(self, epochs) -> Tensor:
        """(B, C, W) epochs -> (B, d_f) pooled decoder features."""
        x = epochs if isinstance(epochs, Tensor) else Tensor._wrap(np.asarray(epochs, np.float64))
        if x.ndim == 2:
            x = T.reshape(x, (1, *x.shape))
        if x.shape[1] != self.channels:
            raise DimensionError(f"epoch has {x.shape[1]} channels, decoder expects {self.channels}")
        for i in range(3):
            x = self._conv(x, i)
        return T.mean(x, axis=-1)

    def adapt(self, f: Tensor) -> Tensor:
        h = T.gelu(T.add(T.matmul(f, self.p("neural.adapter0.w")), self.p("neural.adapter0.b")))
        h = T.add(T.matmul(h, self.p("neural.adapter1.w")), self.p("neural.adapter1.b"))
        return T.add(f, h)

    def features(self, epochs) -> Tensor:
        return self.adapt(self.decode(epochs))

    def project(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """f_neural (B, d_f) -> (T_sub (B, M, d), g_sub (B, d_g))."""
        g = T.add(T.matmul(f, self.p("neural.proj_v.w")), self.p("neural.proj_v.b"))
        t = T.add(T.matmul(f, self.p("neural.proj_t.w")), self.p("neural.proj_t.b"))
        return T.reshape(t, (f.shape[0], self.M, self.d)), g

    def eeg_block(self, f: Tensor) -> Tensor:
        z = T.add(T.matmul(f, self.p("neural.eeg_tokens.w")), self.p("neural.eeg_tokens.b"))
        return T.reshape(z, (f.shape[0], self.eeg_tokens, self.d_model))


def neural_decoder(branch: NeuralBranch, epochs) -> Tensor:
    return branch.decode(epochs)


def adapter_project(branch: NeuralBranch, f: Tensor) -> tuple[Tensor, Tensor]:
    return branch.project(f)


@dataclass
class ConditionSet:
    T: Tensor                                  # B x M x d
    g: Tensor                                  # B x d_g
    Z_y: list = field(default_factory=list)    # context latents, each B x H x W x ch
    Z_e: Tensor | None = None                  # B x L_e x d_model
    mode: str = "text"

    @property
    def batch(self) -> int:
        return self.T.shape[0]


class Conditioner:
    def __init__(self, stub: TextStub, branch: NeuralBranch | None, M: int,
                 fusion: str = "augment"):
        if fusion not in ("augment", "substitute"):
            raise ValueError(f"unknown fusion rule {fusion!r}")
        self.stub, self.branch, self.M, self.fusion = stub, branch, M, fusion

    def assemble(self, mode: str, prompts: Sequence[str] | None = None, contexts=(),
                 epochs=None) -> ConditionSet:
        """Build c = {T, g, Z_y, Z_e} for a batch.

        text: stub (T, g), no EEG block.  eeg: (T, g) replaced by projections
        of the neural features plus an EEG token block.  text+eeg: stub text
        kept and the EEG block attached (``fusion="substitute"`` replaces the
        text features as in eeg mode instead).
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        uses_text = mode == "text" or (mode == "text+eeg" and self.fusion == "augment")
        if uses_text and prompts is None:
            raise ContractError(f"mode {mode!r} needs prompts")
        if mode != "text":
            if epochs is None:
                raise ContractError(f"mode {mode!r} needs EEG epochs")
            if self.branch is None:
                raise ContractError("no neural branch configured")
        contexts = [np.asarray(c, np.float64) for c in contexts]
        if mode == "text":
            Tm, g = self.stub.encode(prompts, self.M)
            return ConditionSet(Tm, g, contexts, None, mode)
        f = self.branch.features(epochs)
        Z_e = self.branch.eeg_block(f)
        if uses_text:
            Tm, g = self.stub.encode(prompts, self.M)
        else:
            Tm, g = self.branch.project(f)
        return ConditionSet(Tm, g, contexts, Z_e, mode)


def assemble(conditioner: Conditioner, mode: str, prompts=None, contexts=(), epochs=None) -> ConditionSet:
    return conditioner.assemble(mode, prompts, contexts, epochs)
