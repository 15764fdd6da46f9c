import math
from pathlib import Path

import numpy as np
import pytest

from unineur import tensor as T
from unineur.attention import (AttentionParams, LoraAdapter, build_mutual_mask, load_adapters,
                               lora_forward, lora_merge, masked_attention, mask_to_text,
                               save_adapters)
from unineur.gradcheck import grad_check
from unineur.harness import mask_dump
from unineur.tensor import ContractError, Tensor
from unineur.tokens import rope_tables

FIXTURES = Path(__file__).parent / "fixtures" / "masks"
LAYOUTS = {
    "tiny": "x:1,txt:1",
    "canonical": "x:4,y1:4,e:2,txt:3",
    "two_contexts": "x:2,y1:2,y2:2,txt:2",
    "eeg_only": "x:3,e:2,txt:2",
    "mixed": "x:4,y1:2,y2:3,e:1,txt:4",
}


def sets_of(*lengths, names=None):
    names = names or [f"b{i}" for i in range(len(lengths))]
    out, s = {}, 0
    for n, L in zip(names, lengths):
        out[n] = np.arange(s, s + L)
        s += L
    return out


def allowed(mask, row):
    return set(np.where(mask[row] == 0)[0].tolist())


# ---- mask rules

def test_literal_example():
    sets = {"x": np.array([0, 1]), "y1": np.array([2]), "txt": np.array([3, 4])}
    m = build_mutual_mask(sets, "literal")
    assert allowed(m, 0) == {0, 1}
    assert allowed(m, 2) == {2}
    assert allowed(m, 3) == allowed(m, 4) == set(range(5))
    assert set(np.unique(m)) <= {0.0, -np.inf}


def test_hub_example():
    sets = {"x": np.array([0, 1]), "y1": np.array([2]), "txt": np.array([3, 4])}
    m = build_mutual_mask(sets, "hub")
    assert allowed(m, 0) == {0, 1, 3, 4}
    assert allowed(m, 2) == {2, 3, 4}


def test_single_block_all_zero():
    for mode in ("literal", "hub"):
        assert (build_mutual_mask({"x": np.arange(6)}, mode) == 0).all()


def test_overlap_and_gap_rejected():
    with pytest.raises(ContractError):
        build_mutual_mask({"x": np.array([0, 1]), "txt": np.array([1, 2])})
    with pytest.raises(ContractError):
        build_mutual_mask({"x": np.array([0]), "txt": np.array([2])}, length=3)


def test_mask_same_block_symmetric_and_modes_differ_in_text_columns():
    sets = sets_of(3, 2, 2, 3, names=["x", "y1", "e", "txt"])
    lit, hub = build_mutual_mask(sets, "literal"), build_mutual_mask(sets, "hub")
    for idx in sets.values():
        for i in idx:
            for j in idx:
                assert lit[i, j] == lit[j, i] == 0
    diff = np.argwhere(lit != hub)
    assert set(diff[:, 1].tolist()) <= set(sets["txt"].tolist())
    assert len(diff) > 0


@pytest.mark.parametrize("name", sorted(LAYOUTS))
@pytest.mark.parametrize("mode", ["literal", "hub"])
def test_golden_mask_dumps(name, mode):
    expected = (FIXTURES / f"{name}.{mode}.txt").read_bytes()
    assert mask_dump(LAYOUTS[name], mode).encode() == expected


def test_tiny_literal_dump():
    assert mask_dump("x:1,txt:1", "literal") == ".#\n..\n"


@pytest.mark.parametrize("bad", ["", "x", "x:0", "x:2,x:2", "y1:2", "x:2,q:1", "x:-1"])
def test_malformed_layouts(bad):
    with pytest.raises(ValueError):
        mask_dump(bad)


def test_mask_to_text():
    assert mask_to_text(np.array([[0.0, -np.inf]])) == ".#\n"


# ---- attention

def identity_params(d, heads=1):
    I = Tensor(np.eye(d))
    return AttentionParams(I, I, I, I, heads)


def test_single_token_returns_value():
    rng = np.random.default_rng(0)
    p = AttentionParams.init(4, 1, 4, 4, rng)
    p.wo = Tensor(np.eye(4))
    S = Tensor(rng.normal(size=(1, 4)))
    out = masked_attention(S, p, np.zeros((1, 1)))
    assert np.allclose(out.data, S.data @ p.wv.data, atol=1e-14)
    out = masked_attention(S, identity_params(4), np.zeros((1, 1)))
    assert np.array_equal(out.data, S.data)


def reference_attention(S, p, mask):
    """Plain loops over heads, rows and keys."""
    L = S.shape[0]
    q, k, v = S @ p.wq.data, S @ p.wk.data, S @ p.wv.data
    dk, dv = p.d_k, p.d_v
    out = np.zeros((L, p.heads * dv))
    for h in range(p.heads):
        qh, kh, vh = q[:, h * dk:(h + 1) * dk], k[:, h * dk:(h + 1) * dk], v[:, h * dv:(h + 1) * dv]
        for i in range(L):
            s = np.array([qh[i] @ kh[j] / math.sqrt(dk) + mask[i, j] for j in range(L)])
            if np.isinf(s).all():
                continue
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, h * dv:(h + 1) * dv] = w @ vh
    return out @ p.wo.data


def test_matches_loop_reference():
    rng = np.random.default_rng(1)
    p = AttentionParams.init(8, 2, 3, 4, rng)
    S = rng.normal(size=(7, 8))
    mask = build_mutual_mask(sets_of(3, 2, 2, names=["x", "y1", "txt"]), "literal")
    out = masked_attention(Tensor(S), p, mask).data
    assert np.abs(out - reference_attention(S, p, mask)).max() < 1e-12


def test_fully_masked_rows_are_zero():
    rng = np.random.default_rng(2)
    p = identity_params(4)
    mask = np.zeros((3, 3))
    mask[1, :] = -np.inf
    out = masked_attention(Tensor(rng.normal(size=(3, 4))), p, mask).data
    assert np.array_equal(out[1], np.zeros(4))


def test_literal_isolation_50_trials():
    sets = sets_of(4, 4, 3, 2, 3, names=["x", "y1", "y2", "e", "txt"])
    mask = build_mutual_mask(sets, "literal")
    L = 16
    y1, y2 = sets["y1"], sets["y2"]
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = AttentionParams.init(8, 2, 4, 4, rng)
        p.add_lora(2, None, rng)
        for ad in p.lora.values():
            ad.B = Tensor(rng.normal(size=ad.B.shape))
        pos = rng.integers(0, 5, (L, 3))
        rope = rope_tables(pos, (2, 0, 2))
        S = rng.normal(size=(L, 8))
        a = masked_attention(Tensor(S), p, mask, rope).data
        S2 = S.copy()
        S2[y2] = rng.normal(scale=100.0, size=(len(y2), 8))
        b = masked_attention(Tensor(S2), p, mask, rope).data
        worst = max(worst, np.abs(a[y1] - b[y1]).max())
        assert np.abs(a[sets["txt"]] - b[sets["txt"]]).max() > 0
    assert worst < 1e-12


def test_text_rows_depend_on_every_block():
    sets = sets_of(3, 2, 2, 2, names=["x", "y1", "e", "txt"])
    rng = np.random.default_rng(3)
    p = AttentionParams.init(6, 2, 3, 3, rng)
    S = rng.normal(size=(9, 6))
    for mode in ("literal", "hub"):
        mask = build_mutual_mask(sets, mode)
        base = masked_attention(Tensor(S), p, mask).data
        for name in ("x", "y1", "e"):
            S2 = S.copy()
            S2[sets[name]] += 1.0
            assert np.abs(masked_attention(Tensor(S2), p, mask).data[sets["txt"]] - base[sets["txt"]]).max() > 1e-6


def test_block_diagonal_equivalence():
    rng = np.random.default_rng(4)
    p = AttentionParams.init(6, 3, 2, 2, rng)
    sets = sets_of(3, 4, 2)
    S = rng.normal(size=(9, 6))
    L = 9
    mask = np.full((L, L), -np.inf)
    for idx in sets.values():
        mask[np.ix_(idx, idx)] = 0.0
    full = masked_attention(Tensor(S), p, mask).data
    for idx in sets.values():
        part = masked_attention(Tensor(S[idx]), p, np.zeros((len(idx), len(idx)))).data
        assert np.abs(full[idx] - part).max() < 1e-12


def test_attention_gradient():
    rng = np.random.default_rng(5)
    p = AttentionParams.init(4, 2, 2, 2, rng)
    mask = build_mutual_mask(sets_of(2, 2, 1, names=["x", "y1", "txt"]), "hub")
    rope = rope_tables(rng.integers(0, 4, (5, 3)), (0, 0, 2))
    w = Tensor(rng.normal(size=(5, 4)))
    f = lambda s: T.sum(T.mul(masked_attention(s, p, mask, rope), w))
    assert grad_check(f, Tensor(rng.normal(size=(5, 4)))) < 1e-6


# ---- LoRA

def test_lora_zero_update():
    rng = np.random.default_rng(6)
    x, W0 = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 3)))
    ad = LoraAdapter("w", Tensor(np.zeros((4, 2))), Tensor(rng.normal(size=(2, 3))), 4.0)
    assert np.array_equal(lora_forward(x, W0, ad).data, x.data @ W0.data)
    ad = LoraAdapter("w", Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(2, 3))), 0.0)
    assert np.array_equal(lora_forward(x, W0, ad).data, x.data @ W0.data)
    ad.enabled = False
    ad.alpha = 4.0
    assert np.array_equal(lora_forward(x, W0, ad).data, x.data @ W0.data)


def test_lora_dense_merge_oracle():
    rng = np.random.default_rng(7)
    x, W0 = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    A, B = rng.normal(size=(6, 2)), rng.normal(size=(2, 3))
    ad = LoraAdapter("w", Tensor(A), Tensor(B), 4.0)
    dense = W0 + 2.0 * A @ B
    out = lora_forward(Tensor(x), Tensor(W0), ad).data
    assert np.abs(out - x @ dense).max() < 1e-12
    merged = lora_merge(W0, ad)
    assert np.abs(x @ merged - out).max() < 1e-12


def test_lora_merge_properties():
    rng = np.random.default_rng(8)
    W0 = Tensor(rng.normal(size=(4, 4)))
    before = W0.data.copy()
    zero = LoraAdapter("w", Tensor(np.zeros((4, 2))), Tensor(rng.normal(size=(2, 4))), 4.0)
    assert np.array_equal(lora_merge(W0, zero), W0.data)
    ad = LoraAdapter("w", Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(2, 4))), 4.0)
    once = lora_merge(W0, ad)
    twice = lora_merge(once, ad)
    assert not np.allclose(once, twice)
    assert np.array_equal(W0.data, before)


def test_lora_init_and_rank_limit():
    ad = LoraAdapter.init("wq", 16, 8, 4, rng=np.random.default_rng(0))
    assert ad.alpha == 8.0 and ad.rank == 4
    assert np.array_equal(ad.B.data, np.zeros((4, 8)))
    assert abs(ad.A.data.std() - 0.02) < 0.005
    with pytest.raises(ValueError):
        LoraAdapter.init("wq", 4, 3, 4)


def test_lora_gradients():
    rng = np.random.default_rng(9)
    x, W0 = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 3)))
    A, B = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(2, 3)))
    w = Tensor(rng.normal(size=(3, 3)))
    f = lambda a, b: T.sum(T.mul(lora_forward(x, W0, LoraAdapter("w", a, b, 3.0)), w))
    assert grad_check(f, [A, B]) < 1e-6


def test_lora_disable_restores_attention_bit_exact():
    rng = np.random.default_rng(10)
    p = AttentionParams.init(8, 2, 4, 4, rng)
    S = Tensor(rng.normal(size=(5, 8)))
    base = masked_attention(S, p).data
    p.add_lora(2, None, rng)
    assert np.array_equal(masked_attention(S, p).data, base)      # B = 0
    for ad in p.lora.values():
        ad.B = Tensor(rng.normal(size=ad.B.shape))
    assert not np.array_equal(masked_attention(S, p).data, base)
    p.set_lora_enabled(False)
    assert np.array_equal(masked_attention(S, p).data, base)


def test_adapter_serialization(tmp_path):
    rng = np.random.default_rng(11)
    ads = {"blocks.0.wq": LoraAdapter("wq", Tensor(rng.normal(size=(4, 2))),
                                      Tensor(rng.normal(size=(2, 4))), 4.0, False)}
    save_adapters(ads, tmp_path)
    assert (tmp_path / "lora.blocks.0.wq.A").exists() and (tmp_path / "lora.json").exists()
    back = load_adapters(tmp_path)["blocks.0.wq"]
    assert np.array_equal(back.A.data, ads["blocks.0.wq"].A.data)
    assert back.alpha == 4.0 and back.enabled is False and back.rank == 2
