import math

import numpy as np
import pytest

from unineur import tensor as T
from unineur.conditioning import ConditionSet
from unineur.dit import (DiT, DiTConfig, load_checkpoint, save_checkpoint, set_trainable,
                         sigma_embedding, trainable_count)
from unineur.flow import (AdamWState, FlowBatch, clip_grad_norm, euler_sample, fm_loss,
                          fm_loss_from_prediction, make_path, sample_sigma, train_step, warmup_lr)
from unineur.gradcheck import model_check
from unineur.tensor import NumericError, Tensor

TINY = dict(depth=1, d_model=16, heads=2, d_k=8, d_v=8, image_size=4, patch=2, text_len=3, d_text=8,
            d_pooled=4, d_neural=8, eeg_channels=2, eeg_tokens=2, lora_rank=2, mlp_ratio=2)


def tiny(seed=0, **kw):
    return DiT(DiTConfig(**{**TINY, **kw, "seed": seed}))


def wake(model, rng, scale=0.1):
    """Give the zero-initialised modulation and readout layers generic values."""
    for p in model.base.values():
        if not p.data.any():
            p.data = rng.normal(0, scale, p.shape)


def batch_for(model, rng, B=4, mode="text"):
    z0 = rng.normal(size=(B, 4, 4, 3))
    eps = rng.normal(size=z0.shape)
    sigma = rng.uniform(size=B)
    prompts = [f"style {i % 4}" for i in range(B)]
    epochs = rng.normal(size=(B, 2, 16))
    return FlowBatch(z0, eps, sigma, model.assemble(mode, prompts, epochs=epochs))


# ---- path and sigma

def test_make_path_examples():
    rng = np.random.default_rng(0)
    z0, eps = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    assert np.array_equal(make_path(z0, eps, 0.0), z0)
    assert np.array_equal(make_path(z0, eps, 1.0), eps)
    assert make_path(2.0, 4.0, 0.5) == 3.0
    s = np.array([0.0, 1.0])
    out = make_path(z0, eps, s)
    assert np.array_equal(out[0], z0[0]) and np.array_equal(out[1], eps[1])
    with pytest.raises(ValueError):
        make_path(z0, eps, 1.5)
    with pytest.raises(ValueError):
        make_path(z0, eps[:1], 0.5)


def test_path_derivative_is_target():
    rng = np.random.default_rng(1)
    z0, eps = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    h = 1e-6
    d = (make_path(z0, eps, 0.4 + h) - make_path(z0, eps, 0.4 - h)) / (2 * h)
    assert np.abs(d - (eps - z0)).max() < 1e-8


def test_sample_sigma_monte_carlo():
    u = sample_sigma(np.random.default_rng(2), "uniform", 100_000)
    assert abs(u.mean() - 0.5) < 0.01 and u.min() >= 0 and u.max() <= 1
    ln = sample_sigma(np.random.default_rng(3), "logit_normal", 100_000)
    assert abs(np.median(ln) - 0.5) < 0.01
    a = sample_sigma(np.random.default_rng(4), "logit_normal", 10, m=0.3, s=0.7)
    b = sample_sigma(np.random.default_rng(4), "logit_normal", 10, m=0.3, s=0.7)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_sigma(np.random.default_rng(0), "cosine")


# ---- loss

def test_fm_loss_examples():
    rng = np.random.default_rng(5)
    z0, eps = rng.normal(size=(8, 4, 4, 3)), rng.normal(size=(8, 4, 4, 3))
    b = FlowBatch(z0, eps, rng.uniform(size=8), None)
    assert fm_loss_from_prediction(Tensor(eps - z0), b).item() == 0.0
    zero = fm_loss_from_prediction(Tensor(np.zeros_like(z0)), b).item()
    assert zero == pytest.approx(((eps - z0) ** 2).mean(), abs=1e-14)


def test_fm_loss_zero_prediction_closed_form():
    rng = np.random.default_rng(6)
    z0 = rng.normal(0.0, 0.5, (4000, 12))
    eps = rng.normal(size=z0.shape)
    b = FlowBatch(z0, eps, rng.uniform(size=4000), None)
    loss = fm_loss_from_prediction(Tensor(np.zeros_like(z0)), b).item()
    assert loss == pytest.approx(1.0 + 0.25, rel=0.02)


@pytest.mark.parametrize("weighted", [False, True])
def test_fm_loss_gradient_analytic(weighted):
    rng = np.random.default_rng(7)
    z0, eps = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    sigma = rng.uniform(size=3)
    weight = (lambda s: 1.0 + s) if weighted else None
    b = FlowBatch(z0, eps, sigma, None)
    v = Tensor(rng.normal(size=z0.shape), requires_grad=True)
    fm_loss_from_prediction(v, b, weight).backward()
    w = (1.0 + sigma)[:, None, None] if weighted else 1.0
    expect = 2.0 / z0.size * w * (v.data - (eps - z0))
    assert np.abs(v.grad - expect).max() < 1e-9


# ---- model

def test_sigma_embedding():
    e = sigma_embedding(np.array([0.0, 0.5]))
    assert e.shape == (2, 64)
    assert np.array_equal(e[0, :32], np.ones(32)) and np.array_equal(e[0, 32:], np.zeros(32))


def test_forward_shape_all_modes():
    m = tiny()
    rng = np.random.default_rng(8)
    for mode in ("text", "eeg", "text+eeg"):
        b = batch_for(m, rng, 3, mode)
        assert m(b.z_sigma, b.sigma, b.cond).shape == b.z0.shape
    ctx = [rng.normal(size=(2, 4, 4, 3))]
    cond = m.assemble("text+eeg", ["a", "b"], ctx, rng.normal(size=(2, 2, 16)))
    assert m(rng.normal(size=(2, 4, 4, 3)), np.array([0.2, 0.9]), cond).shape == (2, 4, 4, 3)


def test_unconditional_denoiser():
    m = tiny()
    wake(m, np.random.default_rng(9))
    cond = ConditionSet(Tensor(np.zeros((2, 3, 8))), Tensor(np.zeros((2, 4))), [], None, "text")
    v = m.velocity(np.random.default_rng(10).normal(size=(2, 4, 4, 3)), np.array([0.1, 0.9]), cond)
    assert np.isfinite(v).all() and np.abs(v).max() > 0


def test_model_gradcheck_depth1():
    for mode in ("text", "text+eeg"):
        assert model_check(0, mode=mode) < 1e-5


def test_zero_b_lora_toggle_leaves_output_unchanged():
    m = tiny()
    rng = np.random.default_rng(11)
    wake(m, rng)
    b = batch_for(m, rng, 2, "text+eeg")
    with_lora = m.velocity(b.z_sigma, b.sigma, b.cond)
    saved = [ap.lora for ap in m.attn]
    for ap in m.attn:
        ap.lora = {}
    without = m.velocity(b.z_sigma, b.sigma, b.cond)
    for ap, lo in zip(m.attn, saved):
        ap.lora = lo
    assert np.abs(with_lora - without).max() < 1e-12


def test_trainable_sets_and_count():
    m = tiny()
    set_trainable(m, "adapter")
    cfg = m.config
    dm, hk, hv = cfg.d_model, cfg.heads * cfg.d_k, cfg.heads * cfg.d_v
    r = cfg.lora_rank
    lora = cfg.depth * r * ((dm + hk) * 2 + (dm + hv) + (hv + dm))
    neural = sum(p.data.size for p in m.neural.values())
    assert trainable_count(m) == lora + neural
    assert not any(p.requires_grad for p in m.base.values())
    set_trainable(m, "base")
    assert all(p.requires_grad for p in m.base.values())
    assert not any(p.requires_grad for p in m.lora.values())


def test_frozen_weights_unchanged_after_100_steps():
    m = tiny()
    rng = np.random.default_rng(12)
    wake(m, rng)
    set_trainable(m, "adapter")
    before = {k: v.data.copy() for k, v in m.base.items()}
    lora0 = {k: v.data.copy() for k, v in m.lora.items()}
    opt = None
    for step in range(100):
        mode = ("eeg", "text+eeg")[step % 2]
        _, opt = train_step(m, batch_for(m, np.random.default_rng([12, step]), 4, mode), opt, 1e-3)
    for k, v in m.base.items():
        assert np.array_equal(v.data, before[k]), k
    assert any(not np.array_equal(v.data, lora0[k]) for k, v in m.lora.items())


def test_adapter_A_moves_after_B_leaves_zero():
    m = tiny()
    rng = np.random.default_rng(13)
    wake(m, rng)
    set_trainable(m, "adapter")
    A = m.lora["lora.blocks.0.wq.A"]
    B = m.lora["lora.blocks.0.wq.B"]
    A0, lr, wd = A.data.copy(), 1e-3, 1e-2
    _, opt = train_step(m, batch_for(m, rng, 4, "eeg"), None, lr)
    assert np.abs(B.data).max() > 0
    assert np.array_equal(A.data, A0 * (1 - lr * wd))      # zero gradient while B = 0
    _, opt = train_step(m, batch_for(m, rng, 4, "eeg"), opt, lr)
    assert np.abs(A.data - A0 * (1 - lr * wd) ** 2).max() > 1e-8


def test_disabling_trained_adapter_restores_base():
    m = tiny()
    rng = np.random.default_rng(14)
    wake(m, rng)
    b = batch_for(m, rng, 2, "text")
    base_out = m.velocity(b.z_sigma, b.sigma, b.cond)
    set_trainable(m, "adapter")
    opt = None
    for step in range(5):
        _, opt = train_step(m, batch_for(m, np.random.default_rng([14, step]), 4, "text+eeg"), opt, 1e-2)
    assert any(np.abs(v.data).max() > 0 for k, v in m.lora.items() if k.endswith(".B"))
    assert np.array_equal(m.velocity(b.z_sigma, b.sigma, b.cond), base_out)


def test_lr_zero_updates_only_moments():
    m = tiny()
    set_trainable(m, "base")
    before = {k: v.data.copy() for k, v in m.trainable().items()}
    _, opt = train_step(m, batch_for(m, np.random.default_rng(15), 4), None, 0.0)
    assert opt.t == 1 and any(np.abs(v).max() > 0 for v in opt.m.values())
    for k, v in m.trainable().items():
        assert np.array_equal(v.data, before[k])


def test_nan_loss_aborts():
    m = tiny()
    set_trainable(m, "base")
    b = batch_for(m, np.random.default_rng(16), 2)
    b.z0[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train_step(m, b, None, 1e-3)


def test_clip_grad_norm():
    g = {"a": np.full(4, 3.0), "b": np.full(4, 4.0)}
    n = clip_grad_norm(g, 1.0)
    assert n == pytest.approx(10.0)
    assert math.sqrt(sum((v ** 2).sum() for v in g.values())) == pytest.approx(1.0)
    g = {"a": np.full(4, 0.1)}
    clip_grad_norm(g, 1.0)
    assert np.array_equal(g["a"], np.full(4, 0.1))


def test_warmup_schedule():
    assert warmup_lr(0, 2000, 1e-3) == pytest.approx(1e-3 / 100)
    assert warmup_lr(99, 2000, 1e-3) == 1e-3
    assert warmup_lr(1500, 2000, 1e-3) == 1e-3


def test_fixed_batch_loss_decreases_monotonically():
    good = 0
    for seed in range(20):
        m = tiny(seed)
        set_trainable(m, "base")
        b = batch_for(m, np.random.default_rng([seed, 1]), 32)
        losses, opt = [], None
        for step in range(21):
            loss, opt = train_step(m, b, opt, warmup_lr(step, 21, 1e-3))
            losses.append(loss)
        good += all(x > y for x, y in zip(losses, losses[1:]))
    assert good >= 18


def test_training_trajectory_deterministic():
    def run():
        m = tiny(3)
        set_trainable(m, "base")
        opt, out = None, []
        for step in range(5):
            loss, opt = train_step(m, batch_for(m, np.random.default_rng([3, step]), 4), opt, 1e-3)
            out.append(loss)
        return out, {k: v.data for k, v in m.named_parameters().items()}
    (l1, p1), (l2, p2) = run(), run()
    assert l1 == l2
    for k in p1:
        assert np.array_equal(p1[k], p2[k])


# ---- sampling

def test_euler_perfect_oracle():
    rng = np.random.default_rng(17)
    z0, eps = rng.normal(size=(3, 4, 4, 3)), rng.normal(size=(3, 4, 4, 3))
    oracle = lambda z, s, c: eps - z0
    for steps in (1, 2, 7, 32, 64):
        assert np.abs(euler_sample(oracle, None, steps, eps) - z0).max() < 1e-12
    assert np.abs(euler_sample(oracle, None, 16, eps) - euler_sample(oracle, None, 32, eps)).max() < 1e-12
    with pytest.raises(ValueError):
        euler_sample(oracle, None, 0, eps)


def test_euler_sigma_grid_descends():
    seen = []
    euler_sample(lambda z, s, c: seen.append(s[0]) or np.zeros_like(z), None, 4, np.zeros((1, 2)))
    assert seen == [1.0, 0.75, 0.5, 0.25]


# ---- checkpoints

def test_checkpoint_round_trip(tmp_path):
    m = tiny(5)
    rng = np.random.default_rng(18)
    wake(m, rng)
    set_trainable(m, "adapter")
    _, opt = train_step(m, batch_for(m, rng, 4, "eeg"), None, 1e-2)
    save_checkpoint(m, tmp_path / "ck", 7, opt, {"note": "x"})
    for name in ("config.json", "step.txt", "blocks.0.attn.wq", "lora.blocks.0.wq.A",
                 "neural.conv0.w", "opt.json", "meta.json"):
        assert (tmp_path / "ck" / name).exists(), name
    m2, step, opt2 = load_checkpoint(tmp_path / "ck", with_opt=True)
    assert step == 7 and opt2.t == opt.t
    for k in opt.m:
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])
    for mode in ("text", "eeg", "text+eeg"):
        b = batch_for(m, np.random.default_rng(19), 2, mode)
        b2 = batch_for(m2, np.random.default_rng(19), 2, mode)
        assert np.array_equal(m.velocity(b.z_sigma, b.sigma, b.cond), m2.velocity(b2.z_sigma, b2.sigma, b2.cond))


def test_adamw_state_save_load(tmp_path):
    st = AdamWState({"w": np.arange(3.0)}, {"w": np.ones(3)}, 4)
    st.save(tmp_path)
    back = AdamWState.load(tmp_path)
    assert back.t == 4 and np.array_equal(back.m["w"], st.m["w"])


def test_config_round_trip():
    cfg = DiTConfig(**TINY, axis_split=(2, 2, 4))
    assert DiTConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        DiTConfig(image_size=15, patch=2)
