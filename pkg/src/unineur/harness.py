"""Experiment orchestration: run configs, training, sampling, evaluation, mask dumps.

Training runs in two stages.  The ``base`` stage fits the whole backbone in
text mode (standing in for a pretrained text-to-image model); the
``adapter`` stage then freezes it and fits only the LoRA and neural-branch
tensors on EEG-conditioned modes.  Every step draws its batch from
``default_rng([seed, step])`` so a resumed run replays exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attention import MASK_MODES, build_mutual_mask, mask_to_text
from .conditioning import MODES
from .dit import DiT, DiTConfig, load_checkpoint, save_checkpoint, set_trainable
from .flow import FlowBatch, euler_sample, fm_loss, sample_sigma, train_step, warmup_lr
from .metrics import (ProbeModel, l1, l2, probe_metrics, psnr, ssim, train_probe,
                      write_metrics_csv)
from .ppm import read_ppm, write_ppm
from .synth import from_latent, load_dataset, to_latent
from .tensor import ContractError, NumericError, no_grad

log = logging.getLogger(__name__)

RUN_MODES = (*MODES, "all")
ADAPTER_MODES = {"eeg": ["eeg"], "text+eeg": ["text+eeg"], "all": ["eeg", "text+eeg"]}
EVAL_SEED = 0xE7A1
NOISE_SEED = 0x5A


def mode_dir(mode: str) -> str:
    return mode.replace("+", "_")


@dataclass
class RunConfig:
    model: DiTConfig = field(default_factory=DiTConfig)
    mode: str = "all"                  # text | eeg | text+eeg | all (= eeg and text+eeg)
    data: str = ""
    out: str = "run"
    steps: int = 2000
    base_steps: int = 1000             # leading text-mode backbone steps (ignored for mode=text)
    lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    sigma_schedule: str = "uniform"
    checkpoint_every: int = 500
    eval_batch: int = 64
    init: str = ""                     # optional checkpoint to start from

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DiTConfig.from_dict(self.model)
        if self.mode not in RUN_MODES:
            raise ValueError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if self.steps < 0 or self.base_steps < 0 or self.batch < 1:
            raise ValueError("steps and base_steps must be >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown run config keys: {sorted(extra)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # schedule ----------------------------------------------------------------

    @property
    def n_base(self) -> int:
        return self.steps if self.mode == "text" else min(self.base_steps, self.steps)

    def stage_at(self, step: int) -> tuple[str, int, int]:
        """(stage, first step of the stage, stage length) for a global step."""
        nb = self.n_base
        return ("base", 0, nb) if step < nb else ("adapter", nb, self.steps - nb)

    def mode_at(self, step: int) -> str:
        stage, start, _ = self.stage_at(step)
        if stage == "base":
            return "text"
        seq = ADAPTER_MODES[self.mode]
        return seq[(step - start) % len(seq)]

    @property
    def eval_modes(self) -> list[str]:
        return ["text"] if self.mode == "text" else ["text", *ADAPTER_MODES[self.mode]]


def parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def apply_overrides(d: dict, pairs: list[tuple[str, str]], nested: str | None = "model") -> dict:
    """Apply ``--key value`` overrides; dotted keys descend, unknown flat keys try ``nested``."""
    d = json.loads(json.dumps(d))
    for key, raw in pairs:
        key = key.replace("-", "_")
        path = key.split(".")
        if len(path) == 1 and key not in d and nested and isinstance(d.get(nested), dict) \
                and key in d[nested]:
            path = [nested, key]
        node = d
        for p in path[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[p]
        if path[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[path[-1]] = parse_value(raw)
    return d


# ---------------------------------------------------------------- training

def _batch(model: DiT, data, idx, rng, mode, sigma_schedule) -> FlowBatch:
    z0 = to_latent(data.images[idx])
    eps = rng.standard_normal(z0.shape)
    sigma = sample_sigma(rng, sigma_schedule, size=len(idx))
    prompts = [data.rows[i]["prompt"] for i in idx]
    cond = model.assemble(mode, prompts, epochs=data.epochs[idx] if mode != "text" else None)
    return FlowBatch(z0, eps, sigma, cond)


def eval_loss(model: DiT, data, cfg: RunConfig, modes=None) -> dict[str, float]:
    """Flow-matching loss on one fixed batch (fixed rows, noise and sigma) per mode."""
    rng = np.random.default_rng([cfg.seed, EVAL_SEED])
    n = min(cfg.eval_batch, len(data.labels))
    idx = np.sort(rng.choice(len(data.labels), n, replace=False))
    eps = rng.standard_normal((n, *data.images.shape[1:]))
    sigma = rng.uniform(0.0, 1.0, n)
    out = {}
    with no_grad():
        for mode in modes or cfg.eval_modes:
            prompts = [data.rows[i]["prompt"] for i in idx]
            cond = model.assemble(mode, prompts, epochs=data.epochs[idx] if mode != "text" else None)
            out[mode] = fm_loss(FlowBatch(to_latent(data.images[idx]), eps, sigma, cond), model).item()
    return out


def _ckpt(model, path, step, opt, cfg):
    save_checkpoint(model, path, step, opt, {"run": cfg.to_dict()})


def _read_loss_rows(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if int(r[0]) < upto]


LOSS_HEADER = ["step", "stage", "mode", "lr", "loss"]
EVAL_HEADER = ["step", "mode", "loss"]


def train(cfg: RunConfig, resume: str | None = None, figures: bool = True) -> dict:
    """Run (or resume) a training job; returns the summary also written to summary.json."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run.json")
    data = load_dataset(cfg.data).split("train")
    opt, start = None, 0
    if resume:
        model, start, opt = load_checkpoint(resume, with_opt=True)
    elif cfg.init:
        model, _ = load_checkpoint(cfg.init)
    else:
        model = DiT(replace(cfg.model, seed=cfg.seed))
    if model.config.eeg_channels != data.epochs.shape[1] and cfg.mode != "text":
        raise ContractError(f"model expects {model.config.eeg_channels} EEG channels, "
                            f"dataset has {data.epochs.shape[1]}")

    loss_path, eval_path = out / "loss.csv", out / "eval.csv"
    loss_rows = _read_loss_rows(loss_path, start)
    eval_rows = _read_loss_rows(eval_path, start + 1) if resume else []
    lf = open(loss_path, "w", newline="")
    ef = open(eval_path, "w", newline="")
    lw, ew = csv.writer(lf, lineterminator="\n"), csv.writer(ef, lineterminator="\n")
    lw.writerow(LOSS_HEADER)
    lw.writerows(loss_rows)
    ew.writerow(EVAL_HEADER)
    ew.writerows(eval_rows)

    def record_eval(step):
        res = eval_loss(model, data, cfg)
        for m, v in res.items():
            ew.writerow([step, m, repr(v)])
        ef.flush()
        return res

    summary = {"status": "ok", "start_step": start, "steps": cfg.steps}
    if not resume:
        summary["initial_eval"] = record_eval(0)
    else:
        prev = out / "summary.json"
        if prev.exists():
            summary["initial_eval"] = json.loads(prev.read_text()).get("initial_eval")
    t0 = time.time()
    stage_now = None
    try:
        for step in range(start, cfg.steps):
            stage, s0, n = cfg.stage_at(step)
            if stage != stage_now:
                set_trainable(model, stage)
                stage_now = stage
                if step == s0:
                    opt = None
            mode = cfg.mode_at(step)
            rng = np.random.default_rng([cfg.seed, step])
            idx = rng.integers(0, len(data.labels), cfg.batch)
            batch = _batch(model, data, idx, rng, mode, cfg.sigma_schedule)
            lr = warmup_lr(step - s0, n, cfg.lr)
            loss, opt = train_step(model, batch, opt, lr)
            lw.writerow([step, stage, mode, repr(lr), repr(loss)])
            lf.flush()
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                _ckpt(model, out / "checkpoints" / f"step_{done:06d}", done, opt, cfg)
                record_eval(done)
            if step % 100 == 0:
                log.info("step %d %s %s loss %.4f", step, stage, mode, loss)
    except NumericError as e:
        summary.update(status="nan", error=str(e), failed_step=step)
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        raise
    finally:
        lf.close()
        ef.close()

    ef = open(eval_path, "a", newline="")
    ew = csv.writer(ef, lineterminator="\n")
    summary["final_eval"] = record_eval(cfg.steps)
    ef.close()
    _ckpt(model, out / "final", cfg.steps, opt, cfg)
    init = summary.get("initial_eval") or {}
    fin = summary["final_eval"]
    if init:
        common = [m for m in fin if m in init]
        summary["loss_ratio"] = float(np.mean([fin[m] for m in common]) / np.mean([init[m] for m in common]))
    summary["train_seconds"] = round(time.time() - t0, 2)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    if figures:
        from .report import plot_loss
        plot_loss(loss_path, eval_path, out / "loss.png")
    return summary


# ---------------------------------------------------------------- sampling

def select_rows(data, n: int) -> np.ndarray:
    """First ``n`` rows of every class, class-major."""
    picks = []
    for k in range(data.spec.classes):
        rows = np.where(data.labels == k)[0][:n]
        if len(rows) < n:
            raise ContractError(f"class {k} has only {len(rows)} rows, {n} requested")
        picks.append(rows)
    return np.concatenate(picks)


def sample(checkpoint, data_dir, modes, n: int, steps: int, seed: int, out,
           split: str = "test", chunk: int = 64, figures: bool = True) -> dict:
    """Write ``n`` images per class and mode plus manifest.json in ``out``.

    All modes share one noise draw so they differ only by their conditioning.
    """
    model, _ = load_checkpoint(checkpoint)
    data = load_dataset(data_dir).split(split)
    sel = select_rows(data, n)
    out = Path(out)
    shape = (len(sel), model.config.image_size, model.config.image_size, model.config.channels)
    eps = np.random.default_rng([seed, NOISE_SEED]).standard_normal(shape)
    manifest = {"seed": seed, "steps": steps, "n": n, "split": split,
                "data": str(Path(data_dir).resolve()), "rows": []}
    grids = {}
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode != "text":
            missing = [data.rows[i]["index"] for i in sel if not data.rows[i].get("epoch")]
            if missing:
                raise ContractError(f"mode {mode!r} needs EEG epochs; rows {missing[:5]} have none")
        imgs = []
        for a in range(0, len(sel), chunk):
            idx = sel[a:a + chunk]
            cond = model.assemble(mode, [data.rows[i]["prompt"] for i in idx],
                                  epochs=data.epochs[idx] if mode != "text" else None)
            imgs.append(from_latent(euler_sample(model.velocity, cond, steps, eps[a:a + chunk])))
        imgs = np.concatenate(imgs)
        d = out / mode_dir(mode)
        d.mkdir(parents=True, exist_ok=True)
        per_class: dict[int, int] = {}
        for img, i in zip(imgs, sel):
            row = data.rows[i]
            k = int(row["label"])
            j = per_class.get(k, 0)
            per_class[k] = j + 1
            name = f"{mode_dir(mode)}/{k}_{j:03d}.ppm"
            write_ppm(out / name, img)
            manifest["rows"].append({"mode": mode, "file": name, "label": k, "prompt": row["prompt"],
                                     "ref": row["image"], "epoch": row.get("epoch")})
        grids[mode] = imgs
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if figures:
        from .report import plot_samples
        plot_samples(grids, data.spec.classes, n, out / "samples.png")
    return manifest


# ---------------------------------------------------------------- evaluation

def load_or_train_probe(probe_path, data_dir, seed: int = 0) -> ProbeModel:
    if probe_path and Path(probe_path).exists():
        return ProbeModel.load(probe_path)
    tr = load_dataset(data_dir).split("train")
    probe = train_probe(tr.images, tr.labels, seed=seed)
    if probe_path:
        probe.save(probe_path)
    return probe


def _mean(xs):
    return math.inf if any(math.isinf(x) for x in xs) else float(np.mean(xs))


def evaluate(gen_dir, ref_dir=None, probe_path=None, out=None, noise_baseline: bool = True,
             figures: bool = True) -> list[tuple]:
    """Paired metrics per mode; returns the CSV rows (metric, value, n, seed)."""
    gen_dir = Path(gen_dir)
    manifest = json.loads((gen_dir / "manifest.json").read_text())
    ref_dir = Path(ref_dir or manifest["data"])
    seed = int(manifest.get("seed", 0))
    out = Path(out or gen_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe_file = probe_path or out / "probe.npz"
    probe = load_or_train_probe(probe_file, ref_dir)

    by_mode: dict[str, list] = {}
    unpaired = []
    for r in manifest["rows"]:
        g, ref = gen_dir / r["file"], ref_dir / r["ref"] if r.get("ref") else None
        if ref is None or not g.exists() or not ref.exists():
            unpaired.append(r["file"])
            continue
        by_mode.setdefault(r["mode"], []).append((read_ppm(g), read_ppm(ref), int(r["label"])))
    if unpaired:
        log.warning("%d unpaired rows skipped", len(unpaired))
        (out / "unpaired.txt").write_text("\n".join(unpaired) + "\n")

    if noise_baseline and by_mode:
        first = next(iter(by_mode.values()))
        rng = np.random.default_rng([seed, NOISE_SEED, 1])
        by_mode["noise"] = [(rng.uniform(0.0, 1.0, ref.shape), ref, k) for _, ref, k in first]

    rows = []
    for mode, pairs in by_mode.items():
        gen = np.stack([p[0] for p in pairs])
        refs = np.stack([p[1] for p in pairs])
        labels = np.array([p[2] for p in pairs])
        n = len(pairs)
        pm = probe_metrics(gen, refs, probe, labels)
        vals = {"l1": _mean([l1(a, b) for a, b in zip(gen, refs)]),
                "l2": _mean([l2(a, b) for a, b in zip(gen, refs)]),
                "psnr": _mean([psnr(a, b) for a, b in zip(gen, refs)]),
                "ssim": _mean([ssim(a, b) for a, b in zip(gen, refs)]),
                "acc": pm["acc"], "pdist": pm["pdist"]}
        rows.extend((f"{mode}.{k}", v, n, seed) for k, v in vals.items())
    write_metrics_csv(out / "metrics.csv", rows)
    if figures and rows:
        from .report import plot_metrics
        plot_metrics(rows, out / "metrics.png")
    return rows


# ---------------------------------------------------------------- mask dump

def parse_layout(layout: str) -> dict[str, int]:
    """``x:4,y1:4,e:2,txt:3`` -> ordered block lengths; malformed strings raise ValueError."""
    blocks: dict[str, int] = {}
    if not layout or not layout.strip():
        raise ValueError("empty layout")
    for part in layout.split(","):
        name, sep, n = part.strip().partition(":")
        if not sep or not name or not n.strip().isdigit() or int(n) < 1:
            raise ValueError(f"malformed layout entry {part!r}; expected name:length")
        if name in blocks:
            raise ValueError(f"duplicate block {name!r}")
        blocks[name] = int(n)
    if "x" not in blocks:
        raise ValueError("layout needs a target block 'x'")
    for name in blocks:
        if name not in ("x", "e", "txt") and not (name[0] == "y" and name[1:].isdigit()):
            raise ValueError(f"unknown block name {name!r}; use x, y<i>, e, txt")
    return blocks


def mask_dump(layout: str, mode: str = "hub") -> str:
    if mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}")
    blocks = parse_layout(layout)
    sets, pos = {}, 0
    for name, n in blocks.items():
        sets[name] = np.arange(pos, pos + n)
        pos += n
    return mask_to_text(build_mutual_mask(sets, mode, pos))
