"""Command line entry point: ``unineur <command> [flags] [--key value ...]``.

Exit codes: 0 ok, 1 usage or contract error, 2 numeric failure, 3 IO.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import eeg, harness
from .conditioning import MODES
from .tensor import ContractError, DimensionError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _pairs(extra: list[str]) -> list[tuple[str, str]]:
    """``--key value`` pairs left over after the named flags."""
    if len(extra) % 2 or any(not k.startswith("--") for k in extra[::2]):
        raise UsageError(f"overrides must be --key value pairs, got {extra}")
    return [(k[2:], v) for k, v in zip(extra[::2], extra[1::2])]


def _config(path, defaults: dict, extra, nested="model") -> dict:
    d = dict(defaults)
    if path:
        loaded = json.loads(Path(path).read_text())
        d = harness.apply_overrides(d, [(k, json.dumps(v)) for k, v in _flatten(loaded)], nested=None)
    return harness.apply_overrides(d, _pairs(extra), nested=nested)


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict) and v:
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unineur", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic paired image/EEG dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")

    s = sub.add_parser("preprocess", help="band-pass, notch, epoch and z-score a recording")
    s.add_argument("--input", required=True, help="recording manifest (JSON)")
    s.add_argument("--out", required=True)
    s.add_argument("--config")

    s = sub.add_parser("train", help="train the denoiser (base then adapter stage)")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", choices=harness.RUN_MODES)
    s.add_argument("--mask-mode", choices=("literal", "hub"))
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("sample", help="Euler-sample images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", action="append", choices=MODES,
                   help="repeatable; default all three modes")
    s.add_argument("--n", type=int, default=4, help="images per class")
    s.add_argument("--steps", type=int, default=32, help="Euler steps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test")
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("eval", help="paired metrics and probe scores for sampled images")
    s.add_argument("--gen", required=True, help="sample directory with manifest.json")
    s.add_argument("--ref", help="dataset root (default: taken from the manifest)")
    s.add_argument("--probe", help="probe .npz; trained on the dataset if missing")
    s.add_argument("--out")
    s.add_argument("--no-noise-baseline", action="store_true")
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("mask", help="print the mutual attention mask for a layout")
    s.add_argument("layout", help="e.g. x:4,y1:4,e:2,txt:3")
    s.add_argument("--mask-mode", choices=("literal", "hub"), default="hub")
    s.add_argument("--out")

    s = sub.add_parser("gradcheck", help="run the gradient-check suite")
    s.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------- commands

def cmd_synth(a, extra) -> int:
    from .synth import SynthSpec, gen_synthetic
    spec = SynthSpec.from_dict(_config(a.config, SynthSpec().to_dict(), extra, nested=None))
    out = gen_synthetic(spec, a.out, a.seed)
    print(f"dataset written to {out}")
    return EXIT_OK


PREPROCESS_DEFAULTS = {"band": [1.0, 80.0], "notch_band": [48.0, 52.0], "window_s": 0.5,
                       "center_offset_s": 0.25, "latency_s": 0.0}


def cmd_preprocess(a, extra) -> int:
    c = _config(a.config, PREPROCESS_DEFAULTS, extra, nested=None)
    rec = eeg.read_recording(a.input)
    eps = eeg.preprocess(rec, tuple(c["band"]), tuple(c["notch_band"]), c["window_s"],
                         c["center_offset_s"], c["latency_s"])
    out = Path(a.out)
    eeg.write_epochs(list(eps), out)
    with open(out / "features.csv", "w") as fh:
        fh.write("epoch,label,attention_index\n")
        for i, ep in enumerate(eps):
            fh.write(f"{i},{ep.label},{eeg.attention_index(ep)!r}\n")
    print(f"{len(eps)} epochs written to {out} ({eps.skipped} skipped)")
    return EXIT_OK


def cmd_train(a, extra) -> int:
    if a.resume:
        meta = json.loads((Path(a.resume) / "meta.json").read_text())
        base = meta["run"]
    else:
        base = harness.RunConfig().to_dict()
    d = _config(a.config, base, extra)
    for key in ("data", "out", "seed", "steps", "mode"):
        if getattr(a, key) is not None:
            d[key] = getattr(a, key)
    if a.mask_mode:
        d["model"]["mask_mode"] = a.mask_mode
    cfg = harness.RunConfig.from_dict(d)
    if not cfg.data:
        raise UsageError("train needs --data (or data in the config)")
    summary = harness.train(cfg, resume=a.resume, figures=not a.no_figures)
    print(json.dumps({k: summary[k] for k in ("initial_eval", "final_eval", "loss_ratio")
                      if k in summary}, sort_keys=True))
    return EXIT_OK


def cmd_sample(a, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    m = harness.sample(a.checkpoint, a.data, a.mode or list(MODES), a.n, a.steps, a.seed, a.out,
                       split=a.split, figures=not a.no_figures)
    print(f"{len(m['rows'])} images written to {a.out}")
    return EXIT_OK


def cmd_eval(a, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    rows = harness.evaluate(a.gen, a.ref, a.probe, a.out, noise_baseline=not a.no_noise_baseline,
                            figures=not a.no_figures)
    for metric, value, n, seed in rows:
        print(f"{metric:16s} {value:10.4f}  n={n}")
    return EXIT_OK


def cmd_mask(a, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    try:
        text = harness.mask_dump(a.layout, a.mask_mode)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(a, extra) -> int:
    from .gradcheck import MODEL_TOLERANCE, OP_TOLERANCE, run_suite
    ok, report = run_suite(a.seed)
    for name, err in report.items():
        tol = MODEL_TOLERANCE if name == "denoiser_depth1" else OP_TOLERANCE
        print(f"{name:18s} {err:.3e}  {'ok' if err < tol else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "sample": cmd_sample, "eval": cmd_eval, "mask": cmd_mask, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[a.command](a, extra)
    except (UsageError, ContractError, DimensionError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
