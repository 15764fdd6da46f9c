"""Image metrics (L1, L2, PSNR, SSIM) and the linear-probe stand-ins for ACC / PDist."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 8
CSV_HEADER = ("metric", "value", "n", "seed")


def _same(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _same(a, b)
    return float(np.abs(a - b).mean())


def l2(a, b) -> float:
    a, b = _same(a, b)
    return float(((a - b) ** 2).mean())


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / mse); identical inputs give +inf."""
    mse = l2(a, b)
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def grayscale(img) -> np.ndarray:
    img = np.asarray(img, np.float64)
    return img @ LUMA if img.ndim == 3 and img.shape[-1] == 3 else img


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all stride-1 uniform ``window`` x ``window`` patches of the grayscale images."""
    a, b = _same(grayscale(a), grayscale(b))
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"SSIM needs 2-D images of at least {window}x{window}, got {a.shape}")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(-1, -2)), wb.mean(axis=(-1, -2))
    va = wa.var(axis=(-1, -2))
    vb = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    return float(s.mean())


@dataclass
class ProbeModel:
    """PCA features (image -> d_p) followed by a multinomial logistic readout (-> K)."""
    mean: np.ndarray
    components: np.ndarray         # d_p x D
    coef: np.ndarray               # K x d_p
    intercept: np.ndarray          # K
    train_accuracy: float = 0.0

    @property
    def classes(self) -> int:
        return self.coef.shape[0]

    def features(self, images) -> np.ndarray:
        x = np.asarray(images, np.float64).reshape(len(images), -1)
        return (x - self.mean) @ self.components.T

    def logits(self, images) -> np.ndarray:
        return self.features(images) @ self.coef.T + self.intercept

    def predict(self, images) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, components=self.components, coef=self.coef,
                 intercept=self.intercept, train_accuracy=self.train_accuracy)

    @classmethod
    def load(cls, path) -> "ProbeModel":
        z = np.load(path)
        return cls(z["mean"], z["components"], z["coef"], z["intercept"], float(z["train_accuracy"]))


def train_probe(images, labels, d_p: int = 32, seed: int = 0, min_accuracy: float = 0.99) -> ProbeModel:
    from sklearn.decomposition import PCA
    from sklearn.linear_model import LogisticRegression

    x = np.asarray(images, np.float64).reshape(len(images), -1)
    pca = PCA(n_components=min(d_p, *x.shape), random_state=seed).fit(x)
    f = pca.transform(x)
    clf = LogisticRegression(max_iter=2000, C=1.0).fit(f, labels)
    probe = ProbeModel(pca.mean_, pca.components_, clf.coef_, clf.intercept_)
    probe.train_accuracy = float((probe.predict(images) == np.asarray(labels)).mean())
    if probe.train_accuracy < min_accuracy:
        raise ContractError(f"probe reached only {probe.train_accuracy:.3f} training accuracy")
    return probe


def probe_metrics(gen_images, refs, probe: ProbeModel | None, labels=None) -> dict[str, float]:
    """acc: fraction of generated images classified as their conditioning class.

    pdist: mean feature-space L2 distance to the paired reference images.
    ``refs`` are reference images; ``labels`` default to the probe's
    predictions on them when omitted.
    """
    if probe is None or probe.train_accuracy <= 0.0:
        raise ContractError("probe metrics need a trained probe")
    gen = np.asarray(gen_images, np.float64)
    out = {}
    if refs is not None:
        refs = np.asarray(refs, np.float64)
        out["pdist"] = float(np.linalg.norm(probe.features(gen) - probe.features(refs), axis=1).mean())
        if labels is None:
            labels = probe.predict(refs)
    out["acc"] = float((probe.predict(gen) == np.asarray(labels)).mean())
    return out


def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (metric, value, n, seed)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for metric, value, n, seed in rows:
            w.writerow([metric, _fmt(value), int(n), int(seed)])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: header {rd.fieldnames} != {CSV_HEADER}")
        return [{"metric": r["metric"], "value": float(r["value"]), "n": int(r["n"]),
                 "seed": int(r["seed"])} for r in rd]


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))
