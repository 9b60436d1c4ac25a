"""FID-style Fréchet distance, SSIM and an output-diversity score.

The Fréchet machinery is exact; what changes at desk scale is the embedding.
Instead of a pretrained Inception network, images are embedded by block
averaging (``downsample_pixels(k)``, the default), a seeded Gaussian random
projection, or precomputed features read from disk. Scores are therefore
comparable only between runs that use the same embedding descriptor.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

NEG_EIG_TOL = 1e-6
COV_RIDGE = 1e-6


class MetricError(ValueError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise MetricError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-10):
            raise MetricError("covariance is not symmetric")
        if self.n_samples < 2:
            raise MetricError("need at least 2 samples")

    @classmethod
    def fit(cls, features: np.ndarray, ridge: float = 0.0) -> "GaussianStats":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise MetricError(f"need a [n>=2, d] feature matrix, got {f.shape}")
        cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
        cov = 0.5 * (cov + cov.T)
        if ridge:
            cov = cov + ridge * np.eye(cov.shape[0])
        return cls(f.mean(axis=0), cov, f.shape[0])


def _psd_sqrt(cov: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -NEG_EIG_TOL:
        raise MetricError(f"{what} has eigenvalue {vals.min():.3g} < -{NEG_EIG_TOL}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken as ``Tr((R S_b R)^(1/2))`` with
    ``R = S_a^(1/2)``; that matrix is symmetric PSD, so a symmetric
    eigendecomposition suffices and the result is real.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    root_a = _psd_sqrt(a.covariance, "first covariance")
    _psd_sqrt(b.covariance, "second covariance")
    inner = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -NEG_EIG_TOL:
        raise MetricError(f"covariance product has eigenvalue {vals.min():.3g}")
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_root
    return float(max(value, 0.0))


# ---------------------------------------------------------------- embeddings

@dataclass(frozen=True)
class Embedding:
    kind: str = "downsample_pixels"
    k: int = 8
    dim: int = 64
    seed: int = 0
    path: str = ""

    @property
    def descriptor(self) -> str:
        if self.kind == "downsample_pixels":
            return f"downsample_pixels({self.k})"
        if self.kind == "random_projection":
            return f"random_projection({self.dim},{self.seed})"
        return f"external_features({self.path})"

    @property
    def output_dim(self) -> int:
        if self.kind == "downsample_pixels":
            return 3 * self.k * self.k
        if self.kind == "random_projection":
            return self.dim
        return read_features(self.path).shape[1]

    @classmethod
    def parse(cls, spec: str) -> "Embedding":
        """Parse ``downsample_pixels(8)``, ``random_projection(64,0)`` or ``external_features(path)``."""
        m = re.fullmatch(r"\s*(\w+)\s*\((.*)\)\s*", spec)
        if not m:
            raise MetricError(f"bad embedding spec {spec!r}")
        kind, args = m.group(1), [a.strip() for a in m.group(2).split(",") if a.strip()]
        if kind == "downsample_pixels":
            return cls(kind, k=int(args[0]) if args else 8)
        if kind == "random_projection":
            return cls(kind, dim=int(args[0]), seed=int(args[1]) if len(args) > 1 else 0)
        if kind == "external_features":
            return cls(kind, path=m.group(2).strip())
        raise MetricError(f"unknown embedding kind {kind!r}")

    def __call__(self, images: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
        if self.kind == "external_features":
            return read_features(self.path)
        x = np.stack([np.asarray(getattr(im, "pixels", im), dtype=np.float64) for im in images])
        if self.kind == "downsample_pixels":
            n, c, h, w = x.shape
            if h % self.k or w % self.k:
                x = ndimage.zoom(x, (1, 1, self.k / h, self.k / w), order=1, grid_mode=True, mode="nearest")
            else:
                x = x.reshape(n, c, self.k, h // self.k, self.k, w // self.k).mean(axis=(3, 5))
            return x.reshape(n, -1)
        if self.kind == "random_projection":
            flat = x.reshape(x.shape[0], -1)
            proj = np.random.default_rng(self.seed).normal(size=(flat.shape[1], self.dim))
            return flat @ proj / np.sqrt(flat.shape[1])
        raise MetricError(f"unknown embedding kind {self.kind!r}")


def read_features(path) -> np.ndarray:
    """Flat little-endian float32 file with a ``<path>.json`` sidecar {count, dim}."""
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    count, dim = int(meta["count"]), int(meta["dim"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != count * dim:
        raise MetricError(f"{path}: expected {count * dim} floats, found {data.size}")
    return data.reshape(count, dim).astype(np.float64)


def write_features(path, features: np.ndarray) -> None:
    f = np.asarray(features, dtype="<f4")
    f.tofile(path)
    Path(str(path) + ".json").write_text(json.dumps({"count": f.shape[0], "dim": f.shape[1]}))


def fid_between_sets(set_a, set_b, emb: Embedding | None = None) -> float:
    """Fréchet distance between embedded image sets (covariances get +1e-6 I)."""
    emb = emb or Embedding()
    fa, fb = emb(set_a), emb(set_b)
    d = fa.shape[1]
    for name, f in (("first", fa), ("second", fb)):
        if f.shape[0] < d + 1:
            raise MetricError(f"{name} set has {f.shape[0]} images; {emb.descriptor} needs >= {d + 1}")
    return frechet_distance(GaussianStats.fit(fa, COV_RIDGE), GaussianStats.fit(fb, COV_RIDGE))


# ---------------------------------------------------------------- SSIM

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    g = np.exp(-((np.arange(size) - size // 2) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.size
    if img.shape[-1] < k or img.shape[-2] < k:
        k = min(img.shape[-2:])
        win = _gaussian_window(k)
    out = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ win
    out = np.lib.stride_tricks.sliding_window_view(out, k, axis=-2) @ win
    return out


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM of two [3,H,W] images in [-1, 1] (mapped to [0, 1]).

    Gaussian-weighted local statistics over valid windows, averaged over
    channels and positions.
    """
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    x, y = (a + 1.0) / 2.0, (b + 1.0) / 2.0
    win = _gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- diversity

def diversity_score(outputs) -> float:
    """Mean over unordered pairs of the mean absolute pixel difference."""
    imgs = [np.asarray(getattr(o, "pixels", o), dtype=np.float64) for o in outputs]
    if len(imgs) < 2:
        raise MetricError("diversity needs at least 2 images")
    flat = np.stack([im.reshape(-1) for im in imgs])
    total = 0.0
    pairs = 0
    for i, j in itertools.combinations(range(len(flat)), 2):
        total += np.abs(flat[i] - flat[j]).mean()
        pairs += 1
    return float(total / pairs)


def evaluate(generated, reference, paired_oracle=None, emb: Embedding | None = None) -> dict:
    """Metric report; SSIM fields appear only when a paired oracle set is given."""
    emb = emb or Embedding()
    report = {
        "fid": fid_between_sets(generated, reference, emb),
        "diversity": diversity_score(generated),
        "embedding_descriptor": emb.descriptor,
        "set_sizes": {"generated": len(generated), "reference": len(reference)},
    }
    if paired_oracle is not None:
        if len(paired_oracle) != len(generated):
            raise MetricError(f"{len(paired_oracle)} oracle images for {len(generated)} generated")
        per = [ssim(g, o) for g, o in zip(generated, paired_oracle)]
        report["ssim_mean"] = float(np.mean(per))
        report["ssim_per_pair"] = per
        report["set_sizes"]["paired_oracle"] = len(paired_oracle)
    return report
