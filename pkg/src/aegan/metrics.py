"""Evaluation suite: Frechet distance, Inception Score and MS-SSIM.

Feature extraction is pluggable.  At desk scale the default extractor is a
small convolutional classifier trained on the synthetic dataset's labels, so
FID and IS values are internally consistent but not comparable with numbers
produced by a pretrained Inception network.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol

import numpy as np

from . import functional as F
from .nn import Conv2d, Linear, Module
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

REPORT_HEADER = (
    "FID/IS use the configured feature extractor; values are comparable only between runs sharing that extractor."
)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


# -- Gaussian statistics and FID ---------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased (N - 1) covariance of an N x d feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"features must be an N x d matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"covariance needs at least 2 samples, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T), x.shape[0])


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Tr((S_a S_b)^(1/2)) is evaluated as the sum of square roots of the
    eigenvalues of the symmetric matrix S_a^(1/2) S_b S_a^(1/2), which has the
    same spectrum as S_a S_b.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _sqrtm_psd(a.covariance)
    middle = root_a @ b.covariance @ root_a
    eig = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    cross = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    value = float(diff @ diff) + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * cross
    if value < 0.0:
        if value < -1e-6:
            log.warning("frechet distance clamped from %.3g to 0", value)
        value = 0.0
    return value


# -- Inception Score ---------------------------------------------------------------


def _check_probabilities(probs: np.ndarray, atol: float = 1e-5) -> None:
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"probabilities must be a non-empty N x K matrix, got shape {probs.shape}")
    if not np.all(np.isfinite(probs)) or probs.min() < 0:
        raise ValueError("probabilities must be finite and non-negative")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise ValueError(f"{bad.size} probability rows do not sum to 1 (first: row {bad[0]} sums to {sums[bad[0]]})")


def split_bounds(n: int, splits: int) -> list[tuple[int, int]]:
    """Equal contiguous splits; the last one absorbs the remainder."""
    if splits < 1 or splits > n:
        raise ValueError(f"cannot form {splits} splits from {n} rows")
    size = n // splits
    return [(i * size, n if i == splits - 1 else (i + 1) * size) for i in range(splits)]


def inception_score_splits(probs, splits: int = 10) -> np.ndarray:
    """Per-split exp(E_x KL(p(y|x) || p(y)))."""
    p = np.asarray(probs, dtype=np.float64)
    _check_probabilities(p)
    scores = []
    for lo, hi in split_bounds(len(p), splits):
        part = p[lo:hi]
        # exactly rounded column sums keep identical rows exactly equal to their marginal
        marginal = np.array([math.fsum(col) for col in part.T]) / len(part)
        # extended precision so exp(log K) rounds back to exactly K
        wide = part.astype(np.longdouble)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(wide > 0, wide * (np.log(wide) - np.log(marginal.astype(np.longdouble))), 0.0)
        scores.append(float(np.exp(terms.sum(axis=1).mean())))
    return np.asarray(scores)


def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """(mean, population std) of the per-split scores."""
    scores = inception_score_splits(probs, splits)
    return float(scores.mean()), float(scores.std())


# -- MS-SSIM ---------------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-d Gaussian taps; the 2-d window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    k = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ taps


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def min_extent(scales: int, window: int = SSIM_WINDOW) -> int:
    return 2 ** (scales - 1) * window


def _weights_for(scales: int, weights) -> np.ndarray:
    if weights is None:
        if scales > len(MS_SSIM_WEIGHTS):
            raise ValueError(f"no default weights for {scales} scales")
        w = np.asarray(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
        return w / w.sum()
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != scales:
        raise ValueError(f"{len(w)} weights given for {scales} scales")
    return w


def ms_ssim_raw(a, b, scales: int = 5, data_range: float = 2.0, weights=None) -> np.ndarray:
    """Unclamped MS-SSIM for image batches.

    ``a`` and ``b`` are (..., C, H, W) or (H, W) arrays; the result has the
    leading batch shape.  Contrast-structure terms are taken at every scale and
    the luminance term at the coarsest, each averaged over pixels and channels,
    then combined as prod(|term_j| ** w_j).  If any term is negative the
    product is negated, so the raw value can fall below zero.  With ``scales`` below 5 the default weights
    are the first ``scales`` published exponents renormalized to sum to one.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ms_ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ValueError("ms_ssim needs at least 2-d images")
    need = min_extent(scales)
    if min(a.shape[-2:]) < need:
        raise ValueError(f"images of extent {a.shape[-2:]} too small for {scales} scales; need at least {need}")
    w = _weights_for(scales, weights)
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    planar = a.ndim == 2
    if planar:
        a, b = a[None], b[None]
    reduce_axes = tuple(range(-3, 0)) if not planar else (-2, -1)
    magnitude = np.ones(a.shape[:-3] if not planar else (), dtype=np.float64)
    negative = np.zeros(magnitude.shape, dtype=bool)
    for j in range(scales):
        mu_a = _filter_valid(a, taps)
        mu_b = _filter_valid(b, taps)
        var_a = _filter_valid(a * a, taps) - mu_a**2
        var_b = _filter_valid(b * b, taps) - mu_b**2
        cov = _filter_valid(a * b, taps) - mu_a * mu_b
        cs_map = (2 * cov + c2) / (var_a + var_b + c2)
        if j == scales - 1:
            lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
            term = (lum * cs_map).mean(axis=reduce_axes)
        else:
            term = cs_map.mean(axis=reduce_axes)
            a, b = _avg_pool2(a), _avg_pool2(b)
        magnitude = magnitude * np.abs(term) ** w[j]
        negative |= term < 0
    return np.where(negative, -magnitude, magnitude)


def ms_ssim(a, b, scales: int = 5, data_range: float = 2.0, weights=None) -> float:
    """MS-SSIM of two images clamped to [0, 1]; 1.0 for identical inputs."""
    return float(np.clip(ms_ssim_raw(a, b, scales, data_range, weights), 0.0, 1.0))


def random_pairs(n: int, count: int, seed: int) -> np.ndarray:
    """``count`` index pairs (i, j), i != j, drawn uniformly from ``n`` items."""
    if n < 2:
        raise ValueError("need at least 2 images to form pairs")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, n, size=count)
    second = (first + rng.integers(1, n, size=count)) % n
    return np.stack([first, second], axis=1)


def pairwise_ms_ssim(images, pairs: np.ndarray, scales: int = 5, chunk: int = 64) -> np.ndarray:
    """Raw MS-SSIM for each listed pair."""
    images = np.asarray(images)
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), chunk):
        p = pairs[start : start + chunk]
        out[start : start + len(p)] = ms_ssim_raw(images[p[:, 0]], images[p[:, 1]], scales)
    return out


def ms_ssim_convergence(images, pair_counts: Iterable[int], seed: int = 0, scales: int = 5, tolerance: float = 0.005):
    """Running MS-SSIM mean over nested random pair sets.

    Returns (counts, estimates, stable_at): ``stable_at`` is the smallest count
    from which every later estimate stays within ``tolerance`` of the final one.
    """
    counts = sorted(set(int(c) for c in pair_counts))
    values = np.clip(pairwise_ms_ssim(images, random_pairs(len(images), counts[-1], seed), scales), 0.0, 1.0)
    estimates = np.array([values[:c].mean() for c in counts])
    within = np.abs(estimates - estimates[-1]) <= tolerance
    stable = counts[-1]
    for c, ok in zip(reversed(counts), reversed(within)):
        if not ok:
            break
        stable = c
    return counts, estimates, stable


# -- image-statistics helpers --------------------------------------------------------


def high_frequency_residual(images) -> float:
    """Mean |x - upsample(avgpool2(x))|: energy the 2x box blur removes."""
    x = np.asarray(images, dtype=np.float64)
    blurred = np.repeat(np.repeat(_avg_pool2(x), 2, axis=-2), 2, axis=-1)
    return float(np.abs(x[..., : blurred.shape[-2], : blurred.shape[-1]] - blurred).mean())


# -- feature extractors ----------------------------------------------------------------


class FeatureExtractor(Protocol):
    feature_dim: int
    num_classes: int

    def features(self, images: np.ndarray) -> np.ndarray: ...

    def probabilities(self, images: np.ndarray) -> np.ndarray: ...


class DeskClassifier(Module):
    """Four stride-2 convolutions, global average pooling and a linear classifier.

    The pooled activations are the FID features; the softmax of the logits is
    the class posterior used for the Inception Score.
    """

    def __init__(self, num_classes: int, width: int = 32, seed: int = 0, in_channels: int = 3):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.feature_dim = 2 * width
        self.convs = [
            Conv2d(in_channels, width // 2, 3, 2, 1, rng),
            Conv2d(width // 2, width, 3, 2, 1, rng),
            Conv2d(width, 2 * width, 3, 2, 1, rng),
            Conv2d(2 * width, 2 * width, 3, 2, 1, rng),
        ]
        for conv in self.convs:
            fan_in = conv.weight.data[0].size
            conv.weight.data = (rng.standard_normal(conv.weight.shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        self.head = Linear(2 * width, num_classes, rng)

    def embed(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return F.avg_pool_global(x)

    def forward(self, x):
        return self.head(self.embed(x))

    def _batched(self, images: np.ndarray, fn, width: int, batch_size: int = 128) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        out = np.empty((len(images), width), dtype=np.float64)
        with no_grad():
            for start in range(0, len(images), batch_size):
                out[start : start + batch_size] = fn(Tensor(images[start : start + batch_size])).data
        return out

    def features(self, images: np.ndarray) -> np.ndarray:
        return self._batched(images, self.embed, self.feature_dim)

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        logits = self._batched(images, self.forward, self.num_classes)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float((self.probabilities(images).argmax(axis=1) == np.asarray(labels)).mean())


def train_desk_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    epochs: int = 10,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
) -> DeskClassifier:
    """Fit :class:`DeskClassifier` with cross-entropy and Adam."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    model = DeskClassifier(num_classes, seed=seed, in_channels=images.shape[1])
    opt = Adam(model.named_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = order[start : start + batch_size]
            loss = F.cross_entropy(model(Tensor(images[idx])), labels[idx])
            loss.backward()
            opt.step()
            opt.zero_grad()
    return model


def save_extractor(model: DeskClassifier, path: str | os.PathLike) -> None:
    from .checkpoint import Checkpoint, write

    meta = {
        "kind": "desk-classifier",
        "num_classes": str(model.num_classes),
        "width": str(model.feature_dim // 2),
        "in_channels": str(model.convs[0].weight.shape[1]),
    }
    write(Checkpoint(meta, {n: p.data for n, p in model.named_parameters()}), path)


def load_extractor(path: str | os.PathLike) -> DeskClassifier:
    from .checkpoint import CheckpointError, read

    ckpt = read(path)
    if ckpt.metadata.get("kind") != "desk-classifier":
        raise CheckpointError(f"{path} is not a feature-extractor checkpoint")
    meta = ckpt.metadata
    model = DeskClassifier(int(meta["num_classes"]), int(meta["width"]), in_channels=int(meta["in_channels"]))
    for name, p in model.named_parameters():
        p.data = ckpt.tensors[name].copy()
    return model


# -- protocol and report ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalProtocol:
    sample_count: int = 10000
    is_splits: int = 10
    ms_ssim_pairs: int = 2000
    ms_ssim_scales: int = 5
    seed: int = 0

    @classmethod
    def full(cls) -> "EvalProtocol":
        return cls()

    @classmethod
    def desk(cls, **overrides) -> "EvalProtocol":
        """64-pixel images only fit 3 MS-SSIM scales with an 11-tap window."""
        values = dict(sample_count=1000, ms_ssim_pairs=2000, ms_ssim_scales=3)
        values.update(overrides)
        return cls(**values)


@dataclass
class MetricReport:
    fid: float
    inception_score_mean: float
    inception_score_std: float
    ms_ssim_mean: float
    sample_count: int
    inception_score_splits: list[float] = field(default_factory=list)
    ms_ssim_raw_mean: float = float("nan")
    label: str = ""

    SUMMARY = ("fid", "inception_score_mean", "inception_score_std", "ms_ssim_mean", "sample_count")

    def summary(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in self.SUMMARY}

    def to_csv(self, verbose: bool = False) -> str:
        row = self.summary()
        if verbose:
            row["ms_ssim_raw_mean"] = self.ms_ssim_raw_mean
            row.update({f"is_split_{i}": v for i, v in enumerate(self.inception_score_splits)})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike, verbose: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv(verbose))

    def to_table(self, verbose: bool = False) -> str:
        lines = [f"# {REPORT_HEADER}"]
        if self.label:
            lines.append(f"# {self.label}")
        lines += [
            f"{'FID':<22}{self.fid:.4f}",
            f"{'Inception Score':<22}{self.inception_score_mean:.4f} +/- {self.inception_score_std:.4f}",
            f"{'MS-SSIM':<22}{self.ms_ssim_mean:.4f}",
            f"{'samples':<22}{self.sample_count}",
        ]
        if verbose:
            lines.append(f"{'MS-SSIM (raw)':<22}{self.ms_ssim_raw_mean:.6f}")
            lines.append(f"{'IS per split':<22}{' '.join(f'{s:.4f}' for s in self.inception_score_splits)}")
        return "\n".join(lines)

    def as_dict(self) -> dict[str, object]:
        return asdict(self)


def evaluate(fake, real, extractor: FeatureExtractor, protocol: EvalProtocol = EvalProtocol(), label: str = ""):
    """FID(real, fake), IS over fake posteriors and mean MS-SSIM over random fake pairs."""
    fake = np.asarray(fake)
    real = np.asarray(real)
    n = protocol.sample_count
    if len(fake) < n or len(real) < n:
        raise ValueError(f"protocol needs {n} samples from each source; got {len(fake)} fake and {len(real)} real")
    fake, real = fake[:n], real[:n]
    fid = frechet_distance(fit_gaussian(extractor.features(real)), fit_gaussian(extractor.features(fake)))
    splits = inception_score_splits(extractor.probabilities(fake), protocol.is_splits)
    raw = pairwise_ms_ssim(fake, random_pairs(n, protocol.ms_ssim_pairs, protocol.seed), protocol.ms_ssim_scales)
    return MetricReport(
        fid=fid,
        inception_score_mean=float(splits.mean()),
        inception_score_std=float(splits.std()),
        ms_ssim_mean=float(np.clip(raw, 0.0, 1.0).mean()),
        sample_count=n,
        inception_score_splits=[float(s) for s in splits],
        ms_ssim_raw_mean=float(raw.mean()),
        label=label,
    )
