"""Evaluation: FID, Inception Score, and conditioning CE / L2 through the
discriminator's label and regression heads.

FID and IS need a feature extractor. The default one is a small CNN trained
on the synthetic dataset's sub-categories (penultimate layer for FID
features, softmax for IS probabilities); any object with ``features`` and
``probs`` methods can stand in.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import classification_loss, regression_loss
from .models import StageState, sample_noise
from .synthdata import ManifestDataset
from .textemb import WordVectorTable, embed_text_average

log = logging.getLogger(__name__)

__all__ = [
    "MetricError",
    "GaussianFit",
    "MetricReport",
    "FeatureExtractor",
    "fit_gaussian",
    "matrix_sqrt_psd",
    "fid",
    "fid_from_features",
    "inception_score",
    "conditioning_cross_entropy",
    "conditioning_l2",
    "shuffled_conditioning_l2",
    "train_extractor",
    "load_extractor",
    "evaluate",
]

PSD_TOL = 1e-8


class MetricError(ValueError):
    pass


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features) -> GaussianFit:
    """Sample mean and unbiased (N-1) covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError(f"features must be 2-D (N, d), got shape {x.shape}")
    if x.shape[0] < 2:
        raise MetricError(f"need at least 2 samples to fit a covariance, got {x.shape[0]}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return GaussianFit(mu, (cov + cov.T) / 2.0)


def matrix_sqrt_psd(m) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix by eigendecomposition.

    Tolerances (asymmetry, negative eigenvalues) are 1e-8 relative to
    ``max(1, max|m|)``; eigenvalues inside the tolerance are clamped to 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise MetricError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    asym = float(np.abs(m - m.T).max(initial=0.0))
    if asym > PSD_TOL * scale:
        raise MetricError(f"matrix is not symmetric (max |M - M^T| = {asym:.3g})")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    if w.size and w.min() < -PSD_TOL * scale:
        raise MetricError(f"matrix is not PSD (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    return (s + s.T) / 2.0


def fid(real_fit: GaussianFit, fake_fit: GaussianFit) -> float:
    """Fréchet distance between two Gaussian fits.

    The cross term uses ``(S_r Σ_g S_r)^{1/2}`` with ``S_r = Σ_r^{1/2}``,
    which has the same trace as ``(Σ_r Σ_g)^{1/2}`` and stays symmetric.
    """
    if real_fit.mean.shape != fake_fit.mean.shape:
        raise MetricError(
            f"feature dims differ: {real_fit.mean.shape[0]} vs {fake_fit.mean.shape[0]}"
        )
    diff = real_fit.mean - fake_fit.mean
    s_r = matrix_sqrt_psd(real_fit.cov)
    sandwich = s_r @ fake_fit.cov @ s_r
    cross = matrix_sqrt_psd((sandwich + sandwich.T) / 2.0)
    d = float(diff @ diff + np.trace(real_fit.cov) + np.trace(fake_fit.cov) - 2.0 * np.trace(cross))
    if d < 0.0:
        if d < -1e-4:
            log.warning("FID evaluated to %.3g; clamping to 0", d)
        d = 0.0
    return d


def fid_from_features(real_features, fake_features) -> float:
    return fid(fit_gaussian(real_features), fit_gaussian(fake_features))


def inception_score(prob_rows, n_splits: int = 1) -> tuple[float, float]:
    """exp(mean_i KL(p(y|x_i) || p(y))) per split; returns (mean, std) over splits."""
    p = np.asarray(prob_rows, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"probabilities must be 2-D (N, C), got shape {p.shape}")
    if n_splits < 1 or p.shape[0] < n_splits:
        raise MetricError(f"need N >= n_splits >= 1, got N={p.shape[0]}, n_splits={n_splits}")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5) or np.any(p < 0):
        raise MetricError("probability rows must be non-negative and sum to 1 within 1e-5")
    scores = []
    for part in np.array_split(p, n_splits):
        pbar = part.mean(axis=0, keepdims=True)
        logp = np.log(np.maximum(part, 1e-12))
        logq = np.log(np.maximum(pbar, 1e-12))
        kl = (part * (logp - logq)).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------- conditioning probes

@torch.no_grad()
def conditioning_cross_entropy(D, images: torch.Tensor, y_cond, stage: StageState) -> float:
    """Cross-entropy of the label head on generated images against their conditioning labels."""
    was_training = D.training
    D.eval()
    try:
        return float(classification_loss(D(images, stage).label_logits, torch.as_tensor(y_cond)))
    finally:
        D.train(was_training)


@torch.no_grad()
def conditioning_l2(D, images: torch.Tensor, e_cond, stage: StageState) -> float:
    """Mean squared distance between the regression head's output and the conditioning embedding."""
    was_training = D.training
    D.eval()
    try:
        return float(regression_loss(D(images, stage).regressed_e, torch.as_tensor(e_cond)))
    finally:
        D.train(was_training)


def _derangement(n: int, gen: torch.Generator) -> torch.Tensor:
    perm = torch.randperm(n, generator=gen)
    fixed = perm == torch.arange(n)
    if n > 1 and bool(fixed.any()):
        # rotate the fixed points among themselves; a single one swaps with its neighbor
        idx = torch.nonzero(fixed).flatten()
        if len(idx) == 1:
            j = (int(idx[0]) + 1) % n
            perm[idx[0]], perm[j] = perm[j].clone(), perm[idx[0]].clone()
        else:
            perm[idx] = perm[idx.roll(1)]
    return perm


@torch.no_grad()
def shuffled_conditioning_l2(D, images: torch.Tensor, e_cond: torch.Tensor, stage: StageState,
                             generator: torch.Generator) -> float:
    """Regression-head distance to *another* sample's conditioning embedding.

    This is the chance level that :func:`conditioning_l2` should beat.
    """
    perm = _derangement(len(e_cond), generator)
    return conditioning_l2(D, images, e_cond[perm], stage)


# ---------------------------------------------------------------- feature extractor

class _ExtractorNet(nn.Module):
    def __init__(self, num_classes: int, feature_dim: int = 64):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.LeakyReLU(0.2), nn.AvgPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(2),
        )
        self.embed = nn.Linear(64 * 4, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def features(self, x):
        return F.leaky_relu(self.embed(self.conv(x).flatten(1)), 0.2)

    def forward(self, x):
        return self.head(self.features(x))


class FeatureExtractor:
    """Frozen image encoder: ``features`` (N, d_f) for FID, ``probs`` (N, C) for IS.

    Inputs are NCHW tensors in [-1, 1]; they are resized to the training
    resolution (area downsampling or nearest upsampling).
    """

    def __init__(self, net: _ExtractorNet, resolution: int, meta: dict):
        self.net = net.eval()
        self.resolution = resolution
        self.meta = meta
        self.name = meta.get("name", "shapefashion-cnn")
        self.d_f = net.embed.out_features

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        r = x.shape[-1]
        if r > self.resolution:
            return F.adaptive_avg_pool2d(x, self.resolution)
        if r < self.resolution:
            return F.interpolate(x, size=self.resolution, mode="nearest")
        return x

    @torch.no_grad()
    def features(self, images: torch.Tensor, batch: int = 250) -> np.ndarray:
        out = [self.net.features(self._resize(images[i:i + batch])) for i in range(0, len(images), batch)]
        return torch.cat(out).double().numpy()

    @torch.no_grad()
    def probs(self, images: torch.Tensor, batch: int = 250) -> np.ndarray:
        out = [self.net(self._resize(images[i:i + batch])) for i in range(0, len(images), batch)]
        return torch.softmax(torch.cat(out).double(), dim=1).numpy()

    def save(self, path) -> Path:
        return save_checkpoint(
            path, "extractor",
            {"num_classes": self.net.head.out_features, "feature_dim": self.d_f,
             "resolution": self.resolution},
            {"net": self.net.state_dict()}, meta=self.meta,
        )


def train_extractor(dataset: ManifestDataset, epochs: int = 4, batch_size: int = 64,
                    lr: float = 1e-3, seed: int = 0, feature_dim: int = 64,
                    holdout: float = 0.1) -> FeatureExtractor:
    """Fit the default extractor to the dataset's sub-category labels."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    k = int(dataset.sub.max()) + 1 if dataset.ontology is None else dataset.ontology.num_sub
    net = _ExtractorNet(k, feature_dim)
    x = torch.as_tensor(dataset.float_images(np.arange(len(dataset)))).permute(0, 3, 1, 2).contiguous()
    y = torch.as_tensor(dataset.sub)
    order = torch.randperm(len(x), generator=gen)
    n_hold = int(len(x) * holdout)
    hold, fit = order[:n_hold], order[n_hold:]
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        perm = fit[torch.randperm(len(fit), generator=gen)]
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    acc = None
    if n_hold:
        with torch.no_grad():
            acc = float((net(x[hold]).argmax(1) == y[hold]).float().mean())
    # identify the training data by content so equal runs write equal files
    manifest_sha = hashlib.sha256((dataset.root / "manifest.jsonl").read_bytes()).hexdigest()
    meta = {"name": "shapefashion-cnn", "manifest_sha256": manifest_sha, "epochs": epochs,
            "seed": seed, "holdout_accuracy": acc, "num_examples": len(dataset)}
    return FeatureExtractor(net, dataset.resolution, meta)


def load_extractor(path) -> FeatureExtractor:
    payload = load_checkpoint(path, "extractor")
    cfg = payload["config"]
    net = _ExtractorNet(cfg["num_classes"], cfg["feature_dim"])
    net.load_state_dict(payload["state"]["net"])
    return FeatureExtractor(net, cfg["resolution"], payload["extra"].get("meta", {}))


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    fid: float
    is_mean: float
    is_std: float
    cond_ce: float
    cond_l2: float
    cond_l2_shuffled: float
    real_is_mean: float
    real_is_std: float
    n_real: int
    n_fake: int
    n_splits: int
    seed: int
    checkpoint: str
    checkpoint_sha256: str
    variant: str
    label_layer: str
    extractor: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(images).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def generate_conditioned(gan, dataset: ManifestDataset, table: WordVectorTable, n: int,
                         gen: torch.Generator, batch: int = 100):
    """Generate ``n`` images under conditions drawn from dataset records.

    Returns ``(images, y, e)`` with images in NCHW at the model's current stage.
    """
    cfg = gan.cfg
    idx = torch.randint(len(dataset), (n,), generator=gen)
    labels = torch.as_tensor(dataset.sub if cfg.use_ontology else dataset.main)[idx]
    e = torch.as_tensor(np.stack([embed_text_average(table, dataset.texts[i]).vector for i in idx.tolist()]))
    z = sample_noise(cfg.d_z, n, generator=gen)
    cond = torch.cat([z, e, F.one_hot(labels, cfg.num_labels).float()], dim=1)
    gan.eval()
    imgs = torch.cat([gan.G(cond[i:i + batch], gan.stage) for i in range(0, n, batch)])
    return imgs, labels, e


def _batched_mean(fn, n: int, batch: int) -> float:
    total = 0.0
    for i in range(0, n, batch):
        j = min(n, i + batch)
        total += fn(slice(i, j)) * (j - i)
    return total / n


def evaluate(checkpoint, dataset: ManifestDataset, table: WordVectorTable,
             extractor: FeatureExtractor, n_real: int = 1000, n_fake: int = 1000,
             seed: int = 0, n_splits: int = 1, batch: int = 100) -> MetricReport:
    """All four measures for one checkpoint; fully determined by ``seed``."""
    from .trainer import load_gan  # trainer imports metrics for its in-loop hook

    if n_real < 2 or n_fake < 2:
        raise MetricError("n_real and n_fake must both be >= 2")
    if n_real > len(dataset):
        raise MetricError(f"n_real={n_real} exceeds the dataset size {len(dataset)}")
    checkpoint = Path(checkpoint)
    gan, payload = load_gan(checkpoint)
    gen = torch.Generator().manual_seed(int(seed))

    real_idx = torch.randperm(len(dataset), generator=gen)[:n_real].numpy()
    reals = _to_nchw(dataset.float_images(np.sort(real_idx)))
    fakes, y, e = generate_conditioned(gan, dataset, table, n_fake, gen, batch)

    st = gan.stage
    ce = _batched_mean(lambda s: conditioning_cross_entropy(gan.D, fakes[s], y[s], st), n_fake, batch)
    l2 = _batched_mean(lambda s: conditioning_l2(gan.D, fakes[s], e[s], st), n_fake, batch)
    l2_shuf = _batched_mean(
        lambda s: shuffled_conditioning_l2(gan.D, fakes[s], e[s], st, gen), n_fake, batch
    )

    fid_value = fid_from_features(extractor.features(reals), extractor.features(fakes))
    is_mean, is_std = inception_score(extractor.probs(fakes), n_splits)
    r_mean, r_std = inception_score(extractor.probs(reals), n_splits)
    return MetricReport(
        fid=fid_value, is_mean=is_mean, is_std=is_std, cond_ce=ce, cond_l2=l2,
        cond_l2_shuffled=l2_shuf, real_is_mean=r_mean, real_is_std=r_std,
        n_real=n_real, n_fake=n_fake, n_splits=n_splits, seed=int(seed),
        checkpoint=checkpoint.name, checkpoint_sha256=_sha256(checkpoint),
        variant=payload["extra"].get("variant", "unknown"),
        label_layer="sub" if gan.cfg.use_ontology else "main",
        extractor=extractor.name,
    )


def in_loop_metrics(dataset: ManifestDataset, table: WordVectorTable, n: int = 200,
                    seed: int = 0, batch: int = 100):
    """Build a trainer hook reporting conditioning CE / L2 on ``n`` fresh fakes."""

    def hook(gan, stage, step):
        gen = torch.Generator().manual_seed(int(seed))
        was = gan.stage
        gan.stage = stage
        try:
            fakes, y, e = generate_conditioned(gan, dataset, table, n, gen, batch)
            ce = _batched_mean(lambda s: conditioning_cross_entropy(gan.D, fakes[s], y[s], stage), n, batch)
            l2 = _batched_mean(lambda s: conditioning_l2(gan.D, fakes[s], e[s], stage), n, batch)
        finally:
            gan.stage = was
            gan.train()
        return {"cond_ce": ce, "cond_l2": l2}

    return hook
