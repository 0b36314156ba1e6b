"""Pixel-level and distribution-level comparison of image sets."""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Histogram, make_rng
from .exceptions import InvalidInputError
from .validation import check_image_stack, check_mask, check_same_shape

DEFAULT_BINS = 256
KL_EPSILON = 1e-8
EIGEN_FLOOR = 1e-10


# --------------------------------------------------------------------------
# IoU and set matching
# --------------------------------------------------------------------------

def iou(a, b):
    """Intersection over union of two masks; two empty masks score 1."""
    a = check_mask(a, "a").astype(bool)
    b = check_mask(b, "b").astype(bool)
    check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def _as_masks(images, name):
    stack = check_image_stack(images, name)
    return (stack >= 0.5).astype(np.uint8)


def _random_pick(seed, index, n):
    return int(make_rng(seed, "match", index).integers(n))


def match_random(preds, reals, seed=0):
    """Mean IoU (%) pairing every real image with one uniformly drawn prediction.

    Predictions are binarised at 0.5. The draw for real image ``j`` uses
    child seed ``(seed, "match", j)``.
    """
    P = _as_masks(preds, "preds")
    R = _as_masks(reals, "reals")
    check_same_shape(P[0], R[0], ("preds", "reals"))
    scores = [iou(P[_random_pick(seed, j, len(P))], r) for j, r in enumerate(R)]
    return 100.0 * float(np.mean(scores))


def match_greedy(preds, reals):
    """Mean IoU (%) pairing every real image with its best prediction (with replacement)."""
    P = _as_masks(preds, "preds")
    R = _as_masks(reals, "reals")
    check_same_shape(P[0], R[0], ("preds", "reals"))
    return 100.0 * float(np.mean(iou_matrix(P, R).max(axis=0)))


def iou_matrix(A, B):
    """IoU for every (a, b) pair of two mask stacks, shape (len(A), len(B))."""
    A = np.asarray(A, dtype=bool).reshape(len(A), -1).astype(np.int64)
    B = np.asarray(B, dtype=bool).reshape(len(B), -1).astype(np.int64)
    inter = A @ B.T
    union = A.sum(1)[:, None] + B.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return out


# --------------------------------------------------------------------------
# histogram metrics
# --------------------------------------------------------------------------

def mean_image(images):
    """Per-pixel mean of an image set; for masks, the per-pixel foreground probability."""
    return check_image_stack(images, "images").mean(axis=0)


def intensity_histogram(image, bins=DEFAULT_BINS, epsilon=0.0):
    """Normalised histogram over uniform bins on [0, 1] (last bin right-inclusive).

    ``epsilon`` is added to every bin before renormalising.
    """
    if bins < 2:
        raise InvalidInputError("bins must be >= 2")
    values = np.asarray(image, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("image contains non-finite values")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(values * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    mass = counts / counts.sum() + epsilon
    return Histogram(edges, mass / mass.sum())


def _check_binning(p, q):
    if not p.same_binning(q):
        raise InvalidInputError("histograms use different binning")


def kl_divergence(p_real, q_model):
    """``sum P log(P / Q)`` in nats; bins with ``P == 0`` contribute nothing."""
    _check_binning(p_real, q_model)
    p, q = p_real.mass, q_model.mass
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    return max(0.0, float(np.sum(p[support] * np.log(p[support] / q[support]))))


def wasserstein_1d(p, q):
    """W1 between two histograms on the same bins: ``sum |CDF_P - CDF_Q| * width``."""
    _check_binning(p, q)
    widths = np.diff(p.bin_edges)
    cdf_gap = np.abs(np.cumsum(p.mass) - np.cumsum(q.mass))
    # the last CDF entry is 1 for both; between centre i and i+1 the gap is cdf_gap[i]
    return float(np.sum(cdf_gap[:-1] * 0.5 * (widths[:-1] + widths[1:])))


def wd_pairwise_mean(gen_set, real_set, bins=DEFAULT_BINS):
    """Mean W1 over every (generated, real) pair of per-image unsmoothed histograms."""
    G = check_image_stack(gen_set, "gen_set")
    R = check_image_stack(real_set, "real_set")
    gh = [intensity_histogram(g, bins) for g in G]
    rh = [intensity_histogram(r, bins) for r in R]
    width = 1.0 / bins
    cg = np.stack([np.cumsum(h.mass) for h in gh])[:, None, :-1]
    cr = np.stack([np.cumsum(h.mass) for h in rh])[None, :, :-1]
    return float(np.mean(np.abs(cg - cr).sum(axis=-1) * width))


def kl_sets(real_set, model_set, bins=DEFAULT_BINS, epsilon=KL_EPSILON):
    """KL(real || model) between histograms of the two sets' mean images."""
    p = intensity_histogram(mean_image(real_set), bins, epsilon)
    q = intensity_histogram(mean_image(model_set), bins, epsilon)
    return kl_divergence(p, q)


# --------------------------------------------------------------------------
# variance maps
# --------------------------------------------------------------------------

def variance_map(images):
    """Per-pixel population variance over a set of at least two images."""
    stack = check_image_stack(images, "images", min_count=2)
    return stack.var(axis=0)


@dataclass
class UncertaintyMaps:
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray


def decompose_uncertainty(samples):
    """Split pooled per-pixel variance into within-model and between-model parts.

    ``samples`` holds K models' sample sets, each of M images. With
    population estimators and equal M the identity
    ``total == aleatoric + epistemic`` holds exactly.
    """
    groups = list(samples)
    if len(groups) < 2:
        raise InvalidInputError("decompose_uncertainty needs samples from K >= 2 models")
    stacks = [check_image_stack(g, f"samples[{k}]") for k, g in enumerate(groups)]
    counts = {s.shape[0] for s in stacks}
    if len(counts) != 1:
        raise InvalidInputError(f"every model needs the same sample count, got {sorted(counts)}")
    shapes = {s.shape[1:] for s in stacks}
    if len(shapes) != 1:
        raise InvalidInputError("sample images differ in dimensions")
    S = np.stack(stacks)  # (K, M, H, W)
    means = S.mean(axis=1)
    aleatoric = S.var(axis=1).mean(axis=0)
    epistemic = means.var(axis=0)
    total = S.reshape(-1, *S.shape[2:]).var(axis=0)
    return UncertaintyMaps(aleatoric, epistemic, total)


# --------------------------------------------------------------------------
# feature-space distance
# --------------------------------------------------------------------------

def adaptive_avg_pool(image, out_size):
    """Average-pool a 2-D image onto an ``out_size`` x ``out_size`` grid.

    Cell ``i`` spans rows ``floor(i*H/n)`` to ``ceil((i+1)*H/n)``, so the
    pooling is exact block averaging when ``n`` divides the size.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    out = np.empty((out_size, out_size))
    rows = [(i * h // out_size, -(-(i + 1) * h // out_size)) for i in range(out_size)]
    cols = [(j * w // out_size, -(-(j + 1) * w // out_size)) for j in range(out_size)]
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = img[r0:r1, c0:c1].mean()
    return out


EMBEDDERS = {"avgpool8": 8, "pixels16": 16}


def embed_features(images, embedder="avgpool8"):
    """One feature row per image: adaptive average pooling, flattened."""
    if embedder not in EMBEDDERS:
        raise InvalidInputError(f"unknown embedder {embedder!r}; choose from {sorted(EMBEDDERS)}")
    stack = check_image_stack(images, "images")
    n = EMBEDDERS[embedder]
    return np.stack([adaptive_avg_pool(im, n).ravel() for im in stack])


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.where(vals < EIGEN_FLOOR, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feat_a, feat_b):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` between two feature sets.

    The trace of the cross term is computed from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``.
    """
    A = np.asarray(feat_a, dtype=np.float64)
    B = np.asarray(feat_b, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise InvalidInputError(f"feature matrices must share a feature dim: {A.shape} vs {B.shape}")
    if A.shape[0] < 2 or B.shape[0] < 2:
        raise InvalidInputError("need at least two rows per feature set")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise InvalidInputError("features contain non-finite values")
    mu_a, mu_b = A.mean(0), B.mean(0)
    cov_a = np.atleast_2d(np.cov(A, rowvar=False))
    cov_b = np.atleast_2d(np.cov(B, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = np.sqrt(np.where(eig < EIGEN_FLOOR, 0.0, eig)).sum()
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(fd, 0.0)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def config_digest(obj):
    """Short SHA-256 of a JSON-serialisable config (sorted keys)."""
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricReport:
    structure_id: str
    iou_random_mean: float = None
    iou_greedy_mean: float = None
    kl_real_vs_model: float = None
    wd_pairwise_mean: float = None
    fd: float = None
    sample_counts: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    config_digests: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


ALL_METRICS = ("iou", "kl", "wd", "fd")


def evaluate_sets(generated, real, structure_id="structure", metrics=ALL_METRICS,
                  bins=DEFAULT_BINS, seed=0, embedder="avgpool8"):
    """Score a generated image set against real outcomes and return a :class:`MetricReport`.

    Generated images are binarised at 0.5 for IoU; KL and W1 use the raw
    gray values.
    """
    G = check_image_stack(generated, "generated")
    R = check_image_stack(real, "real")
    check_same_shape(G[0], R[0], ("generated", "real"))
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise InvalidInputError(f"unknown metric(s): {sorted(unknown)}")
    report = MetricReport(structure_id=structure_id,
                          sample_counts={"generated": len(G), "real": len(R)},
                          seeds={"match_random": seed},
                          config_digests={"evaluation": config_digest(
                              {"bins": bins, "kl_epsilon": KL_EPSILON, "embedder": embedder,
                               "metrics": sorted(metrics)})})
    if "iou" in metrics:
        report.iou_random_mean = match_random(G, R, seed)
        report.iou_greedy_mean = match_greedy(G, R)
    if "kl" in metrics:
        report.kl_real_vs_model = kl_sets(R, G, bins)
    if "wd" in metrics:
        report.wd_pairwise_mean = wd_pairwise_mean(G, R, bins)
    if "fd" in metrics:
        if len(G) < 2 or len(R) < 2:
            raise InvalidInputError("fd needs at least two images per set")
        report.fd = frechet_distance(embed_features(G, embedder), embed_features(R, embedder))
        report.notes["fd_embedder"] = (
            f"{embedder}; values are not comparable with CNN-feature distances")
    return report
