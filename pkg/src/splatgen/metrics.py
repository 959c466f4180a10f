"""Quantitative evaluation kernels: repeated-view (Janus) detection,
retrieval precision, Frechet distance, inception score, and training-cost
bookkeeping. All kernels are pure functions of feature matrices supplied by
an external extractor; no model code lives here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from splatgen.errors import (
    ConfigError,
    InsufficientFramesError,
    InvalidFeatureError,
    ShapeError,
)


@dataclass
class FeatureSet:
    """K x D matrix of per-frame feature vectors."""

    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if not np.isfinite(self.features).all():
            raise InvalidFeatureError("non-finite feature rows")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class JanusVerdict:
    has_janus: bool
    similar_mask: np.ndarray  # (K,) booleans
    runs: list  # [(start, end)] inclusive index ranges flagged as repeats


@dataclass
class MetricReport:
    janus_frequency_percent: float | None = None
    good_alignment_percent: float | None = None
    r_precision_percent: float | None = None
    fid: float | None = None
    inception_score: float | None = None
    inception_score_std: float | None = None
    gpu_hours: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "janus_frequency_percent": self.janus_frequency_percent,
            "good_alignment_percent": self.good_alignment_percent,
            "r_precision_percent": self.r_precision_percent,
            "fid": self.fid,
            "inception_score": self.inception_score,
            "inception_score_std": self.inception_score_std,
            "gpu_hours": self.gpu_hours,
        }
        d.update(self.extra)
        return d


def janus_detect(
    features: FeatureSet,
    rho: float = 1.5,
    min_run: int = 2,
    metric: str = "euclidean",
) -> JanusVerdict:
    """Flag repeated views in an azimuth-ordered turntable.

    Frames are ordered by azimuth 0..360 with frame 0 as the reference.
    dist_k is each frame's feature distance to the reference; the threshold
    is rho * (dist to the second frame + dist to the last frame). A run of
    at least ``min_run`` consecutive similar frames that is not cyclically
    connected to the reference's head/tail block marks a repeat.
    """
    if features.count < 3:
        raise InsufficientFramesError(f"need >= 3 frames, got {features.count}")
    if rho <= 0:
        raise ConfigError("rho must be > 0")
    f = features.features
    if metric == "euclidean":
        dists = np.linalg.norm(f - f[0], axis=1)
    elif metric == "cosine":
        norms = np.linalg.norm(f, axis=1)
        if np.any(norms == 0):
            raise InvalidFeatureError("zero-norm feature row")
        dists = 1.0 - (f @ f[0]) / (norms * norms[0])
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    tau = rho * (dists[1] + dists[-1])
    mask = dists < tau

    k = features.count
    # head/tail block: the maximal cyclic run of ones through frame 0
    head_tail = np.zeros(k, dtype=bool)
    if mask[0]:
        i = 0
        while i < k and mask[i]:
            head_tail[i] = True
            i += 1
        j = k - 1
        while j > i and mask[j]:
            head_tail[j] = True
            j -= 1

    runs = []
    middle = mask & ~head_tail
    start = None
    for i in range(k + 1):
        on = i < k and middle[i]
        if on and start is None:
            start = i
        elif not on and start is not None:
            if i - start >= min_run:
                runs.append((start, i - 1))
            start = None
    return JanusVerdict(has_janus=bool(runs), similar_mask=mask, runs=runs)


def janus_frequency(labels) -> float:
    """Percentage of trials flagged as having the Janus problem."""
    labels = list(labels)
    if not labels:
        raise ConfigError("empty label list")
    return 100.0 * sum(bool(x) for x in labels) / len(labels)


def r_precision(
    render_embeddings: FeatureSet,
    prompt_embeddings: FeatureSet,
    true_index: np.ndarray,
) -> float:
    """R=1 retrieval precision under cosine similarity; ties break toward the
    lower prompt index."""
    r = render_embeddings.features
    p = prompt_embeddings.features
    if r.shape[1] != p.shape[1]:
        raise ShapeError("render/prompt embedding dimensions differ")
    if p.shape[0] < 2:
        raise ConfigError("need at least 2 candidate prompts")
    true_index = np.asarray(true_index, dtype=int)
    if true_index.shape != (r.shape[0],):
        raise ShapeError("one true prompt index per render required")
    rn = np.linalg.norm(r, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(rn == 0) or np.any(pn == 0):
        raise InvalidFeatureError("zero-norm embedding")
    sims = (r / rn[:, None]) @ (p / pn[:, None]).T
    best = np.argmax(sims, axis=1)  # first maximum = lowest index on ties
    return 100.0 * float(np.mean(best == true_index))


def _fit_gaussian(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False)
    return mu, np.atleast_2d(cov)


def fid(features_a: FeatureSet, features_b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    The matrix square root of Sigma1 Sigma2 is taken via an eigendecomposition
    of the symmetrized product Sigma1^{1/2} Sigma2 Sigma1^{1/2}; eigenvalues in
    [-1e-6, 0] are clamped to 0, anything more negative is a numerical error.
    """
    if features_a.dim != features_b.dim:
        raise ShapeError("feature dimensions differ")
    mu1, s1 = _fit_gaussian(features_a.features)
    mu2, s2 = _fit_gaussian(features_b.features)

    w1, v1 = np.linalg.eigh(s1)
    s1_half = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    inner = s1_half @ s2 @ s1_half
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if np.any(w < -1e-6):
        raise InvalidFeatureError(f"matrix square root failed: eigenvalue {w.min():.3g}")
    w = np.clip(w, 0.0, None)
    diff = mu1 - mu2
    result = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.sum(np.sqrt(w)))
    if not np.isfinite(result):
        raise InvalidFeatureError("non-finite FID")
    return result


def inception_score(class_probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std)."""
    p = np.asarray(class_probs, dtype=float)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ShapeError("class_probs must be (R, C) with C >= 2")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidFeatureError("rows must be probability distributions")
    scores = []
    for chunk in np.array_split(p, splits):
        if chunk.shape[0] == 0:
            continue
        marginal = chunk.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(chunk > 0, chunk * (np.log(chunk) - np.log(marginal)), 0.0)
        scores.append(np.exp(kl.sum(axis=1).mean()))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


def gpu_hours(report) -> float:
    """Wall-clock hours per generated model, from a RunReport or its dict."""
    if hasattr(report, "total_seconds"):
        return float(report.total_seconds) / 3600.0
    return float(report["total_seconds"]) / 3600.0
