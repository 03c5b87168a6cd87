"""Clip-level anomaly scores: reconstruction MSE and selective Mahalanobis.

Scoring functions take raw feature rows and apply the model's stored
normalizer. None of them accept a domain label for the clip being scored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import CorruptHeader, InsufficientData, InsufficientFrames, ShapeMismatch, SingularCovariance
from .io import atomic_write_text
from .model import AutoencoderState, reconstruct

BACKENDS = ("mse", "selective_mahalanobis")
SCORE_FIELDS = ("clip_id", "path", "score", "decision", "backend", "chosen_domain")
DEFAULT_SHRINKAGE = 1e-3
PD_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Threshold:
    value: float
    rule: str


@dataclass(frozen=True)
class ClipScore:
    clip_id: str
    score: float
    decision: str | None  # "normal" | "anomaly"; None when no threshold is set
    backend: str
    chosen_domain: str = "n/a"
    path: str = ""


@dataclass
class DomainCovariances:
    """Per-domain residual covariances (after shrinkage) and their inverses."""
    sigma_s: np.ndarray
    sigma_t: np.ndarray
    sigma_s_inv: np.ndarray
    sigma_t_inv: np.ndarray
    shrinkage_used: tuple[float, float]
    frame_counts: tuple[int, int]

    @classmethod
    def identity(cls, dim: int) -> "DomainCovariances":
        eye = np.eye(dim)
        return cls(eye, eye.copy(), eye.copy(), eye.copy(), (0.0, 0.0), (0, 0))


def _prepare(state: AutoencoderState, features) -> np.ndarray:
    x = getattr(features, "values", features)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.dims[0] or x.shape[0] == 0:
        raise ShapeMismatch(f"features of shape {x.shape}, model expects (T', {state.dims[0]})")
    if state.normalizer is not None:
        x = state.normalizer(x)
    return x


def residuals(state: AutoencoderState, features) -> np.ndarray:
    """Per-frame x - x_hat in the standardized space (eval-mode forward)."""
    x = _prepare(state, features)
    return x - reconstruct(state, x)


def _decide(score, threshold):
    if threshold is None:
        return None
    return "anomaly" if score > threshold.value else "normal"


def score_mse(state: AutoencoderState, features, threshold: Threshold | None = None,
              clip_id: str = "", path: str = "") -> ClipScore:
    d = residuals(state, features)
    score = float(np.mean(d * d))
    if threshold is None:
        threshold = state.thresholds.get("mse")
    return ClipScore(clip_id, score, _decide(score, threshold), "mse", "n/a", path)


def quadratic_form(d, precision) -> np.ndarray:
    """Row-wise d_i^T P d_i."""
    return np.einsum("ij,ij->i", d @ precision, d)


def mahalanobis_pair(d, cov: DomainCovariances) -> tuple[float, float]:
    """Clip-level (D_s, D_t): frame mean of d^T Sigma^-1 d / dim."""
    dim = d.shape[1]
    if cov.sigma_s_inv.shape != (dim, dim) or cov.sigma_t_inv.shape != (dim, dim):
        raise ShapeMismatch(f"covariance shape {cov.sigma_s_inv.shape} vs residual width {dim}")
    d_s = float(np.mean(quadratic_form(d, cov.sigma_s_inv)) / dim)
    d_t = float(np.mean(quadratic_form(d, cov.sigma_t_inv)) / dim)
    return d_s, d_t


def select_min(d_s: float, d_t: float) -> tuple[float, str]:
    """min(D_s, D_t) and the domain that attained it; ties go to source."""
    return (d_s, "source") if d_s <= d_t else (d_t, "target")


def score_selective_mahalanobis(state: AutoencoderState, features,
                                cov: DomainCovariances | None = None,
                                threshold: Threshold | None = None,
                                clip_id: str = "", path: str = "") -> ClipScore:
    cov = cov if cov is not None else state.covariances
    if cov is None:
        raise ShapeMismatch("model has no fitted covariances; train with the "
                            "selective_mahalanobis backend")
    d = residuals(state, features)
    score, domain = select_min(*mahalanobis_pair(d, cov))
    if threshold is None:
        threshold = state.thresholds.get("selective_mahalanobis")
    return ClipScore(clip_id, score, _decide(score, threshold), "selective_mahalanobis",
                     domain, path)


def score_clip(state, features, backend, **kw) -> ClipScore:
    if backend == "mse":
        return score_mse(state, features, **kw)
    if backend == "selective_mahalanobis":
        return score_selective_mahalanobis(state, features, **kw)
    raise ValueError(f"unknown backend {backend!r}")


def ledoit_wolf_rho(centered) -> float:
    """Ledoit-Wolf optimal weight on the scaled identity for centered rows."""
    x = np.asarray(centered, dtype=np.float64)
    n, p = x.shape
    s = x.T @ x / n
    mu = np.trace(s) / p
    delta = (np.sum(s * s) - 2 * mu * np.trace(s) + p * mu * mu) / p
    if delta <= 0:
        return 0.0
    sq_norms = np.einsum("ij,ij->i", x, x)
    beta = (np.sum(sq_norms ** 2) / n - np.sum(s * s)) / (n * p)
    return float(min(max(beta, 0.0), delta) / delta)


def _invert(sigma):
    eye = np.eye(sigma.shape[0])
    try:
        factor = linalg.cho_factor(sigma, lower=True, check_finite=True)
    except linalg.LinAlgError:
        return None
    inv = linalg.cho_solve(factor, eye)
    inv = 0.5 * (inv + inv.T)
    if np.max(np.abs(sigma @ inv - eye)) >= PD_TOLERANCE:
        return None
    return inv


def shrunk_inverse(sample_cov, shrinkage: float = DEFAULT_SHRINKAGE, max_shrinkage: float = 1.0):
    """Sigma = S + lam * mean(diag S) * I and its Cholesky-based inverse.

    lam escalates x10 while the factorization fails or Sigma Sigma^-1 strays
    from I by more than 1e-6, up to ``max_shrinkage``.
    """
    s = np.asarray(sample_cov, dtype=np.float64)
    scale = float(np.mean(np.diag(s)))
    if not scale > 0:
        scale = 1.0
    eye = np.eye(s.shape[0])
    lam = shrinkage
    while True:
        sigma = s + lam * scale * eye
        sigma = 0.5 * (sigma + sigma.T)
        inv = _invert(sigma)
        if inv is not None:
            return sigma, inv, lam
        if lam >= max_shrinkage:
            raise SingularCovariance(f"covariance not invertible even with shrinkage {lam:g}")
        lam = min(lam * 10.0, max_shrinkage)


def ledoit_wolf_inverse(centered, floor: float = DEFAULT_SHRINKAGE):
    """Sigma = (1 - rho) S + rho * mean(diag S) * I with the Ledoit-Wolf rho.

    Keeps the trace of S, so per-domain distances stay on a common scale.
    rho escalates like ``shrunk_inverse`` if the factorization fails.
    """
    x = np.asarray(centered, dtype=np.float64)
    s = x.T @ x / x.shape[0]
    scale = float(np.mean(np.diag(s)))
    if not scale > 0:
        scale = 1.0
    eye = np.eye(s.shape[0])
    rho = ledoit_wolf_rho(x)
    while True:
        sigma = (1.0 - rho) * s + rho * scale * eye
        sigma = 0.5 * (sigma + sigma.T)
        inv = _invert(sigma)
        if inv is not None:
            return sigma, inv, rho
        if rho >= 1.0:
            raise SingularCovariance("covariance not invertible even at full shrinkage")
        rho = min(max(rho * 10.0, floor), 1.0)


def fit_covariances(state: AutoencoderState, source_frames, target_frames,
                    shrinkage="ledoit-wolf") -> DomainCovariances:
    """Residual covariances of the trained model on each domain's training frames.

    ``shrinkage`` is either "ledoit-wolf" (data-driven) or a number lam for
    the fixed rule Sigma = S + lam * mean(diag S) * I.
    """
    out = []
    for name, frames in (("source", source_frames), ("target", target_frames)):
        if isinstance(frames, (list, tuple)):
            frames = np.concatenate([getattr(f, "values", f) for f in frames], axis=0)
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 2:
            raise InsufficientFrames(f"{name} domain has {frames.shape[0] if frames.ndim else 0} "
                                     "frames; need at least 2")
        d = residuals(state, frames)
        centered = d - d.mean(axis=0)
        if shrinkage == "ledoit-wolf":
            out.append((*ledoit_wolf_inverse(centered), d.shape[0]))
        else:
            s = centered.T @ centered / d.shape[0]
            out.append((*shrunk_inverse(s, float(shrinkage)), d.shape[0]))
    (ss, ss_inv, lam_s, n_s), (st, st_inv, lam_t, n_t) = out
    return DomainCovariances(ss, st, ss_inv, st_inv, (lam_s, lam_t), (n_s, n_t))


def fit_threshold(scores, percentile: float = 0.9) -> Threshold:
    """Linearly interpolated empirical percentile of normal training-clip scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 10:
        raise InsufficientData(f"need at least 10 training scores, got {scores.size}")
    if not 0.0 <= percentile <= 1.0:
        raise ValueError("percentile must be within [0, 1]")
    value = float(np.quantile(scores, percentile, method="linear"))
    return Threshold(value, f"empirical-percentile(p={percentile:g}, linear, n={scores.size})")


def write_scores(path, scores):
    rows = sorted(scores, key=lambda s: s.path)
    lines = [",".join(SCORE_FIELDS)]
    for s in rows:
        lines.append(",".join([s.clip_id, s.path, repr(float(s.score)), s.decision or "",
                               s.backend, s.chosen_domain]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_scores(path) -> list[ClipScore]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
            raise CorruptHeader(f"{path}: expected columns {','.join(SCORE_FIELDS)}")
        return [ClipScore(r["clip_id"], float(r["score"]), r["decision"] or None,
                          r["backend"], r["chosen_domain"], r["path"]) for r in reader]
