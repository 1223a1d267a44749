"""Poisoning-detector bench (spectral signature, QUE, Strip) and the unlearning-cost monitor."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import (
    ConfigurationError,
    InsufficientPopulationError,
    UndefinedRateError,
)


@dataclass
class RepresentationMatrix:
    """Penultimate activations grouped by label: ``{class: (ids, rows)}``."""

    groups: dict

    @property
    def width(self) -> int:
        return next(iter(self.groups.values()))[1].shape[1] if self.groups else 0

    def ids(self) -> np.ndarray:
        return np.concatenate([ids for ids, _ in self.groups.values()]) if self.groups else np.zeros(0, np.int64)


def extract_representations(model: nn.Model, dataset: LabeledDataset) -> RepresentationMatrix:
    rows = nn.features(model, dataset.images)
    groups = {}
    for c in np.unique(dataset.labels):
        mask = dataset.labels == c
        groups[int(c)] = (dataset.ids[mask], rows[mask])
    return RepresentationMatrix(groups)


def class_of(reps: RepresentationMatrix) -> dict:
    return {int(i): c for c, (ids, _) in reps.groups.items() for i in ids}


# ---------------------------------------------------------------- spectral signature


def spectral_signature_scores(reps: RepresentationMatrix) -> dict:
    """Squared projection of each centred row onto its class's top right singular vector."""
    scores = {}
    for c, (ids, rows) in sorted(reps.groups.items()):
        if len(rows) < 2:
            raise ConfigurationError(f"class {c} needs at least 2 rows")
        centred = rows - rows.mean(axis=0)
        if not np.any(centred):
            s = np.zeros(len(rows))
        else:
            _, _, vt = np.linalg.svd(centred, full_matrices=False)
            s = (centred @ vt[0]) ** 2
        scores.update(zip((int(i) for i in ids), s.tolist()))
    return scores


# ---------------------------------------------------------------- QUE

RIDGE = 1e-6
TAYLOR_TERMS = 8


def expm_taylor(m: np.ndarray, terms: int = TAYLOR_TERMS) -> np.ndarray:
    """Matrix exponential by a truncated Taylor series with scaling and squaring."""
    norm = np.linalg.norm(m, 2)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    a = m / (2.0**squarings)
    out = np.eye(len(m))
    term = np.eye(len(m))
    for k in range(1, terms):
        term = term @ a / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def _reduce(rows: np.ndarray, max_dim: int) -> np.ndarray:
    """Project onto the top ``max_dim`` principal directions."""
    centred = rows - rows.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return rows @ vt[:max_dim].T


def whiten(rows: np.ndarray, clean_fraction: float):
    """Whitened rows using mean/covariance of the lowest-norm ``clean_fraction`` of rows."""
    centred = rows - np.median(rows, axis=0)
    order = np.argsort(np.linalg.norm(centred, axis=1), kind="stable")
    k = max(2, int(math.ceil(clean_fraction * len(rows))))
    clean = rows[order[:k]]
    mu = clean.mean(axis=0)
    cov = np.cov(clean, rowvar=False, bias=True).reshape(rows.shape[1], rows.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() <= RIDGE * max(evals.max(), 1.0):
        warnings.warn("singular covariance in QUE; adding a ridge", RuntimeWarning, stacklevel=3)
        evals = evals + RIDGE
    w = evecs @ np.diag(evals**-0.5) @ evecs.T
    return (rows - mu) @ w


def que_from_whitened(x: np.ndarray, alpha: float) -> np.ndarray:
    """x_i^T Q x_i / tr(Q) with Q = exp((alpha - 1)(S - I) / (||S||_2 - 1)), S the second moment of ``x``.

    ``alpha = 1`` gives Q = I and hence the whitened squared norm over the width.
    """
    d = x.shape[1]
    s = x.T @ x / len(x)
    if alpha == 1.0:
        q = np.eye(d)
    else:
        denom = np.linalg.norm(s, 2) - 1.0
        if abs(denom) < 1e-12:
            q = np.eye(d)
        else:
            q = expm_taylor((alpha - 1.0) * (s - np.eye(d)) / denom)
    return np.einsum("ij,jk,ik->i", x, q, x) / np.trace(q)


def que_scores(reps: RepresentationMatrix, alpha: float = 4.0, clean_fraction: float = 0.5) -> dict:
    if alpha < 1:
        raise ConfigurationError("alpha must be >= 1")
    if not 0 < clean_fraction <= 1:
        raise ConfigurationError("clean_fraction must lie in (0, 1]")
    scores = {}
    for c, (ids, rows) in sorted(reps.groups.items()):
        k = int(math.ceil(clean_fraction * len(rows)))
        # the covariance estimate needs several clean rows per dimension
        max_dim = max(1, k // 4)
        if rows.shape[1] > max_dim:
            rows = _reduce(rows, max_dim)
        s = que_from_whitened(whiten(rows, clean_fraction), alpha)
        scores.update(zip((int(i) for i in ids), s.tolist()))
    return scores


# ---------------------------------------------------------------- Strip


def entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def strip_entropy(model: nn.Model, candidates: LabeledDataset, clean_pool, n_overlays: int = 20, seed: int = 0) -> dict:
    """Mean prediction entropy of each candidate superimposed (pixel average) on random clean images."""
    if n_overlays < 1:
        raise ConfigurationError("n_overlays must be >= 1")
    pool = np.asarray(getattr(clean_pool, "images", clean_pool), dtype=np.float64)
    if len(pool) == 0:
        raise ConfigurationError("clean pool is empty")
    rng = np.random.default_rng(seed)
    partners = rng.integers(0, len(pool), (len(candidates), n_overlays))
    blended = (candidates.images[:, None] + pool[partners]) / 2.0
    flat = blended.reshape((-1,) + candidates.images.shape[1:])
    h = entropy(softmax(nn.forward(model, flat))).reshape(len(candidates), n_overlays).mean(axis=1)
    return dict(zip((int(i) for i in candidates.ids), h.tolist()))


def calibrate_low_threshold(clean_scores: Sequence[float], fpr: float = 0.10) -> float:
    """Score below which a fraction ``fpr`` of clean samples fall."""
    return float(np.quantile(np.asarray(clean_scores, dtype=np.float64), fpr))


# ---------------------------------------------------------------- rates / reports


def tpr_fpr(flagged, attack, population):
    flagged, attack, population = set(flagged), set(attack), set(population)
    if not attack:
        raise UndefinedRateError("TPR is undefined for an empty attack set")
    if not attack <= population:
        raise ConfigurationError("attack ids must belong to the population")
    benign = population - attack
    tpr = len(flagged & attack) / len(attack)
    fpr = len((flagged & population) - attack) / len(benign) if benign else 0.0
    return tpr, fpr


def top_k_flags(scores: dict, k: int):
    """Ids of the ``k`` largest scores (ties broken by id) and the k-th score as threshold."""
    if k <= 0:
        return set(), math.inf
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return {i for i, _ in ranked}, ranked[-1][1]


def expected_flag_count(expected_attack: int, multiplier: float = 1.5) -> int:
    return int(math.ceil(multiplier * expected_attack))


@dataclass
class DetectionReport:
    detector: str
    scores: dict
    threshold: float
    flagged: set
    attack: set
    tpr: float
    fpr: float
    classes: dict = field(default_factory=dict)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "class", "score", "flagged"])
            for i in sorted(self.scores):
                w.writerow([i, self.classes.get(i, ""), repr(float(self.scores[i])), int(i in self.flagged)])


def report_top_k(name: str, scores: dict, attack, expected_attack: int, classes=None) -> DetectionReport:
    flagged, thr = top_k_flags(scores, expected_flag_count(expected_attack))
    tpr, fpr = tpr_fpr(flagged, attack, scores.keys())
    return DetectionReport(name, scores, thr, flagged, set(attack), tpr, fpr, classes or {})


def report_below(name: str, scores: dict, attack, threshold: float, classes=None) -> DetectionReport:
    flagged = {i for i, s in scores.items() if s < threshold}
    tpr, fpr = tpr_fpr(flagged, attack, scores.keys())
    return DetectionReport(name, scores, threshold, flagged, set(attack), tpr, fpr, classes or {})


# ---------------------------------------------------------------- cost monitor

STATISTICS = ("budget", "loss-change", "gradient-norm")


@dataclass(frozen=True)
class MonitorConfig:
    statistic: str = "budget"
    k: float = 3.0
    method: str = "neg-grad"
    tau: float = 1e-3  # step for the loss-change probe
    budget_lr: float = 0.5
    budget_iterations: int = 100

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigurationError("k must be positive")
        if self.statistic not in STATISTICS:
            raise ConfigurationError(f"unknown cost statistic {self.statistic!r}")


def mad_outliers(costs: Sequence[float], k: float):
    """Indices above median + k * MAD; nothing when MAD is zero."""
    costs = np.asarray(costs, dtype=np.float64)
    med = np.median(costs)
    mad = np.median(np.abs(costs - med))
    if mad == 0:
        return np.zeros(0, dtype=np.int64), math.inf
    thr = med + k * mad
    return np.flatnonzero(costs > thr), float(thr)


def request_costs(model: nn.Model, requests: Sequence[LabeledDataset], cfg: MonitorConfig,
                  reference: Optional[nn.Model] = None, holdout: Optional[LabeledDataset] = None) -> np.ndarray:
    """One cost per request (mean over the request's samples where relevant)."""
    from .unlearn import budget_analysis, unlearn_neg_grad

    out = []
    if cfg.statistic == "budget":
        if reference is None:
            raise ConfigurationError("budget statistic needs a reference model that never saw the requests")
        for r in requests:
            b = budget_analysis(model, reference, r.images, r.labels, cfg.budget_lr, cfg.budget_iterations)
            out.append(float(b.budgets.mean()))
    elif cfg.statistic == "gradient-norm":
        for r in requests:
            out.append(float(np.linalg.norm(nn.grad_params(model, r.images, r.labels, "sum"))))
    else:
        if holdout is None:
            raise ConfigurationError("loss-change statistic needs a holdout probe")
        base = nn.loss(model, holdout.images, holdout.labels)
        for r in requests:
            after = unlearn_neg_grad(model, r.images, r.labels, cfg.tau, 1)
            out.append(nn.loss(after, holdout.images, holdout.labels) - base)
    return np.asarray(out)


def unlearning_cost_monitor(model: nn.Model, requests: Sequence[LabeledDataset], cfg: MonitorConfig,
                            attack=(), reference=None, holdout=None, min_population: int = 10) -> DetectionReport:
    """Flag requests whose unlearning cost is an outlier (median + k MAD).

    Request identity in the report is its position in ``requests``;
    ``attack`` lists the positions of known-malicious requests for TPR/FPR.
    """
    if len(requests) < min_population:
        raise InsufficientPopulationError(f"need at least {min_population} requests, got {len(requests)}")
    costs = request_costs(model, requests, cfg, reference, holdout)
    idx, thr = mad_outliers(costs, cfg.k)
    flagged = set(int(i) for i in idx)
    scores = {i: float(c) for i, c in enumerate(costs)}
    attack = set(int(a) for a in attack)
    if attack:
        tpr, fpr = tpr_fpr(flagged, attack, scores.keys())
    else:
        tpr, fpr = float("nan"), len(flagged) / len(costs)
    return DetectionReport(f"cost-monitor/{cfg.statistic}", scores, thr, flagged, attack, tpr, fpr)
