"""Approximate unlearning (first-order, second-order, negative-gradient, amnesiac) and budget analysis."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import nn
from .data import LabeledDataset, sample_digest
from .errors import (
    ConfigurationError,
    ConvergenceWarning,
    DimensionError,
    HashMismatchError,
    IdError,
)
from .ledger import UpdateLedger

METHODS = ("first-order", "second-order", "neg-grad", "amnesiac")

DEFAULT_TAU_GRID = {
    "first-order": tuple(float(t) for t in np.geomspace(1e-4, 1.0, 17)),
    "second-order": tuple(float(t) for t in np.geomspace(1e-8, 1e-2, 25)),
    "neg-grad": tuple(float(t) for t in np.geomspace(1e-6, 1e-1, 21)),
}


# ---------------------------------------------------------------- requests


@dataclass(frozen=True)
class Hyperparams:
    tau: float = 0.0
    steps: int = 1
    rounds: int = 1
    damping: float = 0.01
    cg_iters: int = 100
    cg_tol: float = 1e-4
    probe_size: int = 512
    substitute: str = "blur"  # or "zero"
    blur_sigma: float = 2.0
    reduction: str = "sum"  # or "mean"

    def __post_init__(self):
        if self.tau < 0 or self.steps < 0 or self.rounds < 1:
            raise ConfigurationError("tau and steps must be non-negative, rounds >= 1")
        if self.substitute not in ("blur", "zero"):
            raise ConfigurationError(f"unknown substitute {self.substitute!r}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")


@dataclass
class UnlearnRequest:
    """Forget either ``ids`` (resolved against the training set) or an explicit ``forget`` set."""

    method: str
    ids: Optional[Sequence[int]] = None
    forget: Optional[LabeledDataset] = None
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown unlearning method {self.method!r}")
        if (self.ids is None) == (self.forget is None):
            raise ConfigurationError("give exactly one of ids or forget")
        if self.ids is not None and len(self.ids) == 0 or self.forget is not None and len(self.forget) == 0:
            raise ConfigurationError("forget set must be non-empty")


def resolve_forget(request: UnlearnRequest, train: LabeledDataset, digests: dict) -> LabeledDataset:
    """Check the request against the provider's content digests and return the forget set.

    An explicit forget set must match stored digests sample-by-sample; this is
    how a tampered or foreign sample is rejected.
    """
    if request.ids is not None:
        missing = [int(i) for i in request.ids if int(i) not in digests]
        if missing:
            raise IdError(f"unknown sample ids {missing[:5]}")
        forget = train.select_ids(request.ids)
    else:
        forget = request.forget
    for i, x, y in zip(forget.ids, forget.images, forget.labels):
        stored = digests.get(int(i))
        if stored is None:
            raise IdError(f"unknown sample id {int(i)}")
        if stored != sample_digest(x, y):
            raise HashMismatchError(f"sample {int(i)} does not match its training-set digest")
    return forget


def blur_substitute(images, sigma: float = 2.0) -> np.ndarray:
    """Per-image Gaussian blur over the two spatial axes."""
    images = np.asarray(images, dtype=np.float64)
    return ndimage.gaussian_filter(images, sigma=(0, 0, sigma, sigma), mode="constant")


def make_substitute(images, hyper: Hyperparams) -> np.ndarray:
    if hyper.substitute == "zero":
        return np.zeros_like(np.asarray(images, dtype=np.float64))
    return blur_substitute(images, hyper.blur_sigma)


# ---------------------------------------------------------------- first / second order


def _check_substitute(forget_images, substitute):
    if np.shape(substitute) != np.shape(forget_images):
        raise DimensionError(f"substitute shape {np.shape(substitute)} != forget shape {np.shape(forget_images)}")


def removal_gradient(model, images, labels, substitute, reduction="sum") -> np.ndarray:
    """g = sum grad loss(x~) - sum grad loss(x)."""
    _check_substitute(images, substitute)
    return nn.grad_params(model, substitute, labels, reduction) - nn.grad_params(model, images, labels, reduction)


def unlearn_first_order(model, images, labels, substitute, tau: float, rounds: int = 1, reduction="sum") -> nn.Model:
    """theta <- theta - tau * g, once per round (g recomputed each round)."""
    _check_substitute(images, substitute)
    out = model.copy()
    for _ in range(rounds):
        if tau == 0:
            break
        out.params = out.params - tau * removal_gradient(out, images, labels, substitute, reduction)
    return out


@dataclass
class CGResult:
    solution: np.ndarray
    residual: float  # ||(A)x - b|| / ||b||
    iterations: int
    converged: bool


def conjugate_gradient(matvec: Callable, b, maxiter: int = 100, tol: float = 1e-4) -> CGResult:
    """Plain CG for a symmetric positive-definite operator, relative-residual stopping."""
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0:
        return CGResult(x, 0.0, 0, True)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    it = 0
    for it in range(1, maxiter + 1):
        ap = matvec(p)
        curv = p @ ap
        if curv <= 0:
            warnings.warn("non-positive curvature in CG; stopping early", ConvergenceWarning, stacklevel=2)
            break
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = r @ r
        if np.sqrt(rs_new) / bnorm < tol:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    true_res = float(np.linalg.norm(matvec(x) - b) / bnorm)
    return CGResult(x, true_res, it, true_res < tol)


def damped_hessian_solve(model, probe_images, probe_labels, g, damping=0.01, maxiter=100, tol=1e-4) -> CGResult:
    """Solve (H + damping I) v = g with H the mean-loss Hessian on the probe batch."""

    def matvec(v):
        return nn.hvp(model, probe_images, probe_labels, v) + damping * v

    result = conjugate_gradient(matvec, g, maxiter, tol)
    if not result.converged:
        warnings.warn(
            f"CG stopped at relative residual {result.residual:.2e} after {result.iterations} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    return result


def unlearn_second_order(
    model, images, labels, substitute, probe_images, probe_labels, damping=0.01, cg_iters=100, cg_tol=1e-4,
    tau: float = 1.0, reduction="sum",
):
    """theta <- theta - tau * (H + damping I)^-1 g.

    Returns ``(model, CGResult)``; a non-converged solve still applies the update.
    """
    g = removal_gradient(model, images, labels, substitute, reduction)
    cg = damped_hessian_solve(model, probe_images, probe_labels, g, damping, cg_iters, cg_tol)
    return model.with_params(model.params - tau * cg.solution), cg


# ---------------------------------------------------------------- negative gradient / amnesiac


def unlearn_neg_grad(model, images, labels, tau: float, steps: int = 1, reduction="sum") -> nn.Model:
    """Gradient ascent on the forget-set loss: theta <- theta + tau * sum grad loss(x), ``steps`` times."""
    if len(images) == 0:
        raise ConfigurationError("forget set must be non-empty")
    out = model.copy()
    for _ in range(steps):
        if tau == 0:
            break
        out.params = out.params + tau * nn.grad_params(out, images, labels, reduction)
    return out


def unlearn_amnesiac(initial, ledger: UpdateLedger, forget_ids, template: Optional[nn.Model] = None) -> nn.Model:
    """Rebuild the parameters from the initial vector plus every update not touching ``forget_ids``.

    Forgetting nothing reproduces the final parameters and forgetting every
    recorded id reproduces the initial parameters, both bitwise.
    """
    forget_ids = set(int(i) for i in forget_ids)
    unknown = forget_ids - ledger.all_ids()
    if unknown:
        raise IdError(f"ids never seen in training: {sorted(unknown)[:5]}")
    initial = np.asarray(initial, dtype=np.float64)
    kept = [e for e in ledger.entries if not forget_ids.intersection(e.member_ids)]
    # nothing kept: return the initial vector itself (x + 0.0 would turn -0.0 into +0.0)
    params = initial + ledger.total(lambda e: not forget_ids.intersection(e.member_ids)) if kept else initial.copy()
    if template is None:
        return params
    return template.with_params(params)


# ---------------------------------------------------------------- dispatch


@dataclass
class UnlearnContext:
    """Everything besides the forget set that a method may need."""

    train: LabeledDataset
    digests: dict
    ledger: Optional[UpdateLedger] = None
    probe_seed: int = 0


def retained_probe(ctx: UnlearnContext, forget_ids, size: int):
    retained = ctx.train.drop_ids(forget_ids)
    rng = np.random.default_rng(ctx.probe_seed)
    idx = np.sort(rng.choice(len(retained), min(size, len(retained)), replace=False))
    return retained.images[idx], retained.labels[idx]


@dataclass
class UnlearnOutcome:
    model: nn.Model
    notes: list = field(default_factory=list)
    cg: Optional[CGResult] = None


def run_unlearning(model: nn.Model, request: UnlearnRequest, ctx: UnlearnContext) -> UnlearnOutcome:
    forget = resolve_forget(request, ctx.train, ctx.digests)
    h = request.hyper
    x, y = forget.images, forget.labels
    if request.method == "first-order":
        return UnlearnOutcome(unlearn_first_order(model, x, y, make_substitute(x, h), h.tau, h.rounds, h.reduction))
    if request.method == "neg-grad":
        return UnlearnOutcome(unlearn_neg_grad(model, x, y, h.tau, h.steps * h.rounds, h.reduction))
    if request.method == "second-order":
        px, py = retained_probe(ctx, forget.ids, h.probe_size)
        current, notes, cg = model, [], None
        for _ in range(h.rounds):
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConvergenceWarning)
                current, cg = unlearn_second_order(
                    current, x, y, make_substitute(x, h), px, py, h.damping, h.cg_iters, h.cg_tol, h.tau, h.reduction
                )
            notes += [str(w.message) for w in caught if issubclass(w.category, ConvergenceWarning)]
        return UnlearnOutcome(current, notes, cg)
    if ctx.ledger is None:
        raise ConfigurationError("amnesiac unlearning needs a recorded update ledger")
    return UnlearnOutcome(unlearn_amnesiac(ctx.ledger.initial, ctx.ledger, forget.ids, model))


# ---------------------------------------------------------------- reports / multi-round / tuning


@dataclass
class UnlearnReport:
    method: str
    hyper: Hyperparams
    acc_test_before: float
    acc_test_after: float
    acc_train_before: float
    acc_train_after: float
    trace: list = field(default_factory=list)  # test accuracy after each round
    notes: list = field(default_factory=list)

    @property
    def drop(self) -> float:
        return self.acc_test_before - self.acc_test_after


def evaluate_unlearning(model, request, ctx, test: LabeledDataset) -> UnlearnReport:
    """Single unlearning run with accuracies on the test set and the retained training data."""
    forget = resolve_forget(request, ctx.train, ctx.digests)
    retained = ctx.train.drop_ids(forget.ids)
    outcome = run_unlearning(model, request, ctx)
    after = nn.accuracy(outcome.model, test.images, test.labels)
    return UnlearnReport(
        request.method,
        request.hyper,
        nn.accuracy(model, test.images, test.labels),
        after,
        nn.accuracy(model, retained.images, retained.labels),
        nn.accuracy(outcome.model, retained.images, retained.labels),
        [after],
        outcome.notes,
    )


def multi_round(model, request: UnlearnRequest, ctx: UnlearnContext, test: LabeledDataset, rounds: int) -> list:
    """Apply the method ``rounds`` times in sequence; test accuracy after each round."""
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    single = UnlearnRequest(request.method, request.ids, request.forget, _with(request.hyper, rounds=1))
    trace, current = [], model
    for _ in range(rounds):
        current = run_unlearning(current, single, ctx).model
        trace.append(nn.accuracy(current, test.images, test.labels))
    return trace


def _with(h: Hyperparams, **kw) -> Hyperparams:
    d = dict(h.__dict__)
    d.update(kw)
    return Hyperparams(**d)


@dataclass
class Tuning:
    tau: float
    steps: int
    drops: dict  # (steps, tau) -> normal-data test-accuracy drop
    forget_loss: dict  # steps -> normal forget-set loss at that steps' largest admissible tau


def tune_tau(model, method: str, normal_ids, ctx: UnlearnContext, test: LabeledDataset, grid=None,
             base: Optional[Hyperparams] = None, max_drop: float = 0.02, steps_grid=None) -> Tuning:
    """Largest tau in ``grid`` whose normal-data unlearning drops test accuracy by at most ``max_drop``.

    With several ``steps_grid`` entries (negative gradient only) the largest
    admissible tau is found per steps value, and the pair leaving the highest
    loss on the normal forget set (the most thorough unlearning) wins.
    """
    base = base or Hyperparams()
    grid = sorted(grid or DEFAULT_TAU_GRID[method])
    steps_grid = sorted(steps_grid or [base.steps]) if method == "neg-grad" else [base.steps]
    forget = ctx.train.select_ids(normal_ids)
    before = nn.accuracy(model, test.images, test.labels)
    drops, losses, best = {}, {}, {}
    solution = None
    if method == "second-order":
        # one CG solve serves every tau
        px, py = retained_probe(ctx, forget.ids, base.probe_size)
        g = removal_gradient(model, forget.images, forget.labels, make_substitute(forget.images, base), base.reduction)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            solution = damped_hessian_solve(model, px, py, g, base.damping, base.cg_iters, base.cg_tol).solution
    for steps in steps_grid:
        best[steps] = 0.0
        for tau in grid:
            h = _with(base, tau=tau, steps=steps)
            if solution is not None:
                after = model.with_params(model.params - tau * solution)
            else:
                after = run_unlearning(model, UnlearnRequest(method, list(normal_ids), hyper=h), ctx).model
            drops[(steps, tau)] = before - nn.accuracy(after, test.images, test.labels)
            if drops[(steps, tau)] > max_drop + 1e-12:
                break
            best[steps] = tau
            losses[steps] = nn.loss(after, forget.images, forget.labels)
    ranked = sorted(best, key=lambda s: (-losses.get(s, -np.inf), s))
    steps = ranked[0]
    return Tuning(best[steps], steps, drops, losses)


# ---------------------------------------------------------------- budget


@dataclass
class BudgetResult:
    delta: np.ndarray
    budgets: np.ndarray  # per-sample sum |delta|
    initial_gaps: np.ndarray
    final_gaps: np.ndarray
    flagged: np.ndarray  # samples aborted on non-finite loss

    @property
    def total(self) -> float:
        return float(self.budgets.sum())

    def closed_fraction(self, threshold: float = 0.1) -> float:
        """Fraction of samples whose final gap is below ``threshold`` x their initial gap."""
        ok = (np.abs(self.final_gaps) <= threshold * np.abs(self.initial_gaps)) | (self.initial_gaps == 0)
        return float(np.mean(ok & ~self.flagged))


def budget_analysis(model_seen, model_unseen, images, labels, lr: float = 0.5, iterations: int = 100,
                    tol: float = 1e-6) -> BudgetResult:
    """Per-sample perturbation making the seen model's loss match the unseen model's loss.

    Minimizes r(delta)^2 with r = loss_seen(x + delta) - loss_unseen(x) by
    gradient descent, x + delta projected onto [0, 1]. Each sample's step is
    scaled by ``1 / (2 ||grad r||^2)`` so ``lr = 1`` is a full Gauss-Newton
    step on the residual; samples are optimized jointly but independently.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    target = nn.per_sample_loss(model_unseen, images, labels)
    delta = np.zeros_like(images)
    gap0 = nn.per_sample_loss(model_seen, images, labels) - target
    flagged = ~np.isfinite(gap0)
    active = (np.abs(gap0) > tol) & ~flagged
    for _ in range(iterations):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        x = images[idx] + delta[idx]
        gap = nn.per_sample_loss(model_seen, x, labels[idx]) - target[idx]
        bad = ~np.isfinite(gap)
        flagged[idx[bad]] = True
        active[idx[bad | (np.abs(gap) <= tol)]] = False
        keep = ~bad & (np.abs(gap) > tol)
        idx, x, gap = idx[keep], x[keep], gap[keep]
        if len(idx) == 0:
            break
        # rows of the summed-loss input gradient are the per-sample gradients
        gx = nn.grad_input(model_seen, x, labels[idx], reduction="sum")
        sq = np.maximum((gx.reshape(len(idx), -1) ** 2).sum(axis=1), 1e-12)
        grad_obj = 2.0 * gap[:, None, None, None] * gx
        step = lr * grad_obj / (2.0 * sq)[:, None, None, None]
        delta[idx] = np.clip(x - step, 0.0, 1.0) - images[idx]
    final = nn.per_sample_loss(model_seen, images + delta, labels) - target
    budgets = np.abs(delta).reshape(len(images), -1).sum(axis=1)
    return BudgetResult(delta, budgets, gap0, final, flagged)
