"""Training losses, their weighted total, and a central-difference gradient checker.

Every loss is a batch mean rather than the dataset sum written in the
original formulation, except the difference loss which keeps its Frobenius
form (its zero set does not depend on the reduction).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .core import AblationFlags, ConfigError, LossWeights

EPS = 1e-12
DIFF_FORMS = ("sample", "feature")


@dataclass(frozen=True)
class LossReport:
    class_loss: float
    ctrs_loss: float
    rec_loss: float
    diff_loss: float
    total: float

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "class": self.class_loss,
            "ctrs": self.ctrs_loss,
            "rec": self.rec_loss,
            "diff": self.diff_loss,
            "total": self.total,
        }


def classification_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true class; probabilities are clamped at 1e-12."""
    true_prob = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -torch.log(true_prob.clamp_min(EPS)).mean()


def pair_index(labels) -> torch.Tensor:
    """All (i, j, same) triples with i < j over a batch of identity labels."""
    labels = torch.as_tensor(np.asarray(labels))
    i, j = torch.triu_indices(len(labels), len(labels), offset=1)
    same = (labels[i] == labels[j]).long()
    return torch.stack([i, j, same], dim=1)


def contrastive_loss(embeddings: torch.Tensor, pairs: torch.Tensor, margin: float) -> torch.Tensor:
    """Mean over pairs of  same * D^2 + (1 - same) * max(0, margin - D)^2.

    ``pairs`` is an (n_pairs, 3) integer tensor of (i, j, same) rows.
    """
    if margin <= 0:
        raise ConfigError("margin must be positive")
    pairs = torch.as_tensor(pairs)
    if pairs.numel() == 0:
        warnings.warn("contrastive loss on an empty pair list is defined as 0", RuntimeWarning, stacklevel=2)
        return embeddings.sum() * 0.0
    diff = embeddings[pairs[:, 0]] - embeddings[pairs[:, 1]]
    sq = (diff * diff).sum(dim=1)
    # epsilon keeps the hinge differentiable at D = 0 and only ever enlarges D
    dist = torch.sqrt(sq + EPS)
    same = pairs[:, 2].to(embeddings.dtype)
    hinge = torch.clamp(margin - dist, min=0.0)
    return (same * sq + (1.0 - same) * hinge * hinge).mean()


def contrastive_kink_distance(embeddings: torch.Tensor, pairs: torch.Tensor, margin: float) -> float:
    """How far the nearest dissimilar pair is from the hinge point D = margin."""
    pairs = torch.as_tensor(pairs)
    neg = pairs[pairs[:, 2] == 0]
    if len(neg) == 0:
        return math.inf
    dist = (embeddings[neg[:, 0]] - embeddings[neg[:, 1]]).norm(dim=1)
    return float((dist - margin).abs().min())


def reconstruction_loss(x_s, xhat_s, x_t, xhat_t) -> torch.Tensor:
    """Per-element squared error averaged over both domains' elements."""
    for x, xhat, name in ((x_s, xhat_s, "source"), (x_t, xhat_t, "target")):
        if x.shape != xhat.shape:
            raise ConfigError(f"{name} reconstruction shape {tuple(xhat.shape)} != {tuple(x.shape)}")
    sse = ((x_s - xhat_s) ** 2).sum() + ((x_t - xhat_t) ** 2).sum()
    return sse / (x_s.numel() + x_t.numel())


def _row_normalize(h: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((h * h).sum(dim=1, keepdim=True))
    return h / torch.clamp(norm, min=EPS)


def difference_loss(h_c_s, h_p_s, h_c_t, h_p_t, normalize: bool = True, form: str = "sample") -> torch.Tensor:
    """Squared Frobenius norm of the shared/private cross product, summed over domains.

    ``form="feature"`` uses ``H_c^T H_p`` (d x d): zero when every shared
    feature dimension is uncorrelated with every private one across the
    batch. ``form="sample"`` uses ``H_c H_p^T`` (n x n): zero exactly when
    every shared row is orthogonal to every private row. Both give 1 for a
    single sample whose shared and private rows coincide, and n^2 for n
    identical rows. Rows are L2-normalized first unless ``normalize`` is
    False, which makes the loss invariant to feature scale.
    """
    if form not in DIFF_FORMS:
        raise ConfigError(f"unknown difference-loss form {form!r}; expected one of {DIFF_FORMS}")
    total = h_c_s.new_zeros(())
    for hc, hp in ((h_c_s, h_p_s), (h_c_t, h_p_t)):
        if hc.shape[0] != hp.shape[0]:
            raise ConfigError(f"row counts differ: {hc.shape[0]} vs {hp.shape[0]}")
        if normalize:
            hc, hp = _row_normalize(hc), _row_normalize(hp)
        cross = hc.T @ hp if form == "feature" else hc @ hp.T
        total = total + cross.pow(2).sum()
    return total


def total_loss(terms: dict, weights: LossWeights, flags: AblationFlags) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the active terms; ablated terms are dropped from the graph entirely.

    ``terms`` maps ``class``, ``ctrs``, ``rec``, ``diff`` to scalar tensors
    (entries for inactive terms may be omitted).
    """
    active = {
        "class": (flags.use_class, 1.0),
        "ctrs": (flags.use_ctrs, weights.alpha),
        "rec": (flags.use_rec, weights.beta),
        "diff": (flags.use_diff and flags.use_private, weights.gamma),
    }
    total = None
    values = {}
    for name, (on, weight) in active.items():
        if not on:
            values[name] = 0.0
            continue
        term = terms[name]
        value = float(term.detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss: {value}")
        values[name] = value
        contribution = term if weight == 1.0 else weight * term
        total = contribution if total is None else total + contribution
    if total is None:
        total = torch.zeros(())
    report = LossReport(values["class"], values["ctrs"], values["rec"], values["diff"], float(total.detach()))
    if not math.isfinite(report.total):
        raise FloatingPointError(f"non-finite total loss: {report.total}")
    return total, report


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    epsilon: float
    num_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    num_coords: int = 100,
    rng: np.random.Generator | None = None,
    kink_distance: Callable[[torch.Tensor], float] | None = None,
    grad_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
    atol: float = 1e-7,
) -> GradCheckResult:
    """Compare the autograd gradient of ``loss_fn`` at ``point`` with central differences.

    A random subsample of ``num_coords`` coordinates (all of them if the
    point is smaller) is checked. When ``kink_distance`` is given, the point
    is jittered until it is at least 100 * epsilon away from any kink.
    ``grad_fn`` overrides autograd, which lets tests inject a wrong gradient.
    The error per coordinate is |a - n| / max(|a|, |n|, floor) where
    floor = max(atol, 1e-3 * max|a|): coordinates whose gradient is tiny
    next to the rest are judged on the gradient's own scale, because their
    central difference is dominated by roundoff in the loss value.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    point = point.detach().to(torch.float64).clone()
    if not torch.all(torch.isfinite(point)):
        raise FloatingPointError("gradient check point has non-finite entries")

    if kink_distance is not None:
        for _ in range(100):
            if kink_distance(point) > 100 * epsilon:
                break
            point = point + torch.from_numpy(rng.normal(scale=1e-3, size=point.shape))
        else:
            raise RuntimeError("could not move the check point away from a kink")

    if grad_fn is not None:
        analytic = grad_fn(point.clone()).detach().to(torch.float64).reshape(-1)
    else:
        x = point.clone().requires_grad_(True)
        value = loss_fn(x)
        if not torch.isfinite(value):
            raise FloatingPointError(f"loss is non-finite at the check point: {float(value)}")
        (grad,) = torch.autograd.grad(value, x)
        analytic = grad.reshape(-1)

    floor = max(atol, 1e-3 * float(analytic.abs().max()))
    n = point.numel()
    coords = np.arange(n) if n <= num_coords else rng.choice(n, size=num_coords, replace=False)
    flat = point.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for idx in coords:
            plus = flat.clone()
            minus = flat.clone()
            plus[idx] += epsilon
            minus[idx] -= epsilon
            f_plus = float(loss_fn(plus.view_as(point)))
            f_minus = float(loss_fn(minus.view_as(point)))
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"loss is non-finite near coordinate {int(idx)}")
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return GradCheckResult(worst, epsilon, len(coords), tolerance)


LOSS_NAMES = ("classification", "contrastive", "reconstruction", "difference")


def _check_problems(rng: np.random.Generator):
    """Small float64 instances of each loss as a function of one input tensor."""
    f64 = torch.float64
    labels = torch.as_tensor(rng.integers(0, 6, size=20))
    pair_labels = np.repeat(np.arange(4), 2)
    pairs = pair_index(pair_labels)
    x_s = torch.from_numpy(rng.normal(size=(3, 4, 3, 3)))
    x_t = torch.from_numpy(rng.normal(size=(2, 4, 3, 3)))
    n_s = x_s.numel()
    shapes = [(6, 5)] * 4

    def split_rows(flat):
        return [part.view(6, 5) for part in flat.split(30)]

    return {
        "classification": (
            lambda z: classification_loss(torch.softmax(z, dim=1), labels),
            torch.from_numpy(rng.normal(size=(20, 6))),
            None,
        ),
        "contrastive": (
            lambda e: contrastive_loss(e, pairs, 1.0),
            torch.from_numpy(rng.normal(scale=0.25, size=(8, 16))),
            lambda e: contrastive_kink_distance(e, pairs, 1.0),
        ),
        "reconstruction": (
            lambda h: reconstruction_loss(x_s, h[:n_s].view_as(x_s), x_t, h[n_s:].view_as(x_t)),
            torch.from_numpy(rng.normal(size=n_s + x_t.numel())),
            None,
        ),
        "difference": (
            lambda flat: difference_loss(*split_rows(flat)),
            torch.from_numpy(rng.normal(size=sum(a * b for a, b in shapes))).to(f64),
            None,
        ),
    }


def loss_gradient_checks(seed: int = 0, corrupt: str | None = None, **kwargs) -> dict[str, GradCheckResult]:
    """Run :func:`finite_difference_check` on every loss at float64.

    ``corrupt`` names a loss whose analytic gradient is deliberately scaled
    by 1.5, a hook for exercising the failure path.
    """
    if corrupt is not None and corrupt not in LOSS_NAMES:
        raise ConfigError(f"unknown loss {corrupt!r}; expected one of {LOSS_NAMES}")
    rng = np.random.default_rng(seed)
    results = {}
    for name, (fn, point, kink) in _check_problems(rng).items():
        grad_fn = None
        if name == corrupt:

            def grad_fn(x, fn=fn):
                x = x.clone().requires_grad_(True)
                (g,) = torch.autograd.grad(fn(x), x)
                return 1.5 * g

        results[name] = finite_difference_check(fn, point, rng=rng, kink_distance=kink, grad_fn=grad_fn, **kwargs)
    return results
