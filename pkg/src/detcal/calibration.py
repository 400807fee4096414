"""Train-time calibration mechanisms with analytic gradients.

The pipeline: per-class uncertainty is the variance of the decoder logit stack
across layers; the final layer is down-scaled elementwise by 1 - tanh(u);
positive-query logits are mixed toward their per-sample prototype (the mean
over positives) and scored against correspondingly smoothed labels by a
regularizer that joins the classification loss as L_cls + lambda * L_R.

No autodiff: every (loss, grad) pair here is hand-derived, including the full
chain rule through the variance and tanh when the joint loss back-propagates
into the whole layer stack. Gradients are checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence, Union

import numpy as np

from .tensors import ALGEBRAIC_TOL, Tensor, sigmoid_array, variance_along_first_axis


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the calibration mechanisms and the toy trainer.

    alpha is the per-query own weight in logit mixing (the prototype gets
    1 - alpha); lambda_reg scales the mixing regularizer; focal_gamma is the
    focusing exponent of the classification loss; bins and iou_k parameterize
    evaluation. alpha_beta, when set, draws the mixing weight per sample from
    Beta(alpha_beta, alpha_beta) instead of using the fixed alpha.
    """

    alpha: float = 0.9
    lambda_reg: float = 0.5
    focal_gamma: float = 2.0
    bins: int = 10
    iou_k: float = 0.5
    seed: int = 0
    regularizer_base: str = "focal"  # or "softmax_ce"
    stop_uncertainty_grad: bool = False
    alpha_beta: Optional[float] = None
    modulate_at_eval: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.lambda_reg < 0.0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.focal_gamma < 0.0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.bins < 1:
            raise ValueError(f"bins must be >= 1, got {self.bins}")
        if not 0.0 < self.iou_k <= 1.0:
            raise ValueError(f"iou_k must lie in (0, 1], got {self.iou_k}")
        if self.regularizer_base not in ("focal", "softmax_ce"):
            raise ValueError(f"unknown regularizer base {self.regularizer_base!r}")
        if self.alpha_beta is not None and self.alpha_beta <= 0.0:
            raise ValueError(f"alpha_beta must be > 0, got {self.alpha_beta}")

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)}, indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PositiveQuerySet:
    """Query slots assigned to objects, with their 0-based class columns."""

    indices: tuple[int, ...]
    classes: tuple[int, ...]

    def __init__(self, indices: Sequence[int], classes: Sequence[int]):
        indices = tuple(int(i) for i in indices)
        classes = tuple(int(c) for c in classes)
        if len(indices) != len(classes):
            raise ValueError("indices and classes must have equal length")
        if len(set(indices)) != len(indices):
            raise ValueError(f"query indices must be unique, got {indices}")
        if any(i < 0 for i in indices) or any(c < 0 for c in classes):
            raise ValueError("indices and classes must be non-negative")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "classes", classes)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class SmoothedLabel:
    """Per-class target weights forming a distribution."""

    weights: Tensor

    def __post_init__(self):
        arr = self.weights.array
        if arr.ndim != 1:
            raise ValueError(f"label weights must be 1-D, got shape {self.weights.shape}")
        if np.any(arr < 0):
            raise ValueError("label weights must be non-negative")
        if abs(arr.sum() - 1.0) > ALGEBRAIC_TOL * max(1, arr.size):
            raise ValueError(f"label weights must sum to 1, got {arr.sum()!r}")


def quantify_uncertainty(all_layers: Tensor) -> Tensor:
    """Per-logit uncertainty: population variance across the layer axis."""
    return variance_along_first_axis(all_layers)


def modulate_logits(final_layer: Tensor, u: Tensor) -> Tensor:
    """Down-scale logits elementwise by the certainty factor 1 - tanh(u)."""
    if final_layer.shape != u.shape:
        raise ValueError(f"shape mismatch: {final_layer.shape} vs {u.shape}")
    ua = u.array
    if np.any(ua < 0):
        raise ValueError("uncertainty must be non-negative")
    return Tensor.from_array(final_layer.array * (1.0 - np.tanh(ua)))


def mix_logits(queries: Sequence[Tensor], alpha: float) -> list[Tensor]:
    """Convex-combine each positive query's logits with their mean prototype.

    alpha = 1 and the single-query case are exact identities (no arithmetic).
    The mean over the set is preserved by construction.
    """
    if not queries:
        raise ValueError("no positive queries")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0 or len(queries) == 1:
        return list(queries)
    proto = np.stack([q.array for q in queries]).mean(axis=0)
    return [Tensor.from_array(alpha * q.array + (1.0 - alpha) * proto) for q in queries]


def mix_logits_grad(grads_mixed: np.ndarray, alpha: float) -> np.ndarray:
    """Chain rule of mix_logits: rows of dL/d(mixed) -> rows of dL/d(pre-mix)."""
    n = grads_mixed.shape[0]
    if alpha == 1.0 or n == 1:
        return grads_mixed
    return alpha * grads_mixed + (1.0 - alpha) * grads_mixed.mean(axis=0, keepdims=True)


def smoothed_labels(pqs: PositiveQuerySet, alpha: float, n_classes: int) -> list[SmoothedLabel]:
    """Targets for mixed logits: alpha on the own class, the remaining
    1 - alpha split uniformly over the other positive queries, each share
    landing on that query's class (shares to a repeated class accumulate).
    """
    if len(pqs) == 0:
        raise ValueError("no positive queries")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if any(c >= n_classes for c in pqs.classes):
        raise ValueError(f"class id out of range for {n_classes} classes")
    p = len(pqs)
    labels = []
    if p == 1:
        w = np.zeros(n_classes)
        w[pqs.classes[0]] = 1.0
        return [SmoothedLabel(Tensor.from_array(w))]
    share = (1.0 - alpha) / (p - 1)
    hist = np.zeros(n_classes)
    for c in pqs.classes:
        hist[c] += share
    for c in pqs.classes:
        w = hist.copy()
        w[c] += alpha - share
        labels.append(SmoothedLabel(Tensor.from_array(w)))
    return labels


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _focal_parts(x: np.ndarray, t: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise sigmoid focal loss and its logit gradient for soft targets.

    loss = (1 - p_t)^gamma * BCE(x, t) with p_t = p*t + (1-p)*(1-t);
    gamma = 0 reduces to the plain weighted binary cross-entropy exactly.
    """
    p = sigmoid_array(x)
    bce = t * _softplus(-x) + (1.0 - t) * _softplus(x)
    one_minus_pt = t * (1.0 - p) + (1.0 - t) * p
    if gamma == 0.0:
        return bce, p - t
    w = one_minus_pt**gamma
    loss = w * bce
    grad = w * (p - t)
    # d(1-p_t)^gamma term; vanishes with the loss when 1-p_t hits exact zero.
    safe = np.where(one_minus_pt > 0.0, one_minus_pt, 1.0)
    grad = grad - np.where(
        one_minus_pt > 0.0,
        gamma * safe ** (gamma - 1.0) * (2.0 * t - 1.0) * p * (1.0 - p) * bce,
        0.0,
    )
    return loss, grad


TargetLike = Union[SmoothedLabel, Tensor, Sequence[float], np.ndarray]


def _target_array(target: TargetLike, n_classes: int) -> np.ndarray:
    if isinstance(target, SmoothedLabel):
        arr = target.weights.array
    elif isinstance(target, Tensor):
        arr = target.array
    else:
        arr = np.asarray(target, dtype=np.float64)
    if arr.shape != (n_classes,):
        raise ValueError(f"target shape {arr.shape} does not match {n_classes} classes")
    return arr


def focal_loss(logits: Tensor, target: TargetLike, gamma: float) -> tuple[float, Tensor]:
    """Sigmoid focal loss summed over classes, with its analytic gradient."""
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    x = logits.array
    if x.ndim != 1:
        raise ValueError(f"logits must be 1-D, got shape {logits.shape}")
    t = _target_array(target, x.size)
    loss, grad = _focal_parts(x, t, gamma)
    return float(loss.sum()), Tensor.from_array(grad)


def _softmax_ce_parts(x: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = x - x.max()
    logz = math.log(np.exp(shifted).sum())
    logp = shifted - logz
    return float(-(t * logp).sum()), np.exp(logp) - t


def regularizer_loss(
    mixed_logits: Sequence[Tensor],
    labels: Sequence[SmoothedLabel],
    gamma: float,
    base: str = "focal",
) -> tuple[float, list[Tensor]]:
    """Mean per-query loss of mixed logits against smoothed labels.

    Returns gradients w.r.t. the mixed logits as given; composing with
    mix_logits_grad carries them back to the pre-mix queries.
    """
    if len(mixed_logits) != len(labels):
        raise ValueError(
            f"got {len(mixed_logits)} logit rows but {len(labels)} labels"
        )
    if not mixed_logits:
        raise ValueError("no positive queries")
    n = len(mixed_logits)
    total = 0.0
    grads = []
    for logit, label in zip(mixed_logits, labels):
        t = label.weights.array
        if base == "focal":
            loss, grad = _focal_parts(logit.array, t, gamma)
            total += float(loss.sum())
            grads.append(Tensor.from_array(grad / n))
        elif base == "softmax_ce":
            loss, grad = _softmax_ce_parts(logit.array, t)
            total += loss
            grads.append(Tensor.from_array(grad / n))
        else:
            raise ValueError(f"unknown regularizer base {base!r}")
    return total / n, grads


@dataclass(frozen=True)
class JointLossResult:
    loss: float
    grad_all_layers: Tensor
    l_cls: float
    l_reg: float


def joint_loss(
    all_layers: Tensor,
    assignments: Sequence[PositiveQuerySet],
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    modulate: bool = True,
) -> JointLossResult:
    """Full calibration objective L_cls + lambda * L_R on a logit stack.

    all_layers has shape (L, M, Q, C); assignments holds one positive-query
    set per batch element. The final layer is modulated by 1 - tanh(var over
    layers); L_cls is the focal loss of the modulated logits against hard
    labels averaged over all M*Q slots (negatives target all-zeros); L_R is
    the mixing regularizer averaged over all positive queries in the batch.
    The returned gradient covers the whole stack: the final-layer slice gets
    the direct path, every layer gets the variance path (unless
    cfg.stop_uncertainty_grad shuts it off). ``modulate=False`` bypasses the
    uncertainty factor entirely (the mixing-only ablation arm).
    """
    x = all_layers.array
    if x.ndim != 4:
        raise ValueError(f"expected an (L, M, Q, C) stack, got shape {all_layers.shape}")
    n_layers, n_batch, n_queries, n_classes = x.shape
    if len(assignments) != n_batch:
        raise ValueError(f"got {len(assignments)} assignments for batch of {n_batch}")
    for pqs in assignments:
        if any(q >= n_queries for q in pqs.indices):
            raise ValueError("positive query index out of range")
        if any(c >= n_classes for c in pqs.classes):
            raise ValueError("positive class id out of range")

    mu = x.mean(axis=0)
    u = ((x - mu) ** 2).mean(axis=0)
    xf = x[-1]
    if modulate:
        certainty = 1.0 - np.tanh(u)
        modulated = xf * certainty
    else:
        certainty = np.ones_like(u)
        modulated = xf

    targets = np.zeros_like(modulated)
    for m, pqs in enumerate(assignments):
        for q, c in zip(pqs.indices, pqs.classes):
            targets[m, q, c] = 1.0

    n_slots = n_batch * n_queries
    cls_loss_elem, cls_grad_elem = _focal_parts(modulated, targets, cfg.focal_gamma)
    l_cls = float(cls_loss_elem.sum()) / n_slots
    grad_mod = cls_grad_elem / n_slots

    l_reg = 0.0
    if cfg.lambda_reg > 0.0:
        n_pos_total = sum(len(p) for p in assignments)
        if n_pos_total > 0:
            reg_total = 0.0
            for m, pqs in enumerate(assignments):
                if len(pqs) == 0:
                    continue
                alpha = cfg.alpha
                if cfg.alpha_beta is not None:
                    if rng is None:
                        raise ValueError("alpha_beta sampling requires an rng")
                    alpha = min(max(rng.beta(cfg.alpha_beta, cfg.alpha_beta), 1e-9), 1.0)
                rows = [Tensor.from_array(modulated[m, q]) for q in pqs.indices]
                mixed = mix_logits(rows, alpha)
                labels = smoothed_labels(pqs, alpha, n_classes)
                g_mixed = np.zeros((len(pqs), n_classes))
                for i, (row, label) in enumerate(zip(mixed, labels)):
                    t = label.weights.array
                    if cfg.regularizer_base == "focal":
                        loss_elem, grad_elem = _focal_parts(row.array, t, cfg.focal_gamma)
                        reg_total += float(loss_elem.sum())
                    else:
                        loss_i, grad_elem = _softmax_ce_parts(row.array, t)
                        reg_total += loss_i
                    g_mixed[i] = grad_elem
                g_pre = mix_logits_grad(g_mixed / n_pos_total, alpha)
                for i, q in enumerate(pqs.indices):
                    grad_mod[m, q] += cfg.lambda_reg * g_pre[i]
            l_reg = reg_total / n_pos_total

    grad_final = grad_mod * certainty
    grad_all = np.zeros_like(x)
    grad_all[-1] = grad_final
    if modulate and not cfg.stop_uncertainty_grad:
        # dL/du through the certainty factor, then du/dx_l = (2/L)(x_l - mu).
        s = grad_mod * xf * (np.tanh(u) ** 2 - 1.0)
        grad_all += s * (2.0 / n_layers) * (x - mu)

    total = l_cls + cfg.lambda_reg * l_reg
    return JointLossResult(
        loss=total,
        grad_all_layers=Tensor.from_array(grad_all),
        l_cls=l_cls,
        l_reg=l_reg,
    )


def _nll(logits: np.ndarray, labels: np.ndarray, temperature: float, mode: str) -> float:
    z = logits / temperature
    if mode == "softmax-NLL":
        shifted = z - z.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return float(np.sum(logz - shifted[np.arange(len(labels)), labels]))
    if mode == "sigmoid-NLL":
        t = np.zeros_like(z)
        t[np.arange(len(labels)), labels] = 1.0
        return float(np.sum(t * _softplus(-z) + (1.0 - t) * _softplus(z)))
    raise ValueError(f"unknown temperature mode {mode!r}")


def fit_temperature(
    logits: Union[Sequence[Tensor], np.ndarray],
    labels: Sequence[int],
    mode: str = "softmax-NLL",
    lo: float = 0.05,
    hi: float = 20.0,
    tol: float = 1e-4,
) -> float:
    """Scalar temperature minimizing held-out NLL of logits / T.

    Golden-section search over [lo, hi] to absolute tolerance tol. Division
    by a positive scalar never reorders a row, so argmaxes are unchanged.
    """
    if isinstance(logits, np.ndarray):
        arr = np.asarray(logits, dtype=np.float64)
    else:
        arr = np.stack([t.array for t in logits]) if len(logits) else np.zeros((0, 1))
    if arr.size == 0:
        raise ValueError("no samples")
    y = np.asarray(labels, dtype=np.int64)
    if arr.shape[0] != y.shape[0]:
        raise ValueError(f"got {arr.shape[0]} logit rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= arr.shape[1]):
        raise ValueError("label out of range")

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _nll(arr, y, c, mode)
    fd = _nll(arr, y, d, mode)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _nll(arr, y, c, mode)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _nll(arr, y, d, mode)
    return (a + b) / 2.0


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return np.asarray(logits, dtype=np.float64) / temperature
