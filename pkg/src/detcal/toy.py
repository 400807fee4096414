"""Desk-scale synthetic experiment for the four-arm calibration ablation.

Scenes are bags of Q query feature vectors; a few slots carry class-cluster
samples (the objects), the rest are background noise. A fraction of object
labels is flipped to another class, so a model driven to full confidence is
measurably overconfident. The model is a shared affine+tanh trunk with one
linear head per "decoder layer"; cross-head variance supplies the uncertainty
signal. Training is plain full-batch gradient descent over hand-derived
gradients, so runs are bit-reproducible given a seed.

The four modes insert mechanisms into an otherwise identical graph:
baseline = focal only, mod_only adds uncertainty modulation, mix_only adds
the mixing regularizer, full adds both. Non-final heads always receive the
same auxiliary focal supervision in every mode, which keeps the arms
comparable and gives the layer stack meaningful (non-degenerate) variance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from .calibration import PositiveQuerySet, TrainConfig, _focal_parts, joint_loss
from .geometry import Box, Detection, MatchedDetection, hungarian_assign
from .metrics import CalibrationReport, d_ece, d_uce
from .tensors import Tensor, sigmoid_array

MODES = ("baseline", "mod_only", "mix_only", "full")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticScene:
    features: np.ndarray  # (Q, F_in), read-only
    gt_classes: tuple[int, ...]  # labels after noise flips
    gt_assignment: tuple[int, ...]  # query slot per object, unique
    flip_noise: float
    cluster_classes: tuple[int, ...] = ()  # pre-flip classes, for diagnostics

    def __post_init__(self):
        if len(set(self.gt_assignment)) != len(self.gt_assignment):
            raise ValueError("assignment slots must be unique")
        if any(s >= self.features.shape[0] for s in self.gt_assignment):
            raise ValueError("assignment slot out of range")
        self.features.setflags(write=False)


@dataclass(frozen=True)
class ToyConfig:
    """Scale and schedule of the synthetic experiment."""

    n_scenes: int = 200
    queries: int = 8
    classes: int = 4
    layers: int = 3
    feat_in: int = 16
    feat_hidden: int = 24
    epochs: int = 300
    step: float = 0.05
    flip_noise: float = 0.2
    max_objects: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_json(self) -> str:
        obj = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        obj["train"] = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        return json.dumps(obj, indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "ToyConfig":
        obj = dict(obj)
        train = TrainConfig.from_dict(obj.pop("train", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(train=train, **obj)

    @classmethod
    def from_json(cls, text: str) -> "ToyConfig":
        return cls.from_dict(json.loads(text))


def generate_dataset(
    n_scenes: int,
    queries: int,
    classes: int,
    flip_noise: float,
    seed: int,
    feat_in: int = 16,
    max_objects: int = 4,
    center_scale: float = 2.5,
    center_seed: Optional[int] = None,
) -> list[SyntheticScene]:
    """Deterministic per-class Gaussian-cluster scenes with label flips.

    Flipped labels are reassigned uniformly among the other classes, so the
    empirical flip fraction concentrates on flip_noise itself. The cluster
    centers define the task: pass the same center_seed to draw train and
    held-out sets from one task while varying the scene seed.
    """
    if not 0.0 <= flip_noise < 0.5:
        raise ValueError(f"flip_noise must lie in [0, 0.5), got {flip_noise}")
    if max_objects > queries:
        raise ValueError("max_objects cannot exceed the number of queries")
    center_rng = np.random.default_rng(seed if center_seed is None else center_seed)
    centers = center_rng.normal(0.0, 1.0, (classes, feat_in)) * center_scale
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n_scenes):
        n_obj = int(rng.integers(1, max_objects + 1))
        slots = tuple(int(s) for s in rng.choice(queries, size=n_obj, replace=False))
        true_classes = rng.integers(0, classes, size=n_obj)
        feats = rng.normal(0.0, 1.0, (queries, feat_in))
        for slot, c in zip(slots, true_classes):
            feats[slot] += centers[c]
        labels = []
        for c in true_classes:
            if rng.random() < flip_noise:
                shift = int(rng.integers(1, classes))
                labels.append(int((c + shift) % classes))
            else:
                labels.append(int(c))
        scenes.append(
            SyntheticScene(
                features=feats,
                gt_classes=tuple(labels),
                gt_assignment=slots,
                flip_noise=flip_noise,
                cluster_classes=tuple(int(c) for c in true_classes),
            )
        )
    return scenes


def positive_queries(scene: SyntheticScene) -> PositiveQuerySet:
    """Unique query-object assignment via minimum feature-distance cost.

    Boxes are not modeled, so squared feature distance stands in for the
    localization cost; the generated slots have zero self-distance, making
    recovery exact while still exercising the assignment path.
    """
    n_obj = len(scene.gt_classes)
    obj_feats = scene.features[list(scene.gt_assignment)]
    diff = obj_feats[:, None, :] - scene.features[None, :, :]
    cost = (diff**2).sum(axis=2)
    pairs = hungarian_assign(Tensor.from_array(cost))
    slot_for_obj = {o: q for o, q in pairs}
    return PositiveQuerySet(
        indices=[slot_for_obj[o] for o in range(n_obj)],
        classes=list(scene.gt_classes),
    )


@dataclass
class ToyModel:
    """Shared trunk with one linear class head per decoder layer."""

    trunk_w: np.ndarray  # (F_in, F_hidden)
    trunk_b: np.ndarray  # (F_hidden,)
    head_w: np.ndarray  # (L, F_hidden, C)
    head_b: np.ndarray  # (L, C)

    @classmethod
    def initialize(
        cls,
        layers: int,
        feat_in: int,
        feat_hidden: int,
        classes: int,
        seed: int,
        head_spread: float = 0.3,
    ) -> "ToyModel":
        """Heads start as one shared base plus a small per-layer perturbation.

        Decoder layers in the real pipeline emit correlated refinements of the
        same queries, so their initial cross-layer variance is small;
        independent head inits would instead start with the uncertainty gate
        partially closed, starving ungated logits of gradient.
        """
        if layers < 2:
            raise ValueError("need at least two decoder layers for variance")
        rng = np.random.default_rng(seed)
        base = rng.normal(0.0, 1.0 / math.sqrt(feat_hidden), (feat_hidden, classes))
        spread = rng.normal(
            0.0, head_spread / math.sqrt(feat_hidden), (layers, feat_hidden, classes)
        )
        return cls(
            trunk_w=rng.normal(0.0, 1.0 / math.sqrt(feat_in), (feat_in, feat_hidden)),
            trunk_b=np.zeros(feat_hidden),
            head_w=base[None, :, :] + spread,
            head_b=np.zeros((layers, classes)),
        )

    @property
    def layers(self) -> int:
        return self.head_w.shape[0]

    def copy(self) -> "ToyModel":
        return ToyModel(
            self.trunk_w.copy(), self.trunk_b.copy(), self.head_w.copy(), self.head_b.copy()
        )

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """features (S, Q, F_in) -> (hidden (S, Q, F_h), logits (L, S, Q, C))."""
        hidden = np.tanh(features @ self.trunk_w + self.trunk_b)
        logits = np.einsum("sqh,lhc->lsqc", hidden, self.head_w) + self.head_b[:, None, None, :]
        return hidden, logits


def _mode_config(cfg: TrainConfig, mode: str) -> tuple[TrainConfig, bool]:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    lam = cfg.lambda_reg if mode in ("mix_only", "full") else 0.0
    modulate = mode in ("mod_only", "full")
    return replace(cfg, lambda_reg=lam), modulate


def train(
    model: ToyModel,
    scenes: Sequence[SyntheticScene],
    cfg: TrainConfig,
    mode: str = "full",
    epochs: int = 300,
    step: float = 0.05,
    aux_weight: float = 1.0,
) -> tuple[ToyModel, list[float]]:
    """Full-batch gradient descent; returns the trained copy and loss trace.

    aux_weight scales the per-layer auxiliary focal supervision of non-final
    heads, applied identically in every mode.
    """
    mode_cfg, modulate = _mode_config(cfg, mode)
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)

    features = np.stack([s.features for s in scenes])
    assignments = [positive_queries(s) for s in scenes]
    n_batch, n_queries = features.shape[0], features.shape[1]
    n_classes = model.head_b.shape[1]
    n_slots = n_batch * n_queries

    targets = np.zeros((n_batch, n_queries, n_classes))
    for m, pqs in enumerate(assignments):
        for q, c in zip(pqs.indices, pqs.classes):
            targets[m, q, c] = 1.0

    trace: list[float] = []
    for _ in range(epochs):
        hidden, logits = model.forward(features)
        result = joint_loss(
            Tensor.from_array(logits), assignments, mode_cfg, rng=rng, modulate=modulate
        )
        grad_stack = np.array(result.grad_all_layers.array)
        loss = result.loss
        if aux_weight > 0.0:
            for layer in range(model.layers - 1):
                aux_loss, aux_grad = _focal_parts(logits[layer], targets, cfg.focal_gamma)
                loss += aux_weight * float(aux_loss.sum()) / n_slots
                grad_stack[layer] += aux_weight * aux_grad / n_slots
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingDiverged("training diverged; reduce step size")
        trace.append(loss)

        flat_h = hidden.reshape(n_slots, -1)
        flat_g = grad_stack.reshape(model.layers, n_slots, n_classes)
        grad_head_w = np.einsum("sh,lsc->lhc", flat_h, flat_g)
        grad_head_b = flat_g.sum(axis=1)
        grad_hidden = np.einsum("lsc,lhc->sh", flat_g, model.head_w)
        grad_pre = grad_hidden * (1.0 - flat_h**2)
        grad_trunk_w = features.reshape(n_slots, -1).T @ grad_pre
        grad_trunk_b = grad_pre.sum(axis=0)

        model.head_w -= step * grad_head_w
        model.head_b -= step * grad_head_b
        model.trunk_w -= step * grad_trunk_w
        model.trunk_b -= step * grad_trunk_b
    return model, trace


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    d_ece: CalibrationReport
    d_uce: CalibrationReport
    n_positives: int


def evaluate_toy(
    model: ToyModel, scenes: Sequence[SyntheticScene], cfg: TrainConfig
) -> EvalResult:
    """Per positive query: confidence = max sigmoid score, hit = class match.

    Uncertainty exported for D-UCE is tanh of the cross-layer variance at the
    predicted class, which lands in [0, 1). Boxes are not modeled, so the
    correctness bit reduces to its class-match factor.
    """
    features = np.stack([s.features for s in scenes])
    _, logits = model.forward(features)
    u = logits.var(axis=0)
    final = logits[-1]
    if cfg.modulate_at_eval:
        final = final * (1.0 - np.tanh(u))
    scores = sigmoid_array(final)

    matched: list[MatchedDetection] = []
    uncertainties: list[float] = []
    for m, scene in enumerate(scenes):
        pqs = positive_queries(scene)
        for q, gt_class in zip(pqs.indices, pqs.classes):
            row = scores[m, q]
            pred = int(row.argmax())
            conf = float(row[pred])
            hit = 1 if pred == gt_class else 0
            det = Detection(image_id=m, category=pred, box=Box(0.0, 0.0, 1.0, 1.0), score=conf)
            matched.append(MatchedDetection(det, hit))
            uncertainties.append(float(np.tanh(u[m, q, pred])))

    dece = d_ece(matched, cfg.bins)
    duce = d_uce(list(zip(matched, uncertainties)), cfg.bins)
    accuracy = sum(md.f for md in matched) / len(matched)
    return EvalResult(accuracy=accuracy, d_ece=dece, d_uce=duce, n_positives=len(matched))


# Deterministic derived seeds: one stream per concern, disjoint across modes.
_MODEL_SEED_OFFSET = 7919
_EVAL_SEED_OFFSET = 104729


def run_experiment(
    toy_cfg: ToyConfig, mode: str, seed: Optional[int] = None
) -> tuple[ToyModel, list[float], EvalResult]:
    """Generate train + held-out scenes, train one arm, evaluate it."""
    base_seed = toy_cfg.train.seed if seed is None else seed
    cfg = replace(toy_cfg.train, seed=base_seed)
    train_scenes = generate_dataset(
        toy_cfg.n_scenes,
        toy_cfg.queries,
        toy_cfg.classes,
        toy_cfg.flip_noise,
        base_seed,
        feat_in=toy_cfg.feat_in,
        max_objects=toy_cfg.max_objects,
        center_seed=base_seed,
    )
    eval_scenes = generate_dataset(
        toy_cfg.n_scenes,
        toy_cfg.queries,
        toy_cfg.classes,
        toy_cfg.flip_noise,
        base_seed + _EVAL_SEED_OFFSET,
        feat_in=toy_cfg.feat_in,
        max_objects=toy_cfg.max_objects,
        center_seed=base_seed,
    )
    model = ToyModel.initialize(
        toy_cfg.layers,
        toy_cfg.feat_in,
        toy_cfg.feat_hidden,
        toy_cfg.classes,
        base_seed + _MODEL_SEED_OFFSET,
    )
    trained, trace = train(
        model, train_scenes, cfg, mode=mode, epochs=toy_cfg.epochs, step=toy_cfg.step
    )
    result = evaluate_toy(trained, eval_scenes, cfg)
    return trained, trace, result


def run_ablation(toy_cfg: ToyConfig, seed: Optional[int] = None) -> dict[str, dict[str, float]]:
    """All four arms on one seed; mirrors the component-ablation table rows."""
    summary = {}
    for mode in MODES:
        _, _, result = run_experiment(toy_cfg, mode, seed)
        summary[mode] = {"d_ece": result.d_ece.error, "accuracy": result.accuracy}
    return summary
