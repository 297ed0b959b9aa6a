"""Semi-supervised training: augmented supervision plus pseudo-label consistency.

Per epoch, every step draws a labeled batch (augmented with ``g``) and,
once the pseudo-labeled set is non-empty, a pseudo-labeled batch (not
augmented); the two cross-entropies are summed with unit weight. At the end
of the epoch each unlabeled sample is perturbed with ``g`` minus the
identity rotation, its prediction is blended with the previous epoch's
prediction by ``kappa`` and kept as a hard label if the blended confidence
clears ``tau``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from rffssl import nn as rnn
from rffssl.augment import AugmentationSpec, Augmenter, augment_batch, composite, random_rotation
from rffssl.dataio import LabeledSet, UnlabeledSet

log = logging.getLogger(__name__)

MODES = ("supervised", "proposal", "fixmatch")
# pseudo-label retention uses max(p) > tau; False switches to >=
STRICT_THRESHOLD = True


@dataclass
class TrainerConfig:
    kappa: float = 0.5
    tau: float = 0.7
    epochs: int = 230
    labeled_batch: int = 32
    pseudo_batch: int = 32
    lr: float | None = None
    mode: str = "proposal"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    # labeled-data augmentation override (ablations); None means use `augmentation`
    labeled_augmenter: Augmenter | None = None
    use_labeled_augmentation: bool = True
    weak_augmentation: AugmentationSpec | None = None
    strict_threshold: bool = STRICT_THRESHOLD
    # None: one pass over the labeled set, ceil(|S| / labeled_batch)
    steps_per_epoch: int | None = None
    # one train-mode forward over labeled + pseudo batches so batch-norm
    # statistics are taken over both; False runs two separate forwards
    joint_forward: bool = True
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.kappa < 1:
            raise ValueError("kappa must be in [0, 1)")
        if not 0.5 <= self.tau <= 1:
            # tau = 1 is accepted as the 'nothing passes' sentinel
            raise ValueError("tau must be in [0.5, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.labeled_batch < 1 or self.pseudo_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.mode == "supervised" else 3e-4

    def labeled_g(self) -> Augmenter | None:
        if not self.use_labeled_augmentation:
            return None
        return self.labeled_augmenter or composite(self.augmentation)

    def perturbation_g(self) -> Augmenter:
        return composite(self.augmentation.perturbation())

    def weak_g(self) -> Augmenter:
        spec = self.weak_augmentation or self.augmentation
        return random_rotation(spec.rotation_set)


@dataclass
class PseudoLabeledSet:
    ids: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    rows: np.ndarray  # positions in the UnlabeledSet

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def empty(cls) -> "PseudoLabeledSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), z.copy())


class PredictionMemory:
    """Previous-epoch perturbed predictions keyed by unlabeled sample id."""

    def __init__(self, ids: Iterable[int], num_classes: int):
        self.ids = np.asarray(list(ids), dtype=np.int64)
        self.row = {int(i): k for k, i in enumerate(self.ids)}
        self.values = np.zeros((len(self.ids), num_classes))

    def get(self, sample_id: int) -> np.ndarray:
        return self.values[self.row[int(sample_id)]]


def _pick(z: torch.Tensor, labels) -> torch.Tensor:
    return rnn.cross_entropy_logits(z, torch.as_tensor(np.asarray(labels, dtype=np.int64)))


def supervised_loss(model, signals: np.ndarray, labels: np.ndarray, g: Augmenter | None, rng: np.random.Generator) -> torch.Tensor:
    """Mean cross-entropy of the model on ``g(x)`` against ``y`` (train mode)."""
    if len(labels) == 0:
        raise ValueError("empty labeled batch")
    x = augment_batch(signals, g, rng)
    return _pick(rnn.logits(model, x, "train"), labels)


def unsupervised_loss(model, signals: np.ndarray, pseudo_labels: np.ndarray) -> torch.Tensor:
    """Mean cross-entropy on unaugmented samples against pseudo-labels; 0 if empty."""
    if len(pseudo_labels) == 0:
        return torch.zeros((), dtype=next(model.parameters()).dtype)
    return _pick(rnn.logits(model, signals, "train"), pseudo_labels)


def joint_losses(
    model,
    labeled_x: np.ndarray,
    labels: np.ndarray,
    pseudo_x: np.ndarray,
    pseudo_labels: np.ndarray,
) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_s, L_u)`` from a single forward over the concatenated batches.

    ``labeled_x`` is expected to be augmented already. Each loss is the mean
    over its own part, so their sum keeps unit weighting.
    """
    n = len(labels)
    z = rnn.logits(model, np.concatenate([labeled_x, pseudo_x]), "train")
    return _pick(z[:n], labels), _pick(z[n:], pseudo_labels)


def threshold(blended: np.ndarray, tau: float, strict: bool = STRICT_THRESHOLD) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows kept, their argmax labels and confidences.

    Ties in argmax resolve to the lowest class index.
    """
    conf = blended.max(axis=1)
    keep = conf > tau if strict else conf >= tau
    return np.flatnonzero(keep), blended.argmax(axis=1)[keep], conf[keep]


def rebuild_pseudo_labels(
    model,
    unlabeled: UnlabeledSet,
    memory: PredictionMemory,
    kappa: float,
    tau: float,
    g: Augmenter | None,
    rng: np.random.Generator,
    strict: bool = STRICT_THRESHOLD,
    batch_size: int = 256,
) -> tuple[PseudoLabeledSet, PredictionMemory]:
    """Rebuild the pseudo-labeled set at an epoch boundary.

    ``g`` must already exclude the identity rotation. The memory is updated
    to the current perturbed prediction for every sample, kept or not.
    """
    perturbed = augment_batch(unlabeled.signals, g, rng)
    current = rnn.predict(model, perturbed, batch_size).astype(np.float64)
    rows = np.array([memory.row[int(i)] for i in unlabeled.ids], dtype=np.int64)
    previous = memory.values[rows]
    blended = kappa * previous + (1 - kappa) * current
    keep, labels, conf = threshold(blended, tau, strict)
    memory.values[rows] = current
    return PseudoLabeledSet(unlabeled.ids[keep], labels, conf, keep), memory


def fixmatch_step(
    model,
    labeled_signals: np.ndarray,
    labels: np.ndarray,
    unlabeled_signals: np.ndarray,
    weak: Augmenter | None,
    strong: Augmenter | None,
    tau: float,
    rng: np.random.Generator,
    labeled_g: Augmenter | None = None,
    strict: bool = STRICT_THRESHOLD,
    joint: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Per-batch pseudo-labels from ``weak(x)``, consistency on ``strong(x)``.

    Returns ``(L_s, L_u, n_masked)``; only the weak branch is thresholded.
    """
    with torch.no_grad():
        probs = rnn.forward(model, augment_batch(unlabeled_signals, weak, rng), "infer").double().numpy()
    keep, pseudo, _ = threshold(probs, tau, strict)
    if len(keep) == 0:
        ls = supervised_loss(model, labeled_signals, labels, labeled_g, rng)
        return ls, torch.zeros((), dtype=ls.dtype), 0
    strong_x = augment_batch(unlabeled_signals[keep], strong, rng)
    if joint:
        ls, lu = joint_losses(model, augment_batch(labeled_signals, labeled_g, rng), labels, strong_x, pseudo)
    else:
        ls = supervised_loss(model, labeled_signals, labels, labeled_g, rng)
        lu = _pick(rnn.logits(model, strong_x, "train"), pseudo)
    return ls, lu, len(keep)


def predict_labels(model, signals: np.ndarray) -> np.ndarray:
    return rnn.predict(model, signals).argmax(axis=1)


def evaluate(model, signals: np.ndarray, labels: np.ndarray) -> float:
    """Argmax accuracy in [0, 1]."""
    if len(labels) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict_labels(model, signals) == np.asarray(labels)))


def confusion_matrix(predicted: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
    return m


@dataclass
class EpochRecord:
    epoch: int
    loss_s: float
    loss_u: float
    pseudo_size: int
    pseudo_accuracy: float | None
    eval_accuracy: float | None


@dataclass
class TrainResult:
    model: rnn.ResNet1d
    log: list[EpochRecord]
    failed: bool = False
    failed_epoch: int | None = None
    seconds: float = 0.0


def train(
    model: rnn.ResNet1d,
    labeled: LabeledSet,
    unlabeled: UnlabeledSet | None,
    config: TrainerConfig,
    seed: int,
    eval_set: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs in the selected mode.

    A NaN loss ends the run and marks it failed at that epoch.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 0x7A])
    torch.manual_seed(seed)
    opt = rnn.make_optimizer(model, config.learning_rate)
    g_lab = config.labeled_g()
    semi = config.mode != "supervised"
    if semi and (unlabeled is None or len(unlabeled) == 0):
        raise ValueError(f"mode {config.mode} needs unlabeled data")
    memory = PredictionMemory(unlabeled.ids, labeled.num_classes) if config.mode == "proposal" else None
    pseudo = PseudoLabeledSet.empty()
    steps = config.steps_per_epoch or math.ceil(len(labeled) / config.labeled_batch)
    history: list[EpochRecord] = []
    pseudo_cursor, pseudo_order = 0, np.zeros(0, dtype=np.int64)
    unl_cursor, unl_order = 0, np.zeros(0, dtype=np.int64)

    lab_cursor, lab_order = 0, np.zeros(0, dtype=np.int64)

    for epoch in range(1, config.epochs + 1):
        if config.steps_per_epoch is None:
            lab_order, lab_cursor = rng.permutation(len(labeled)), 0
        sum_s = sum_u = 0.0
        if config.mode == "proposal":
            pseudo_order, pseudo_cursor = rng.permutation(len(pseudo)), 0
        for step in range(steps):
            if lab_cursor >= len(lab_order):
                lab_order, lab_cursor = rng.permutation(len(labeled)), 0
            b = lab_order[lab_cursor : lab_cursor + config.labeled_batch]
            lab_cursor += len(b)
            try:
                if config.mode == "fixmatch":
                    if unl_cursor + config.pseudo_batch > len(unl_order):
                        unl_order, unl_cursor = rng.permutation(len(unlabeled)), 0
                    u = unl_order[unl_cursor : unl_cursor + config.pseudo_batch]
                    unl_cursor += len(u)
                    ls, lu, _ = fixmatch_step(
                        model, labeled.signals[b], labeled.labels[b], unlabeled.signals[u],
                        config.weak_g(), config.perturbation_g(), config.tau, rng,
                        labeled_g=g_lab, strict=config.strict_threshold, joint=config.joint_forward,
                    )
                elif config.mode == "proposal" and len(pseudo):
                    if pseudo_cursor >= len(pseudo_order):
                        pseudo_order, pseudo_cursor = rng.permutation(len(pseudo)), 0
                    sel = pseudo_order[pseudo_cursor : pseudo_cursor + config.pseudo_batch]
                    pseudo_cursor += len(sel)
                    px, py = unlabeled.signals[pseudo.rows[sel]], pseudo.labels[sel]
                    if config.joint_forward:
                        lx = augment_batch(labeled.signals[b], g_lab, rng)
                        ls, lu = joint_losses(model, lx, labeled.labels[b], px, py)
                    else:
                        ls = supervised_loss(model, labeled.signals[b], labeled.labels[b], g_lab, rng)
                        lu = unsupervised_loss(model, px, py)
                else:
                    ls = supervised_loss(model, labeled.signals[b], labeled.labels[b], g_lab, rng)
                    lu = torch.zeros((), dtype=ls.dtype)
                loss = ls + lu
                if not torch.isfinite(loss):
                    raise rnn.NumericFailure("loss became NaN")
            except rnn.NumericFailure as err:
                log.warning("epoch %d: %s", epoch, err)
                return TrainResult(model, history, True, epoch, time.perf_counter() - t0)
            opt.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            rnn.adam_step(model, None, opt)
            sum_s += ls.item()
            sum_u += lu.item()

        pseudo_acc = None
        if config.mode == "proposal":
            pseudo, memory = rebuild_pseudo_labels(
                model, unlabeled, memory, config.kappa, config.tau,
                config.perturbation_g(), rng, config.strict_threshold,
            )
            if unlabeled.hidden_labels is not None and len(pseudo):
                pseudo_acc = float(np.mean(unlabeled.hidden_labels[pseudo.rows] == pseudo.labels))
        eval_acc = None
        if eval_set is not None and config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
            eval_acc = evaluate(model, *eval_set)
        history.append(EpochRecord(epoch, sum_s / steps, sum_u / steps, len(pseudo), pseudo_acc, eval_acc))
        log.debug("%s", history[-1])
    return TrainResult(model, history, False, None, time.perf_counter() - t0)
