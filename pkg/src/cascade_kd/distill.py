"""Backbone pretraining and internal-classifier training (CE, KD, progressive KD)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .moddata import MODALITIES, EpochRenders, Modality, ModalityDataset
from .netmodel import FC_EXIT, BackboneNet, forward, forward_with_taps, ic_forward
from .numcore import AdamState, Tensor, adam_step, backward, cross_entropy, kd_loss, lr_schedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Strategy(str, Enum):
    CE = "ce"
    IFRAME_KD = "iframe-kd"
    PKD_CURRICULUM = "pkd"
    PKD_ANTI = "pkd-anti"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        for s in cls:
            if s.value == value.lower() or s.name.lower() == value.lower():
                return s
        raise ValueError(f"unknown strategy {value!r}; expected one of {[s.value for s in cls]}")

    @property
    def is_kd(self) -> bool:
        return self is not Strategy.CE


@dataclass(frozen=True)
class PkdSchedule:
    """Phase boundaries: teacher 1 for [0, K), teacher 2 for [K, T), teacher 3 for [T, M)."""

    total_epochs: int
    k_boundary: int
    t_boundary: int

    def __post_init__(self):
        if not 0 < self.k_boundary:
            raise ValueError(f"schedule requires 0 < K, got K={self.k_boundary}")
        if not self.k_boundary < self.t_boundary:
            raise ValueError(f"schedule requires K < T, got K={self.k_boundary}, T={self.t_boundary}")
        if not self.t_boundary < self.total_epochs:
            raise ValueError(f"schedule requires T < M, got T={self.t_boundary}, M={self.total_epochs}")

    @classmethod
    def equal_phases(cls, total_epochs: int) -> "PkdSchedule":
        return cls(total_epochs, total_epochs // 3, 2 * total_epochs // 3)

    @classmethod
    def parse(cls, text: str) -> "PkdSchedule":
        """``"K,T,M"``"""
        try:
            k, t, m = (int(v) for v in text.split(","))
        except ValueError:
            raise ValueError(f"schedule must look like K,T,M; got {text!r}") from None
        return cls(m, k, t)


_CURRICULUM = (Modality.MV, Modality.R, Modality.IFRAME)


def teacher_for_epoch(schedule: PkdSchedule | None, strategy: Strategy | str, epoch: int) -> Modality | None:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.CE:
        return None
    if strategy is Strategy.IFRAME_KD:
        return Modality.IFRAME
    if schedule is None:
        raise ValueError(f"{strategy.value} needs a PkdSchedule")
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    order = _CURRICULUM if strategy is Strategy.PKD_CURRICULUM else _CURRICULUM[::-1]
    if epoch < schedule.k_boundary:
        return order[0]
    if epoch < schedule.t_boundary:
        return order[1]
    return order[2]


@dataclass
class OptimConfig:
    lr: float
    weight_decay: float = 1e-4
    eps: float = 1e-3
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    batch_size: int = 32

    def new_state(self) -> AdamState:
        return AdamState(lr=self.lr, weight_decay=self.weight_decay, eps=self.eps)


def _epoch_order(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def _epoch_view(train, epoch: int) -> ModalityDataset:
    return train.epoch(epoch) if isinstance(train, EpochRenders) else train


def train_backbone(
    net: BackboneNet,
    train: ModalityDataset | EpochRenders,
    epochs: int,
    optim: OptimConfig,
    seed: int = 0,
) -> list[float]:
    """Cross-entropy training of blocks + FC. Returns the per-epoch mean loss.

    ``train`` is either a fixed dataset or per-epoch renders of the training videos.
    """
    if net.frozen:
        raise TrainingError(f"{net.modality.value} backbone is frozen; unfreeze before training")
    params = net.backbone_parameters()
    state = optim.new_state()
    rng = _rng(seed, 21, list(Modality).index(net.modality))
    y = train.labels
    trace: list[float] = []
    for epoch in range(epochs):
        x = _epoch_view(train, epoch).features(net.modality)
        state.lr = lr_schedule(optim.lr, epoch, optim.milestones, optim.gamma)
        total = 0.0
        for batch in _epoch_order(rng, len(y), optim.batch_size):
            loss = cross_entropy(forward(net, x[batch]), y[batch])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite CE loss ({value}) training {net.modality.value} backbone at epoch {epoch}, lr={state.lr:g}"
                )
            backward(loss)
            adam_step(state, params)
            total += value * len(batch)
        trace.append(total / len(y))
        if epoch >= 20 and trace[-1] > trace[-21]:
            log.info("%s backbone: loss rose over epochs %d-%d (%.4f -> %.4f)",
                     net.modality.value, epoch - 20, epoch, trace[-21], trace[-1])
    net.metadata.update({"seed": seed, "backbone_epochs": epochs})
    return trace


def teacher_logits(net: BackboneNet, x: np.ndarray) -> np.ndarray:
    """Final-classifier logits of a (frozen) backbone on its own modality input."""
    return forward(net, x).data


def backbone_taps(net: BackboneNet, x: np.ndarray) -> list[np.ndarray]:
    taps, _ = forward_with_taps(net, x)
    return [t.data for t in taps]


@dataclass
class IcTrainResult:
    # (modality, attach_point) -> per-epoch mean loss
    traces: dict[tuple[Modality, int], list[float]] = field(default_factory=dict)
    teachers: list[Modality | None] = field(default_factory=list)


def train_ics(
    backbones: Mapping[Modality, BackboneNet],
    strategy: Strategy | str,
    train: ModalityDataset | EpochRenders,
    optims: Mapping[Modality, OptimConfig],
    epochs: int,
    schedule: PkdSchedule | None = None,
    temperature: float = 1.0,
    seed: int = 0,
    reset_on_phase: bool = True,
) -> IcTrainResult:
    """Train all nine ICs on frozen backbones.

    With ``EpochRenders`` the taps and teacher logits are recomputed for each
    epoch's frames; with a fixed dataset they are computed once.

    Every IC sees the same mini-batch indices. Under a KD strategy the teacher
    for the epoch is the final classifier of ``teacher_for_epoch``'s backbone,
    evaluated on that backbone's own modality input, and each IC distils from
    it on its own modality features. Losses are summed, but each IC's gradient
    only touches its own parameters.
    """
    strategy = Strategy.parse(strategy)
    if strategy in (Strategy.PKD_CURRICULUM, Strategy.PKD_ANTI):
        if schedule is None:
            schedule = PkdSchedule.equal_phases(epochs) if epochs >= 3 else None
        if schedule is not None and schedule.total_epochs != epochs:
            raise ValueError(f"schedule covers {schedule.total_epochs} epochs but {epochs} requested")
    for m in MODALITIES:
        net = backbones[m]
        if not net.frozen:
            raise TrainingError(f"{m.value} backbone is not frozen; refusing to train ICs")
        if len(net.ics) != 3:
            raise TrainingError(f"{m.value} backbone has {len(net.ics)} ICs attached, expected 3")

    y = train.labels
    fixed = not isinstance(train, EpochRenders)
    taps: dict[Modality, list[np.ndarray]] = {}
    cached_teachers: dict[Modality, np.ndarray] = {}

    states = {m: optims[m].new_state() for m in MODALITIES}
    params = {m: backbones[m].ic_parameters() for m in MODALITIES}
    rng = _rng(seed, 31)
    result = IcTrainResult({(m, ic.attach_point): [] for m in MODALITIES for ic in backbones[m].ics})
    previous_teacher = None
    for epoch in range(epochs):
        teacher = teacher_for_epoch(schedule, strategy, epoch) if strategy.is_kd else None
        result.teachers.append(teacher)
        view = _epoch_view(train, epoch)
        if not fixed:
            taps.clear()
            cached_teachers.clear()
        for m in MODALITIES:
            if m not in taps:
                taps[m] = backbone_taps(backbones[m], view.features(m))
        if teacher is not None and teacher not in cached_teachers:
            tnet = backbones[teacher]
            cached_teachers[teacher] = teacher_logits(tnet, view.features(tnet.modality))
        if reset_on_phase and epoch > 0 and teacher != previous_teacher:
            for st in states.values():
                st.reset_moments()
        previous_teacher = teacher
        for m in MODALITIES:
            states[m].lr = lr_schedule(optims[m].lr, epoch, optims[m].milestones, optims[m].gamma)

        sums = {key: 0.0 for key in result.traces}
        for batch in _epoch_order(rng, len(y), optims[Modality.MV].batch_size):
            losses = []
            for m in MODALITIES:
                for ic in backbones[m].ics:
                    logits = ic_forward(ic, Tensor(taps[m][ic.attach_point - 1][batch]))
                    if teacher is None:
                        loss = cross_entropy(logits, y[batch])
                    else:
                        loss = kd_loss(logits, cached_teachers[teacher][batch], temperature)
                    sums[(m, ic.attach_point)] += loss.item() * len(batch)
                    losses.append(loss)
            total = losses[0]
            for extra in losses[1:]:
                total = total + extra
            if not np.isfinite(total.item()):
                raise TrainingError(f"non-finite IC loss at epoch {epoch} ({strategy.value})")
            backward(total)
            for m in MODALITIES:
                adam_step(states[m], params[m])
        for key, s in sums.items():
            result.traces[key].append(s / len(y))
    for m in MODALITIES:
        backbones[m].metadata.update({"ic_strategy": strategy.value, "ic_epochs": epochs, "ic_seed": seed})
    return result


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.asarray(logits).argmax(axis=1) == labels).mean())


def evaluate_ics(backbones: Mapping[Modality, BackboneNet], test: ModalityDataset) -> dict[tuple[Modality, int], float]:
    """Accuracy of every IC (exits 1-3) and final classifier (exit 4) per modality."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    out: dict[tuple[Modality, int], float] = {}
    for m in MODALITIES:
        net = backbones[m]
        taps, logits = forward_with_taps(net, test.features(m))
        for ic in net.ics:
            out[(m, ic.attach_point)] = accuracy(ic_forward(ic, taps[ic.attach_point - 1]).data, test.labels)
        out[(m, FC_EXIT)] = accuracy(logits.data, test.labels)
    return out


def evaluate_backbone(net: BackboneNet, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return accuracy(forward(net, x).data, y)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
