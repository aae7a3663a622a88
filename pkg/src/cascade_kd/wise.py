"""Scaled-ensemble early exit: per-exit weight fitting and thresholded inference.

Exits are visited along an ``ExitChain``. At position ``L`` the softmax
outputs of the exits seen so far are mixed with weights ``beta^L`` (learned,
uniform, or only the current exit), renormalized, and the walk stops as soon
as the largest class probability exceeds ``tau``.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .costmodel import FlopLedger, flops_of_model
from .moddata import Modality, ModalityDataset
from .netmodel import FC_EXIT, NUM_BLOCKS, BackboneNet, block_forward, forward_with_taps, ic_forward
from .numcore import Tensor, cross_entropy_probs, softmax_np

log = logging.getLogger(__name__)

DEFAULT_ORDER = (Modality.R, Modality.MV, Modality.IFRAME)
TAU_NEVER = 1.01
FIT_MAX_ITERS = 5000
FIT_GRAD_TOL = 1e-8


@dataclass(frozen=True)
class ExitChain:
    exits: tuple[tuple[Modality, int], ...]

    def __post_init__(self):
        if not self.exits:
            raise ValueError("exit chain is empty")
        seen = set()
        for m, j in self.exits:
            if not 1 <= j <= FC_EXIT:
                raise ValueError(f"exit index {j} for {m.value} outside [1, {FC_EXIT}]")
            if (m, j) in seen:
                raise ValueError(f"exit {m.value}:{j} appears twice in the chain")
            seen.add((m, j))

    @classmethod
    def from_order(cls, order: Sequence[Modality | str] = DEFAULT_ORDER) -> "ExitChain":
        """All exits of each modality in depth order, modalities in the given order."""
        mods = [Modality.parse(m) for m in order]
        return cls(tuple((m, j) for m in mods for j in range(1, FC_EXIT + 1)))

    @classmethod
    def parse(cls, text: str) -> "ExitChain":
        """Either a modality order (``"r,mv,iframe"``) or explicit exits (``"r:1 r:2 mv:4"``)."""
        tokens = text.replace(",", " ").split()
        if all(":" not in t for t in tokens):
            return cls.from_order(tokens)
        exits = []
        for t in tokens:
            m, _, j = t.partition(":")
            exits.append((Modality.parse(m), int(j)))
        return cls(tuple(exits))

    def __len__(self) -> int:
        return len(self.exits)

    def __iter__(self) -> Iterator[tuple[Modality, int]]:
        return iter(self.exits)

    def labels(self) -> list[str]:
        return [f"{m.value}:{j}" for m, j in self.exits]


@dataclass(frozen=True)
class WiseWeights:
    """``betas[L-1]`` holds the ``L`` mixing weights used at chain position ``L``."""

    betas: tuple[np.ndarray, ...]

    def __post_init__(self):
        for L, b in enumerate(self.betas, start=1):
            if b.shape != (L,):
                raise ValueError(f"beta at position {L} has shape {b.shape}, expected ({L},)")
            if np.any(b < 0) or not np.all(np.isfinite(b)):
                raise ValueError(f"beta at position {L} must be finite and nonnegative")

    @classmethod
    def uniform(cls, length: int) -> "WiseWeights":
        return cls(tuple(np.full(L, 1.0 / L) for L in range(1, length + 1)))

    def __len__(self) -> int:
        return len(self.betas)


class Lateral(str, Enum):
    WISE = "wise"
    UNIFORM = "uniform"
    NONE = "none"


@dataclass(frozen=True)
class ExitPolicy:
    chain: ExitChain
    lateral: Lateral
    tau: float
    weights: WiseWeights | None = None

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"threshold must be >= 0, got {self.tau}")
        if self.lateral is Lateral.WISE:
            if self.weights is None:
                raise ValueError("a WISE policy needs fitted weights")
            if len(self.weights) != len(self.chain):
                raise ValueError(f"weights cover {len(self.weights)} positions, chain has {len(self.chain)}")

    def beta(self, position: int) -> np.ndarray:
        if self.lateral is Lateral.WISE:
            return self.weights.betas[position - 1]
        if self.lateral is Lateral.UNIFORM:
            return np.full(position, 1.0 / position)
        b = np.zeros(position)
        b[-1] = 1.0
        return b

    def with_tau(self, tau: float) -> "ExitPolicy":
        return replace(self, tau=float(tau))


def _mix(beta: np.ndarray, stack: Sequence[np.ndarray]) -> np.ndarray:
    # elementwise accumulation so one sample and a whole batch round identically
    out = beta[0] * stack[0]
    for b, p in zip(beta[1:], stack[1:]):
        out = out + b * p
    return out / out.sum(axis=-1, keepdims=True)


def ensemble_combine(probs: np.ndarray, beta: Sequence[float]) -> tuple[np.ndarray, float]:
    """Mix ``L`` probability rows with weights ``beta``; returns (distribution, confidence)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (probs.shape[0],):
        raise ValueError(f"{probs.shape[0]} probability rows but {beta.size} weights")
    if np.any(beta < 0):
        raise ValueError("ensemble weights must be nonnegative")
    if not beta.sum() > 0:
        raise ValueError("ensemble weights are all zero")
    dist = _mix(beta, list(probs))
    return dist, float(dist.max())


# ---------------------------------------------------------------------------
# cached exit outputs
# ---------------------------------------------------------------------------


@dataclass
class ExitOutputs:
    """Softmax outputs of every chain exit on a dataset, plus cumulative chain costs."""

    chain: ExitChain
    probs: np.ndarray  # (exits, samples, classes)
    labels: np.ndarray
    costs: np.ndarray  # int64 cumulative FLOPs per chain position

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])


def exit_logits(net: BackboneNet, x: np.ndarray) -> dict[int, np.ndarray]:
    taps, logits = forward_with_taps(net, x)
    out = {ic.attach_point: ic_forward(ic, taps[ic.attach_point - 1]).data for ic in net.ics}
    out[FC_EXIT] = logits.data
    return out


def compute_exit_outputs(
    backbones: Mapping[Modality, BackboneNet],
    chain: ExitChain,
    data: ModalityDataset,
    ledger: FlopLedger | None = None,
) -> ExitOutputs:
    ledger = ledger or flops_of_model(backbones)
    per_modality = {m: exit_logits(backbones[m], data.features(m)) for m in {m for m, _ in chain}}
    missing = [f"{m.value}:{j}" for m, j in chain if j not in per_modality[m]]
    if missing:
        raise ValueError(f"chain references exits the model lacks: {missing}")
    probs = np.stack([softmax_np(per_modality[m][j]) for m, j in chain])
    return ExitOutputs(chain, probs, data.labels.copy(), ledger.chain_costs(chain))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class FitReport:
    position: int
    loss: float
    uniform_loss: float
    iterations: int
    clamped: int


def _softmax1(theta: np.ndarray) -> np.ndarray:
    e = np.exp(theta - theta.max())
    return e / e.sum()


def _simplex_fit(p_true: np.ndarray) -> tuple[np.ndarray, int]:
    """Minimize mean -log(beta . p_true) over the simplex with beta = softmax(theta)."""
    L = p_true.shape[0]
    if L == 1:
        return np.ones(1), 0
    floor = 1e-12

    def loss(theta):
        mix = np.maximum(_softmax1(theta) @ p_true, floor)
        return float(-np.log(mix).mean())

    def grad(theta):
        beta = _softmax1(theta)
        mix = np.maximum(beta @ p_true, floor)
        g_beta = -(p_true / mix).mean(axis=1)
        return beta * (g_beta - beta @ g_beta)

    theta = np.zeros(L)
    f = loss(theta)
    if not np.isfinite(f):
        raise FloatingPointError("non-finite ensemble loss at uniform weights")
    step = 1.0
    it = 0
    for it in range(1, FIT_MAX_ITERS + 1):
        g = grad(theta)
        gn2 = float(g @ g)
        if np.sqrt(gn2) < FIT_GRAD_TOL:
            break
        # Armijo backtracking, then let the step grow again
        while True:
            cand = theta - step * g
            fc = loss(cand)
            if fc <= f - 1e-4 * step * gn2:
                break
            step *= 0.5
            if step < 1e-30:
                return _softmax1(theta), it
        if not np.isfinite(fc):
            raise FloatingPointError(f"non-finite ensemble loss after {it} iterations")
        theta, f = cand, fc
        step *= 2.0
    return _softmax1(theta), it


def ensemble_loss(probs: np.ndarray, labels: np.ndarray, beta: np.ndarray) -> tuple[float, int]:
    """Mean CE of the mixed distribution of the first ``len(beta)`` exits, and the clamp count."""
    mixed = _mix(beta, list(probs[: len(beta)]))
    loss, clamped = cross_entropy_probs(Tensor(mixed), labels)
    return loss.item(), clamped


def fit_wise(probs: np.ndarray, labels: np.ndarray) -> tuple[WiseWeights, list[FitReport]]:
    """Fit ``beta^L`` for every chain position independently.

    ``probs`` is ``(exits, samples, classes)`` in chain order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 3 or probs.shape[1] != labels.shape[0]:
        raise ValueError(f"probs must be (exits, samples, classes) matching {labels.shape[0]} labels, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("non-finite exit probabilities; cannot fit ensemble weights")
    p_true = probs[:, np.arange(labels.shape[0]), labels]
    betas, reports = [], []
    for L in range(1, probs.shape[0] + 1):
        beta, iters = _simplex_fit(p_true[:L])
        loss, clamped = ensemble_loss(probs, labels, beta)
        uniform, _ = ensemble_loss(probs, labels, np.full(L, 1.0 / L))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite ensemble loss at position {L}")
        if clamped:
            log.warning("position %d: %d samples with zero mixed probability (clamped)", L, clamped)
        betas.append(beta)
        reports.append(FitReport(L, loss, uniform, iters, clamped))
    return WiseWeights(tuple(betas)), reports


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class ExitTrace:
    position: int
    confidence: float
    prediction: int
    flops: int
    evaluations: dict[str, int] = field(default_factory=dict)


class _SampleWalk:
    """Evaluates blocks and heads for one sample on demand, each at most once."""

    def __init__(self, backbones: Mapping[Modality, BackboneNet], ledger: FlopLedger, sample):
        self.backbones = backbones
        self.ledger = ledger
        self.inputs = {m: np.atleast_2d(np.asarray(_field(sample, m), dtype=np.float64)) for m in backbones}
        self.acts: dict[Modality, list[np.ndarray]] = {m: [] for m in backbones}
        self.flops = 0
        self.counter: Counter[str] = Counter()

    def _ensure_depth(self, m: Modality, depth: int) -> None:
        acts = self.acts[m]
        while len(acts) < depth:
            b = len(acts) + 1
            h = acts[-1] if acts else self.inputs[m]
            acts.append(block_forward(self.backbones[m], b, h).data)
            self.flops += self.ledger.blocks[m][b - 1]
            self.counter[f"{m.value}.block{b}"] += 1

    def exit_probs(self, m: Modality, j: int) -> np.ndarray:
        net = self.backbones[m]
        if j == FC_EXIT:
            self._ensure_depth(m, NUM_BLOCKS)
            logits = net.fc(Tensor(self.acts[m][-1])).data
        else:
            self._ensure_depth(m, j)
            logits = ic_forward(net.ic(j), self.acts[m][j - 1]).data
        self.flops += self.ledger.head_cost(m, j)
        self.counter[f"{m.value}:{j}"] += 1
        return softmax_np(logits)[0]


def _field(sample, m: Modality):
    if isinstance(sample, Mapping):
        return sample[m]
    return getattr(sample, m.value)


def infer_early_exit(
    backbones: Mapping[Modality, BackboneNet],
    policy: ExitPolicy,
    sample,
    ledger: FlopLedger | None = None,
) -> tuple[int, ExitTrace]:
    """Walk the chain for one sample, stopping at the first confident position."""
    walk = _SampleWalk(backbones, ledger or flops_of_model(backbones), sample)
    seen: list[np.ndarray] = []
    n = len(policy.chain)
    for L, (m, j) in enumerate(policy.chain, start=1):
        seen.append(walk.exit_probs(m, j))
        dist = _mix(policy.beta(L), seen)
        conf = float(dist.max())
        if conf > policy.tau or L == n:
            pred = int(dist.argmax())
            return pred, ExitTrace(L, conf, pred, walk.flops, dict(walk.counter))
    raise AssertionError("unreachable")


@dataclass
class PolicyResult:
    accuracy: float
    mean_flops: float
    exit_hist: np.ndarray
    positions: np.ndarray
    confidence: np.ndarray
    predictions: np.ndarray
    flops: np.ndarray


def evaluate_policy(exits: ExitOutputs, policy: ExitPolicy) -> PolicyResult:
    """Batch equivalent of ``infer_early_exit`` over cached exit outputs."""
    if exits.num_samples == 0:
        raise ValueError("cannot evaluate a policy on an empty set")
    if exits.chain != policy.chain:
        raise ValueError("policy chain does not match the cached exit outputs")
    n_exits, n = exits.probs.shape[:2]
    positions = np.zeros(n, dtype=np.int64)
    confidence = np.zeros(n)
    predictions = np.zeros(n, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for L in range(1, n_exits + 1):
        dist = _mix(policy.beta(L), list(exits.probs[:L]))
        conf = dist.max(axis=1)
        stop = pending & ((conf > policy.tau) | (L == n_exits))
        positions[stop] = L
        confidence[stop] = conf[stop]
        predictions[stop] = dist[stop].argmax(axis=1)
        pending &= ~stop
        if not pending.any():
            break
    flops = exits.costs[positions - 1]
    hist = np.bincount(positions - 1, minlength=n_exits)
    return PolicyResult(
        accuracy=float((predictions == exits.labels).mean()),
        mean_flops=float(flops.mean()),
        exit_hist=hist,
        positions=positions,
        confidence=confidence,
        predictions=predictions,
        flops=flops,
    )


def full_ensemble_accuracy(exits: ExitOutputs, policy: ExitPolicy) -> float:
    dist = _mix(policy.beta(len(policy.chain)), list(exits.probs))
    return float((dist.argmax(axis=1) == exits.labels).mean())


@dataclass
class IsoResult:
    tau: float
    mean_flops: float
    iterations: int


def iso_compute_threshold_search(
    exits: ExitOutputs,
    policy: ExitPolicy,
    target: float,
    rel_tol: float = 0.05,
    max_iter: int = 40,
    tau_max: float = TAU_NEVER,
) -> IsoResult:
    """Bisect ``tau`` so the policy's mean FLOPs land within ``rel_tol`` of ``target``."""

    def cost(tau: float) -> float:
        return evaluate_policy(exits, policy.with_tau(tau)).mean_flops

    lo, hi = 0.0, tau_max
    c_lo, c_hi = cost(lo), cost(hi)
    if not c_lo * (1 - rel_tol) <= target <= c_hi * (1 + rel_tol):
        raise ValueError(f"target {target:.1f} FLOPs unattainable; achievable range [{c_lo:.1f}, {c_hi:.1f}]")
    # prefer the endpoint that is closer when both qualify
    endpoints = sorted([(abs(c_lo - target), 0, lo, c_lo), (abs(c_hi - target), 1, hi, c_hi)])
    for gap, _, tau, c in endpoints:
        if gap <= rel_tol * target:
            return IsoResult(tau, c, 0)
    best = (abs(c_lo - target), lo, c_lo)
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        c = cost(mid)
        if abs(c - target) < best[0]:
            best = (abs(c - target), mid, c)
        if abs(c - target) <= rel_tol * target:
            return IsoResult(mid, c, it)
        if c < target:
            lo = mid
        else:
            hi = mid
    return IsoResult(best[1], best[2], max_iter)


# ---------------------------------------------------------------------------
# policy files
# ---------------------------------------------------------------------------

POLICY_HEADER = "cascade-kd exit policy v1"


def policy_to_text(policy: ExitPolicy) -> str:
    lines = [f"# {POLICY_HEADER}", f"lateral {policy.lateral.value}", f"tau {policy.tau:.17g}",
             "chain " + " ".join(policy.chain.labels())]
    if policy.weights is not None:
        for L, b in enumerate(policy.weights.betas, start=1):
            lines.append(f"beta {L} " + " ".join(f"{v:.17g}" for v in b))
    return "\n".join(lines) + "\n"


def policy_from_text(text: str) -> ExitPolicy:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != f"# {POLICY_HEADER}":
        found = lines[0] if lines else "<empty>"
        raise ValueError(f"not a policy file: expected header '# {POLICY_HEADER}', found {found!r}")
    fields_: dict[str, str] = {}
    betas: dict[int, np.ndarray] = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "beta":
            pos, _, vals = rest.partition(" ")
            betas[int(pos)] = np.array([float(v) for v in vals.split()])
        elif key in ("lateral", "tau", "chain"):
            fields_[key] = rest
        else:
            raise ValueError(f"unknown policy field {key!r}")
    for key in ("lateral", "tau", "chain"):
        if key not in fields_:
            raise ValueError(f"policy file lacks '{key}'")
    chain = ExitChain.parse(fields_["chain"])
    weights = None
    if betas:
        if sorted(betas) != list(range(1, len(chain) + 1)):
            raise ValueError(f"policy file has beta rows {sorted(betas)}, expected 1..{len(chain)}")
        weights = WiseWeights(tuple(betas[L] for L in range(1, len(chain) + 1)))
    return ExitPolicy(chain, Lateral(fields_["lateral"]), float(fields_["tau"]), weights)


def save_policy(policy: ExitPolicy, path: str | Path) -> None:
    Path(path).write_text(policy_to_text(policy))


def load_policy(path: str | Path) -> ExitPolicy:
    return policy_from_text(Path(path).read_text())
