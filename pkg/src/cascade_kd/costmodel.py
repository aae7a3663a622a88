"""Analytic FLOP accounting, threshold sweeps, Pareto fronts and a packet-stream latency model.

Costs are exact integers: a dense layer costs ``2*in*out + out`` (one multiply
and one add per weight, plus the bias) and a ReLU costs one op per output.
Softmax and ensemble arithmetic are not counted.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .moddata import MODALITIES, Modality
from .netmodel import FC_EXIT, BackboneNet


def dense_flops(in_dim: int, out_dim: int) -> int:
    return 2 * in_dim * out_dim + out_dim


def relu_flops(width: int) -> int:
    return width


@dataclass
class FlopLedger:
    """Per-component costs for the three backbones and their exits."""

    blocks: dict[Modality, tuple[int, ...]]
    ics: dict[Modality, dict[int, int]]
    fc: dict[Modality, int]

    def head_cost(self, modality: Modality, index: int) -> int:
        return self.fc[modality] if index == FC_EXIT else self.ics[modality][index]

    def chain_costs(self, chain: Iterable[tuple[Modality, int]]) -> np.ndarray:
        """Cumulative cost at each chain position; a block is paid for once per modality."""
        depth = {m: 0 for m in self.blocks}
        total = 0
        out = []
        for modality, index in chain:
            need = index if index != FC_EXIT else len(self.blocks[modality])
            for b in range(depth[modality], need):
                total += self.blocks[modality][b]
            depth[modality] = max(depth[modality], need)
            total += self.head_cost(modality, index)
            out.append(total)
        return np.array(out, dtype=np.int64)

    def backbone_total(self, modality: Modality) -> int:
        return sum(self.blocks[modality]) + self.fc[modality]

    def total(self) -> int:
        return sum(sum(b) for b in self.blocks.values()) + sum(sum(d.values()) for d in self.ics.values()) + sum(self.fc.values())

    def rows(self) -> list[tuple[str, int]]:
        out = []
        for m in self.blocks:
            out += [(f"{m.value}.block{i}", c) for i, c in enumerate(self.blocks[m], start=1)]
            out += [(f"{m.value}.ic{a}", c) for a, c in sorted(self.ics[m].items())]
            out.append((f"{m.value}.fc", self.fc[m]))
        return out


def flops_of_model(backbones: Mapping[Modality, BackboneNet]) -> FlopLedger:
    blocks, ics, fc = {}, {}, {}
    for m in MODALITIES:
        if m not in backbones:
            continue
        net = backbones[m]
        blocks[m] = tuple(dense_flops(b.in_dim, b.out_dim) + relu_flops(b.out_dim) for b in net.blocks)
        ics[m] = {
            ic.attach_point: dense_flops(ic.proj.in_dim, ic.proj.out_dim) + relu_flops(ic.hidden)
            + dense_flops(ic.head.in_dim, ic.head.out_dim)
            for ic in net.ics
        }
        fc[m] = dense_flops(net.fc.in_dim, net.fc.out_dim)
    return FlopLedger(blocks, ics, fc)


# ---------------------------------------------------------------------------
# trade-off curves
# ---------------------------------------------------------------------------

TRADEOFF_HEADER = ("tau", "accuracy", "mean_flops", "exit_hist_json")


@dataclass(frozen=True)
class TradeoffPoint:
    tau: float
    accuracy: float
    mean_flops: float
    exit_hist: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def parse_tau_grid(text: str) -> list[float]:
    """``"start:stop:step"`` (stop inclusive when hit exactly) or a comma list."""
    if ":" in text:
        try:
            start, stop, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise ValueError(f"tau grid must look like start:stop:step, got {text!r}") from None
        if step <= 0:
            raise ValueError("tau grid step must be positive")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(count)]
    return [float(v) for v in text.split(",") if v.strip()]


def sweep_tradeoff(exits, policy, taus: Sequence[float]) -> list[TradeoffPoint]:
    """Evaluate ``policy`` at every threshold in the (sorted) grid."""
    from .wise import evaluate_policy

    taus = list(taus)
    if any(b < a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau grid must be sorted ascending")
    points = []
    for tau in taus:
        res = evaluate_policy(exits, policy.with_tau(tau))
        points.append(TradeoffPoint(float(tau), res.accuracy, res.mean_flops, tuple(int(c) for c in res.exit_hist)))
    return points


def tradeoff_csv(points: Sequence[TradeoffPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRADEOFF_HEADER)
    for p in points:
        w.writerow([repr(p.tau), repr(p.accuracy), repr(p.mean_flops), json.dumps(list(p.exit_hist))])
    return buf.getvalue()


def pareto_front(points: Sequence[TradeoffPoint]) -> list[TradeoffPoint]:
    """Points not dominated in (higher accuracy, lower mean FLOPs), ordered by FLOPs."""
    order = sorted(range(len(points)), key=lambda i: (points[i].mean_flops, -points[i].accuracy, i))
    front: list[TradeoffPoint] = []
    best = -np.inf
    for i in order:
        p = points[i]
        duplicate = bool(front) and (front[-1].mean_flops, front[-1].accuracy) == (p.mean_flops, p.accuracy)
        if p.accuracy > best or duplicate:
            front.append(p)
            best = p.accuracy
    return front


# ---------------------------------------------------------------------------
# stream latency / bandwidth
# ---------------------------------------------------------------------------

BANDWIDTH_LABEL = "MODEL-DEPENDENT: parametric byte model, not a measurement"


@dataclass(frozen=True)
class StreamSpec:
    """Frames a method needs before it can classify, and bytes per frame type.

    One I-frame arrives per GOP, so the I-frame count gates latency.
    """

    name: str
    gop_frames: int
    n_i: int
    n_mv: int
    n_r: int
    s_i: float = 1.0
    s_mv: float = 0.1
    s_r: float = 0.25

    def __post_init__(self):
        for key in ("gop_frames", "n_i", "n_mv", "n_r", "s_i", "s_mv", "s_r"):
            if not getattr(self, key) > 0:
                raise ValueError(f"stream {self.name!r}: {key} must be positive, got {getattr(self, key)}")
        if self.s_i < self.s_mv or self.s_i < self.s_r:
            raise ValueError(f"stream {self.name!r}: I-frames must be the largest frame type")

    def required_bytes(self) -> float:
        return self.n_i * self.s_i + self.n_mv * self.s_mv + self.n_r * self.s_r

    def scaled(self, factor: float) -> "StreamSpec":
        return StreamSpec(self.name, self.gop_frames, self.n_i, self.n_mv, self.n_r,
                          self.s_i * factor, self.s_mv * factor, self.s_r * factor)


def relative_latency(a: StreamSpec, b: StreamSpec) -> float:
    """Latency of ``a`` relative to ``b`` at equal bit rate: waiting time scales with I-frames needed."""
    return a.n_i / b.n_i


def bandwidth_ratio(a: StreamSpec, ref: StreamSpec) -> float:
    """Iso-latency bandwidth of ``a`` relative to ``ref`` under the byte model."""
    return (a.required_bytes() / ref.required_bytes()) / relative_latency(a, ref)


@dataclass
class StreamReport:
    reference: str
    rows: list[dict] = field(default_factory=list)
    label: str = BANDWIDTH_LABEL

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def bandwidth_report(specs: Sequence[StreamSpec], reference: str | None = None) -> StreamReport:
    if not specs:
        raise ValueError("no stream specs given")
    by_name = {s.name: s for s in specs}
    if len(by_name) != len(specs):
        raise ValueError("stream spec names must be unique")
    ref = by_name[reference] if reference is not None else specs[-1]
    report = StreamReport(ref.name)
    for s in specs:
        report.rows.append({
            "name": s.name,
            "frames": {"i": s.n_i, "mv": s.n_mv, "r": s.n_r},
            "required_bytes": s.required_bytes(),
            "relative_latency": relative_latency(s, ref),
            "bandwidth_ratio": bandwidth_ratio(s, ref),
        })
    return report


def load_stream_specs(text: str) -> tuple[list[StreamSpec], str | None]:
    """Parse ``{"reference": name, "streams": [{...}, ...]}``."""
    doc = json.loads(text)
    if not isinstance(doc, dict) or "streams" not in doc:
        raise ValueError('stream spec file needs a top-level "streams" list')
    specs = []
    for i, entry in enumerate(doc["streams"]):
        try:
            specs.append(StreamSpec(**entry))
        except TypeError as exc:
            raise ValueError(f"streams[{i}]: {exc}") from None
    return specs, doc.get("reference")


DEFAULT_STREAMS = (
    StreamSpec("mimo", gop_frames=12, n_i=8, n_mv=8, n_r=8),
    StreamSpec("coviar", gop_frames=12, n_i=3, n_mv=3, n_r=3),
    StreamSpec("ours", gop_frames=12, n_i=1, n_mv=1, n_r=2),
)
