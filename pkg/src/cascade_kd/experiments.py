"""End-to-end recipes: strategy tables, exit-policy study, flatness and frame-count ablation.

Every recipe is a pure function of an ``ExperimentConfig``; the ``write_*``
helpers turn results into CSV text whose first line records the config hash
and tool version.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .costmodel import flops_of_model
from .distill import PkdSchedule, Strategy, backbone_taps, evaluate_ics, mean_std, train_backbone, train_ics
from .moddata import (
    MODALITIES,
    DatasetSplit,
    EpochRenders,
    GenSpec,
    Modality,
    ModalityDataset,
    VideoBank,
    build_videos,
    make_splits,
    render,
)
from .netmodel import FC_EXIT, BackboneNet, InternalClassifier, attach_ics, build_backbone, freeze
from .probe import flatness, ic_loss_fn, scan_landscape
from .wise import (
    ExitChain,
    ExitPolicy,
    Lateral,
    compute_exit_outputs,
    evaluate_policy,
    fit_wise,
    iso_compute_threshold_search,
)

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("dataset_seed", "split", "strategy", "modality", "ic_index", "accuracy")


class IsoComputeError(RuntimeError):
    pass


def run_seed(dataset_seed: int, split_id: int) -> int:
    """Seed for network init and batch order of one (dataset seed, split) run."""
    return dataset_seed * 100 + split_id


def worker_slots() -> int:
    raw = os.environ.get("CASCADE_KD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"CASCADE_KD_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def header_comment(cfg: ExperimentConfig) -> str:
    return f"# cascade-kd {__version__} config={cfg.config_hash()}"


def csv_text(cfg: ExperimentConfig, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(header_comment(cfg) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def read_csv(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_artifact(path: str | Path, content: str | bytes) -> Path:
    """Create ``path``; refuses to touch an existing file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "xb" if isinstance(content, bytes) else "x"
    try:
        with open(path, mode) as fh:
            fh.write(content)
    except FileExistsError:
        raise FileExistsError(f"{path} already exists; output directories are append-only") from None
    return path


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list[int]
    artifacts: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        missing = [a for a in self.artifacts if not (out_dir / a).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing artifacts: {missing}")
        return write_artifact(out_dir / "manifest.json", json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# per-split training
# ---------------------------------------------------------------------------


@dataclass
class SplitRun:
    dataset_seed: int
    split_id: int
    spec: GenSpec
    train: ModalityDataset
    test: ModalityDataset
    backbones: dict[Modality, BackboneNet]
    ics: dict[Strategy, dict[Modality, list[InternalClassifier]]] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return run_seed(self.dataset_seed, self.split_id)

    def model(self, strategy: Strategy | str) -> dict[Modality, BackboneNet]:
        """Frozen backbones carrying the ICs trained under ``strategy``."""
        strategy = Strategy.parse(strategy)
        return {m: replace(net, ics=list(self.ics[strategy][m]), metadata=dict(net.metadata))
                for m, net in self.backbones.items()}


def split_data(cfg: ExperimentConfig, dataset_seed: int, split_id: int, spec: GenSpec | None = None):
    spec = spec or cfg.spec_for_seed(dataset_seed)
    bank = build_videos(spec)
    data = render(bank, 0)
    split = make_splits(len(data), dataset_seed)[split_id - 1]
    return bank, data, split


def training_view(cfg: ExperimentConfig, bank: VideoBank, data: ModalityDataset, split: DatasetSplit):
    if cfg.train.frame_resampling:
        return EpochRenders(bank, split.train)
    return data.subset(split.train)


def train_backbone_for(cfg: ExperimentConfig, modality: Modality, spec: GenSpec, train_view, seed: int) -> BackboneNet:
    net = build_backbone(modality, spec.input_dim(modality), spec.num_classes, cfg.widths(modality), seed=seed)
    train_backbone(net, train_view, cfg.train.backbone_epochs, cfg.optim(modality, "backbone"), seed=seed)
    freeze(net)
    return net


def train_strategy(
    cfg: ExperimentConfig,
    backbones: dict[Modality, BackboneNet],
    train_view,
    strategy: Strategy,
    seed: int,
) -> dict[Modality, list[InternalClassifier]]:
    nets = {m: replace(net, ics=[], metadata=dict(net.metadata)) for m, net in backbones.items()}
    for m in MODALITIES:
        attach_ics(nets[m], cfg.ic_hidden(m), seed=seed)
    schedule: PkdSchedule | None = None
    if strategy in (Strategy.PKD_CURRICULUM, Strategy.PKD_ANTI):
        schedule = cfg.schedule()
    train_ics(
        nets, strategy, train_view, {m: cfg.optim(m, "ic") for m in MODALITIES}, cfg.train.ic_epochs,
        schedule=schedule, temperature=cfg.ic.temperature, seed=seed, reset_on_phase=cfg.ic.reset_on_phase,
    )
    return {m: nets[m].ics for m in MODALITIES}


def train_split(cfg: ExperimentConfig, dataset_seed: int, split_id: int, strategies: Sequence[Strategy]) -> SplitRun:
    bank, data, split = split_data(cfg, dataset_seed, split_id)
    seed = run_seed(dataset_seed, split_id)
    view = training_view(cfg, bank, data, split)
    backbones = {m: train_backbone_for(cfg, m, bank.spec, view, seed) for m in MODALITIES}
    run = SplitRun(dataset_seed, split_id, bank.spec, data.subset(split.train), data.subset(split.test), backbones)
    for s in strategies:
        t0 = time.perf_counter()
        run.ics[s] = train_strategy(cfg, backbones, view, s, seed)
        log.info("seed %d split %d: %s ICs trained in %.1fs", dataset_seed, split_id, s.value, time.perf_counter() - t0)
    return run


def _train_split_job(args) -> SplitRun:
    return train_split(*args)


def run_grid(cfg: ExperimentConfig, strategies: Sequence[Strategy | str]) -> list[SplitRun]:
    """Train every (seed, split) of the config; order of the result is seed-major."""
    strategies = [Strategy.parse(s) for s in strategies]
    jobs = [(cfg, seed, split, strategies) for seed in cfg.seeds for split in cfg.splits]
    slots = min(worker_slots(), len(jobs))
    if slots > 1:
        with ProcessPoolExecutor(max_workers=slots) as pool:
            return list(pool.map(_train_split_job, jobs))
    return [_train_split_job(j) for j in jobs]


# ---------------------------------------------------------------------------
# strategy tables
# ---------------------------------------------------------------------------

TABLE1_STRATEGIES = (Strategy.CE, Strategy.PKD_CURRICULUM)
ORDER_STRATEGIES = (Strategy.IFRAME_KD, Strategy.PKD_CURRICULUM, Strategy.PKD_ANTI)
SUMMARY_COLUMNS = ("row", "modality", "ic_index", "n", "mean", "std")


def accuracy_rows(runs: Sequence[SplitRun], strategies: Sequence[Strategy]) -> list[tuple]:
    rows = []
    for run in runs:
        for s in strategies:
            acc = evaluate_ics(run.model(s), run.test)
            for m in MODALITIES:
                for j in range(1, FC_EXIT + 1):
                    rows.append((run.dataset_seed, run.split_id, s.value, m.value, j, acc[(m, j)]))
    return rows


def _cells(rows: Sequence[tuple]) -> dict[tuple[str, str, int], dict[tuple[int, int], float]]:
    cells: dict[tuple[str, str, int], dict[tuple[int, int], float]] = {}
    for seed, split, strategy, modality, ic, acc in rows:
        cells.setdefault((strategy, modality, int(ic)), {})[(int(seed), int(split))] = float(acc)
    return cells


def ic_mean_per_run(rows: Sequence[tuple], strategy: str) -> dict[tuple[int, int], float]:
    """Mean accuracy over the nine ICs (exits 1-3 of every modality) for each run."""
    per_run: dict[tuple[int, int], list[float]] = {}
    for seed, split, s, _m, ic, acc in rows:
        if s == strategy and int(ic) < FC_EXIT:
            per_run.setdefault((int(seed), int(split)), []).append(float(acc))
    return {k: float(np.mean(v)) for k, v in per_run.items()}


def summarize(rows: Sequence[tuple], strategies: Sequence[Strategy], diffs: Sequence[tuple[Strategy, Strategy]]) -> list[tuple]:
    """Mean and sample std per cell, paired-difference rows, and the nine-IC mean."""
    cells = _cells(rows)
    out = []
    for s in strategies:
        for m in MODALITIES:
            for j in range(1, FC_EXIT + 1):
                vals = list(cells[(s.value, m.value, j)].values())
                mu, sd = mean_std(vals)
                out.append((s.value, m.value, j, len(vals), mu, sd))
        per_run = list(ic_mean_per_run(rows, s.value).values())
        mu, sd = mean_std(per_run)
        out.append((s.value, "all", "1-3", len(per_run), mu, sd))
    for a, b in diffs:
        label = f"diff {a.value} - {b.value}"
        for m in MODALITIES:
            for j in range(1, FC_EXIT):
                ca, cb = cells[(a.value, m.value, j)], cells[(b.value, m.value, j)]
                d = [ca[k] - cb[k] for k in sorted(ca)]
                mu, sd = mean_std(d)
                out.append((label, m.value, j, len(d), mu, sd))
        ra, rb = ic_mean_per_run(rows, a.value), ic_mean_per_run(rows, b.value)
        d = [ra[k] - rb[k] for k in sorted(ra)]
        mu, sd = mean_std(d)
        out.append((label, "all", "1-3", len(d), mu, sd))
    return out


@dataclass
class TableResult:
    rows: list[tuple]
    summary: list[tuple]

    def mean(self, strategy: Strategy | str, modality: str = "all", ic: int | str = "1-3") -> float:
        key = Strategy.parse(strategy).value if not str(strategy).startswith("diff") else strategy
        for row, m, j, _n, mu, _sd in self.summary:
            if row == key and m == modality and str(j) == str(ic):
                return mu
        raise KeyError((strategy, modality, ic))


def strategy_table(runs, strategies, diffs) -> TableResult:
    rows = accuracy_rows(runs, strategies)
    return TableResult(rows, summarize(rows, strategies, diffs))


def run_table1(cfg: ExperimentConfig, runs: Sequence[SplitRun] | None = None) -> TableResult:
    runs = runs if runs is not None else run_grid(cfg, TABLE1_STRATEGIES)
    return strategy_table(runs, TABLE1_STRATEGIES, [(Strategy.PKD_CURRICULUM, Strategy.CE)])


def run_order_study(cfg: ExperimentConfig, runs: Sequence[SplitRun] | None = None) -> TableResult:
    """Per-IC accuracies (no lateral combination) for the three teacher orders."""
    runs = runs if runs is not None else run_grid(cfg, ORDER_STRATEGIES)
    diffs = [(Strategy.PKD_CURRICULUM, Strategy.PKD_ANTI), (Strategy.PKD_CURRICULUM, Strategy.IFRAME_KD)]
    return strategy_table(runs, ORDER_STRATEGIES, diffs)


# ---------------------------------------------------------------------------
# exit-policy study
# ---------------------------------------------------------------------------

WISE_COLUMNS = ("dataset_seed", "split", "policy", "tau", "accuracy", "mean_flops")
WISE_SUMMARY_COLUMNS = ("policy", "n", "accuracy_mean", "accuracy_std", "mean_flops")


@dataclass
class WiseStudyResult:
    rows: list[tuple]
    summary: list[tuple]

    def accuracy(self, lateral: Lateral | str) -> float:
        lateral = Lateral(lateral)
        return next(r[2] for r in self.summary if r[0] == lateral.value)

    def flops(self, lateral: Lateral | str) -> float:
        lateral = Lateral(lateral)
        return next(r[4] for r in self.summary if r[0] == lateral.value)


def wise_rows(cfg: ExperimentConfig, run: SplitRun, strategy: Strategy = Strategy.PKD_CURRICULUM,
              forced_tau: float | None = None) -> list[tuple]:
    """No-lateral, uniform and WISE policies on one run, matched in mean FLOPs.

    The no-lateral policy runs at ``policy.iso_tau``; the other two are bisected
    onto its cost. ``forced_tau`` skips matching and uses one threshold for all.
    """
    model = run.model(strategy)
    chain = cfg.chain()
    ledger = flops_of_model(model)
    fit_data = run.train if cfg.policy.fit_split == "train" else run.test
    ex_fit = compute_exit_outputs(model, chain, fit_data, ledger)
    ex_test = compute_exit_outputs(model, chain, run.test, ledger)
    weights, _ = fit_wise(ex_fit.probs, ex_fit.labels)
    tau0 = cfg.policy.iso_tau if forced_tau is None else forced_tau
    policies = [ExitPolicy(chain, Lateral.NONE, tau0), ExitPolicy(chain, Lateral.UNIFORM, tau0),
                ExitPolicy(chain, Lateral.WISE, tau0, weights)]
    target = evaluate_policy(ex_test, policies[0]).mean_flops
    rows = []
    for p in policies:
        if forced_tau is None and p.lateral is not Lateral.NONE:
            iso = iso_compute_threshold_search(ex_test, p, target, rel_tol=cfg.policy.iso_tolerance)
            p = p.with_tau(iso.tau)
        res = evaluate_policy(ex_test, p)
        rows.append((run.dataset_seed, run.split_id, p.lateral.value, p.tau, res.accuracy, res.mean_flops))
    costs = [r[5] for r in rows]
    if forced_tau is None and max(costs) > 1.05 * min(costs):
        ranges = ", ".join(f"{r[2]}={r[5]:.0f}" for r in rows)
        raise IsoComputeError(f"seed {run.dataset_seed} split {run.split_id}: could not match FLOPs within 5% ({ranges})")
    return rows


def run_wise_study(cfg: ExperimentConfig, runs: Sequence[SplitRun] | None = None,
                   forced_tau: float | None = None) -> WiseStudyResult:
    runs = runs if runs is not None else run_grid(cfg, [Strategy.PKD_CURRICULUM])
    rows = [r for run in runs for r in wise_rows(cfg, run, forced_tau=forced_tau)]
    summary = []
    for lateral in (Lateral.NONE, Lateral.UNIFORM, Lateral.WISE):
        acc = [r[4] for r in rows if r[2] == lateral.value]
        flops = [r[5] for r in rows if r[2] == lateral.value]
        mu, sd = mean_std(acc)
        summary.append((lateral.value, len(acc), mu, sd, float(np.mean(flops))))
    return WiseStudyResult(rows, summary)


# ---------------------------------------------------------------------------
# flatness
# ---------------------------------------------------------------------------

FLATNESS_COLUMNS = ("dataset_seed", "split", "strategy", "modality", "ic_index", "center_loss", "flatness")


def flatness_rows(cfg: ExperimentConfig, run: SplitRun, strategies: Sequence[Strategy],
                  modality: Modality = Modality.IFRAME) -> list[tuple]:
    data = run.train if cfg.probe.split == "train" else run.test
    taps = backbone_taps(run.backbones[modality], data.features(modality))
    rows = []
    for s in strategies:
        for ic in run.ics[s][modality]:
            grid = scan_landscape(
                ic.parameters(), ic_loss_fn(ic, taps[ic.attach_point - 1], data.labels),
                cfg.probe.radius, cfg.probe.n, seed=run.seed, normalization=cfg.probe.normalization,
            )
            score = flatness(grid)
            rows.append((run.dataset_seed, run.split_id, s.value, modality.value, ic.attach_point,
                         grid.center_loss, score.score))
    return rows


def flatness_medians(rows: Sequence[tuple]) -> dict[str, float]:
    """Per strategy: median over dataset seeds of the mean score across the probed ICs."""
    per: dict[str, dict[int, list[float]]] = {}
    for seed, _split, s, _m, _ic, _c, score in rows:
        per.setdefault(s, {}).setdefault(int(seed), []).append(float(score))
    return {s: float(np.median([np.mean(v) for v in seeds.values()])) for s, seeds in per.items()}


def run_flatness_study(cfg: ExperimentConfig, runs: Sequence[SplitRun] | None = None,
                       strategies: Sequence[Strategy] = (Strategy.CE, Strategy.PKD_CURRICULUM)) -> list[tuple]:
    """Probe the I-frame ICs of the first configured split for every seed."""
    if runs is None:
        cfg1 = replace(cfg, splits=[cfg.splits[0]])
        runs = run_grid(cfg1, strategies)
    first = {}
    for run in runs:
        first.setdefault(run.dataset_seed, run)
    return [r for run in first.values() for r in flatness_rows(cfg, run, strategies)]


# ---------------------------------------------------------------------------
# frame-count ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("axis", "count", "dataset_seed", "accuracy", "full_flops", "mean_flops")


@dataclass(frozen=True)
class AblationPoint:
    axis: str
    count: int
    dataset_seed: int
    accuracy: float
    full_flops: int
    mean_flops: float


def _with_frames(spec: GenSpec, axis: Modality, count: int) -> GenSpec:
    key = {Modality.MV: "frames_mv", Modality.R: "frames_r", Modality.IFRAME: "frames_i"}[axis]
    new = GenSpec.from_dict({**spec.to_dict(), key: count})
    try:
        new.validate()
    except ValueError as exc:
        raise ValueError(f"unsupported {axis.value} frame count {count}: {exc}") from None
    return new


def frame_count_ablation(
    cfg: ExperimentConfig,
    axis: Modality | str,
    counts: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    cache: dict | None = None,
) -> list[AblationPoint]:
    """Vary one modality's frame count, keep the others fixed, and evaluate the final-classifier chain.

    The chain holds each modality's final classifier (in the configured order)
    with fitted ensemble weights and threshold ``ablation.tau``. Backbones are
    cached by (seed, modality, frame count) since the other modalities' data
    does not change with ``axis``.
    """
    axis = Modality.parse(axis)
    counts = list(counts if counts is not None else cfg.ablation.counts)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    for c in counts:
        _with_frames(cfg.data, axis, c)
    cache = {} if cache is None else cache
    split_id = cfg.splits[0]
    chain = ExitChain(tuple((Modality.parse(m), FC_EXIT) for m in cfg.policy.chain))
    points = []
    for seed in seeds:
        for c in counts:
            spec = _with_frames(cfg.spec_for_seed(seed), axis, c)
            bank, data, split = split_data(cfg, seed, split_id, spec)
            view = training_view(cfg, bank, data, split)
            nets = {}
            for m in MODALITIES:
                key = (seed, m, spec.frames(m))
                if key not in cache:
                    cache[key] = train_backbone_for(cfg, m, spec, view, run_seed(seed, split_id))
                nets[m] = cache[key]
            ledger = flops_of_model(nets)
            train, test = data.subset(split.train), data.subset(split.test)
            weights, _ = fit_wise(compute_exit_outputs(nets, chain, train, ledger).probs, train.labels)
            ex_test = compute_exit_outputs(nets, chain, test, ledger)
            res = evaluate_policy(ex_test, ExitPolicy(chain, Lateral.WISE, cfg.ablation.tau, weights))
            points.append(AblationPoint(axis.value, c, seed, res.accuracy, int(ledger.chain_costs(chain)[-1]), res.mean_flops))
    return points


def ablation_summary(points: Sequence[AblationPoint]) -> list[tuple[str, int, float, int]]:
    """(axis, count, mean accuracy over seeds, full FLOPs) per count."""
    out = []
    for axis in dict.fromkeys(p.axis for p in points):
        for c in sorted({p.count for p in points if p.axis == axis}):
            sel = [p for p in points if p.axis == axis and p.count == c]
            out.append((axis, c, float(np.mean([p.accuracy for p in sel])), sel[0].full_flops))
    return out


def ablation_rows(points: Sequence[AblationPoint]) -> list[tuple]:
    return [(p.axis, p.count, p.dataset_seed, p.accuracy, p.full_flops, p.mean_flops) for p in points]
