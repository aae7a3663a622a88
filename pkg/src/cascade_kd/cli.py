"""Command-line entry point: ``cascade-kd <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, resolve_config
from .costmodel import (
    DEFAULT_STREAMS,
    TRADEOFF_HEADER,
    bandwidth_report,
    flops_of_model,
    load_stream_specs,
    pareto_front,
    parse_tau_grid,
    sweep_tradeoff,
    tradeoff_csv,
)
from .distill import PkdSchedule, Strategy, backbone_taps, evaluate_ics
from .experiments import (
    ABLATION_COLUMNS,
    FLATNESS_COLUMNS,
    SUMMARY_COLUMNS,
    TABLE_COLUMNS,
    WISE_COLUMNS,
    WISE_SUMMARY_COLUMNS,
    RunManifest,
    ablation_rows,
    ablation_summary,
    csv_text,
    flatness_medians,
    frame_count_ablation,
    run_flatness_study,
    run_order_study,
    run_seed,
    run_table1,
    run_wise_study,
    train_backbone_for,
    train_strategy,
    training_view,
    write_artifact,
)
from .moddata import MODALITIES, Modality, build_videos, generate, load_dataset, make_splits, save_dataset
from .netmodel import FC_EXIT, load_checkpoint, save_checkpoint
from .probe import flatness, ic_loss_fn, scan_landscape
from .wise import (
    ExitPolicy,
    Lateral,
    compute_exit_outputs,
    evaluate_policy,
    fit_wise,
    load_policy,
    save_policy,
)

log = logging.getLogger("cascade_kd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    return resolve_config(getattr(args, "config", None))


def _out_dir(args, cfg: ExperimentConfig, command: str) -> Path:
    return Path(args.out_dir) if getattr(args, "out_dir", None) else Path(cfg.output_dir) / command


def _split(data, split_id: int):
    if split_id not in (1, 2, 3):
        raise UsageError(f"--split must be 1, 2 or 3, got {split_id}")
    return make_splits(len(data), data.spec.seed)[split_id - 1]


def _load_models(ckpt_dir: Path, spec) -> dict:
    nets = {}
    for m in MODALITIES:
        path = ckpt_dir / f"{m.value}.ckpt"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        nets[m] = load_checkpoint(path, expect_input_dim=spec.input_dim(m), expect_modality=m)
    return nets


def _finish(out: Path, cfg: ExperimentConfig, command: str, artifacts: list[str], t0: float, seeds=None) -> None:
    write_artifact(out / "config.yaml", cfg.to_yaml())
    manifest = RunManifest(command, cfg.config_hash(), list(seeds if seeds is not None else cfg.seeds),
                           artifacts + ["config.yaml"], round(time.time() - t0, 3))
    manifest.write(out)
    print(f"wrote {', '.join(manifest.artifacts)} to {out}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    spec = cfg.spec_for_seed(args.seed) if args.seed is not None else cfg.data
    ds = generate(spec)
    out = Path(args.out)
    if out.exists():
        raise FileExistsError(f"{out} already exists; refusing to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples ({spec.num_classes} classes) to {out}")


def cmd_train_backbones(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    data = load_dataset(args.data)
    split = _split(data, args.split)
    seed = args.seed if args.seed is not None else run_seed(data.spec.seed, args.split)
    view = training_view(cfg, build_videos(data.spec), data, split)
    out = _out_dir(args, cfg, "train-backbones")
    artifacts = []
    for m in MODALITIES:
        net = train_backbone_for(cfg, m, data.spec, view, seed)
        net.metadata.update({"split": args.split, "dataset_seed": data.spec.seed})
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{m.value}.ckpt"
        if path.exists():
            raise FileExistsError(f"{path} already exists; output directories are append-only")
        save_checkpoint(net, path)
        artifacts.append(path.name)
    _finish(out, cfg, "train-backbones", artifacts, t0, [seed])


def cmd_train_ics(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    data = load_dataset(args.data)
    split = _split(data, args.split)
    strategy = Strategy.parse(args.strategy)
    if args.schedule:
        try:
            sched = PkdSchedule.parse(args.schedule)
        except ValueError as exc:
            raise UsageError(f"--schedule: {exc}") from None
        cfg.train.ic_epochs = sched.total_epochs
        cfg.ic.k, cfg.ic.t = sched.k_boundary, sched.t_boundary
    cfg.ic.strategy = strategy.value
    cfg.validate()
    seed = args.seed if args.seed is not None else run_seed(data.spec.seed, args.split)
    nets = _load_models(Path(args.ckpt_dir), data.spec)
    for m, net in nets.items():
        if not net.frozen:
            raise UsageError(f"{m.value} checkpoint is not frozen; train-backbones output is required")
    view = training_view(cfg, build_videos(data.spec), data, split)
    ics = train_strategy(cfg, nets, view, strategy, seed)
    out = _out_dir(args, cfg, "train-ics")
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for m in MODALITIES:
        nets[m].ics = ics[m]
        nets[m].metadata.update({"ic_strategy": strategy.value, "ic_epochs": cfg.train.ic_epochs, "ic_seed": seed})
        path = out / f"{m.value}.ckpt"
        if path.exists():
            raise FileExistsError(f"{path} already exists; output directories are append-only")
        save_checkpoint(nets[m], path)
        artifacts.append(path.name)
    acc = evaluate_ics(nets, data.subset(split.test))
    rows = [(data.spec.seed, args.split, strategy.value, m.value, j, acc[(m, j)]) for m in MODALITIES for j in range(1, FC_EXIT + 1)]
    write_artifact(out / "ic_accuracy.csv", csv_text(cfg, TABLE_COLUMNS, rows))
    artifacts.append("ic_accuracy.csv")
    for row in rows:
        print(f"{row[3]:>6} exit {row[4]}: {row[5]:.4f}")
    _finish(out, cfg, "train-ics", artifacts, t0, [seed])


def _exit_outputs(args, nets, data, split, chain, fit_split: str):
    ledger = flops_of_model(nets)
    idx = split.train if fit_split == "train" else split.test
    return compute_exit_outputs(nets, chain, data.subset(idx), ledger)


def cmd_fit_wise(args) -> None:
    cfg = _config(args)
    data = load_dataset(args.data)
    split = _split(data, args.split)
    nets = _load_models(Path(args.ckpt_dir), data.spec)
    chain = cfg.chain()
    lateral = Lateral(args.lateral)
    weights = None
    if lateral is Lateral.WISE:
        ex = _exit_outputs(args, nets, data, split, chain, args.fit_split or cfg.policy.fit_split)
        weights, reports = fit_wise(ex.probs, ex.labels)
        for r in reports:
            print(f"position {r.position:2d}: loss {r.loss:.6f} (uniform {r.uniform_loss:.6f}), {r.iterations} iterations")
    out = Path(args.out)
    if out.exists():
        raise FileExistsError(f"{out} already exists; refusing to overwrite")
    save_policy(ExitPolicy(chain, lateral, args.tau, weights), out)
    print(f"wrote policy to {out}")


def cmd_infer(args) -> None:
    data = load_dataset(args.data)
    split = _split(data, args.split)
    policy = load_policy(args.policy)
    if args.tau is not None:
        policy = policy.with_tau(args.tau)
    nets = _load_models(Path(args.ckpt_dir), data.spec)
    ex = compute_exit_outputs(nets, policy.chain, data.subset(split.test))
    res = evaluate_policy(ex, policy)
    print(f"tau={policy.tau:g} accuracy={res.accuracy:.4f} mean_flops={res.mean_flops:.1f}")
    print("exit histogram: " + json.dumps(res.exit_hist.tolist()))
    if args.out:
        lines = ["position,confidence,prediction,label,flops"]
        for p, c, y_hat, y, f in zip(res.positions, res.confidence, res.predictions, ex.labels, res.flops):
            lines.append(f"{p},{c!r},{y_hat},{y},{f}")
        write_artifact(args.out, "\n".join(lines) + "\n")


def cmd_sweep(args) -> None:
    data = load_dataset(args.data)
    split = _split(data, args.split)
    policy = load_policy(args.policy)
    nets = _load_models(Path(args.ckpt_dir), data.spec)
    ex = compute_exit_outputs(nets, policy.chain, data.subset(split.test))
    points = sweep_tradeoff(ex, policy, parse_tau_grid(args.tau_grid))
    write_artifact(args.out, tradeoff_csv(points))
    if args.pareto:
        write_artifact(args.pareto, tradeoff_csv(pareto_front(points)))
    print(f"wrote {len(points)} points ({','.join(TRADEOFF_HEADER)}) to {args.out}")


def cmd_probe(args) -> None:
    cfg = _config(args)
    data = load_dataset(args.data)
    split = _split(data, args.split)
    net = load_checkpoint(args.ckpt)
    mod, _, idx = args.ic.partition(":")
    if Modality.parse(mod) is not net.modality:
        raise UsageError(f"--ic {args.ic} does not match the {net.modality.value} checkpoint")
    ic = net.ic(int(idx))
    evaluation = data.subset(split.train if (args.eval_split or cfg.probe.split) == "train" else split.test)
    taps = backbone_taps(net, evaluation.features(net.modality))
    grid = scan_landscape(ic.parameters(), ic_loss_fn(ic, taps[ic.attach_point - 1], evaluation.labels),
                          args.r, args.n, seed=args.seed, normalization=args.normalization)
    score = flatness(grid)
    print(f"center loss {grid.center_loss:.6f}, flatness(r={score.radius:g}) = {score.score:.6f} over {score.cells} cells")
    if args.out:
        write_artifact(args.out, grid.to_csv())


def cmd_stream_report(args) -> None:
    if args.specs:
        specs, reference = load_stream_specs(Path(args.specs).read_text())
    else:
        specs, reference = list(DEFAULT_STREAMS), "ours"
    report = bandwidth_report(specs, args.reference or reference)
    text = report.to_json()
    if args.out:
        write_artifact(args.out, text + "\n")
    print(text)


def cmd_run_table1(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    res = run_table1(cfg)
    out = _out_dir(args, cfg, "run-table1")
    write_artifact(out / "table1_runs.csv", csv_text(cfg, TABLE_COLUMNS, res.rows))
    write_artifact(out / "table1_summary.csv", csv_text(cfg, SUMMARY_COLUMNS, res.summary))
    _finish(out, cfg, "run-table1", ["table1_runs.csv", "table1_summary.csv"], t0)


def cmd_run_order_study(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    res = run_order_study(cfg)
    out = _out_dir(args, cfg, "run-order-study")
    write_artifact(out / "order_runs.csv", csv_text(cfg, TABLE_COLUMNS, res.rows))
    write_artifact(out / "order_summary.csv", csv_text(cfg, SUMMARY_COLUMNS, res.summary))
    _finish(out, cfg, "run-order-study", ["order_runs.csv", "order_summary.csv"], t0)


def cmd_run_wise_study(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    res = run_wise_study(cfg, forced_tau=args.force_tau)
    out = _out_dir(args, cfg, "run-wise-study")
    write_artifact(out / "wise_runs.csv", csv_text(cfg, WISE_COLUMNS, res.rows))
    write_artifact(out / "wise_summary.csv", csv_text(cfg, WISE_SUMMARY_COLUMNS, res.summary))
    _finish(out, cfg, "run-wise-study", ["wise_runs.csv", "wise_summary.csv"], t0)


def cmd_probe_study(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    rows = run_flatness_study(cfg)
    out = _out_dir(args, cfg, "flatness-study")
    write_artifact(out / "flatness.csv", csv_text(cfg, FLATNESS_COLUMNS, rows))
    for s, med in flatness_medians(rows).items():
        print(f"{s}: median flatness {med:.6f}")
    _finish(out, cfg, "flatness-study", ["flatness.csv"], t0)


def cmd_frame_ablation(args) -> None:
    t0 = time.time()
    cfg = _config(args)
    axes = list(MODALITIES) if args.axis == "all" else [Modality.parse(args.axis)]
    counts = [int(c) for c in args.counts.split(",")] if args.counts else None
    cache: dict = {}
    points = [p for axis in axes for p in frame_count_ablation(cfg, axis, counts, cache=cache)]
    out = _out_dir(args, cfg, "frame-ablation")
    write_artifact(out / "frame_ablation.csv", csv_text(cfg, ABLATION_COLUMNS, ablation_rows(points)))
    for axis, count, acc, flops in ablation_summary(points):
        print(f"{axis:>6} x{count}: accuracy {acc:.4f}, full FLOPs {flops}")
    _finish(out, cfg, "frame-ablation", ["frame_ablation.csv"], t0)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cascade-kd", description="Progressive distillation and scaled-ensemble early exit on synthetic compressed-video features.")
    p.add_argument("--version", action="version", version=f"cascade-kd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML config path or preset name (toy, full); defaults to toy")
        return sp

    def with_data(sp, split=True):
        sp.add_argument("--data", required=True, help="dataset file from gen-data")
        if split:
            sp.add_argument("--split", type=int, default=1, help="train/test split 1-3 (default 1)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="generate and save a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="override data.seed")
    sp.set_defaults(func=cmd_gen_data)

    sp = with_data(with_config(sub.add_parser("train-backbones", help="train and freeze the three backbones")))
    sp.add_argument("--out-dir")
    sp.add_argument("--seed", type=int, help="init/batch seed (default derived from data seed and split)")
    sp.set_defaults(func=cmd_train_backbones)

    sp = with_data(with_config(sub.add_parser("train-ics", help="train the nine internal classifiers")))
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    sp.add_argument("--schedule", help="K,T,M phase boundaries and total IC epochs")
    sp.add_argument("--out-dir")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train_ics)

    sp = with_data(with_config(sub.add_parser("fit-wise", help="fit ensemble weights and write a policy file")))
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fit-split", choices=["train", "test"], help="data used for fitting (default from config)")
    sp.add_argument("--lateral", choices=[m.value for m in Lateral], default="wise")
    sp.add_argument("--tau", type=float, default=0.95)
    sp.set_defaults(func=cmd_fit_wise)

    sp = with_data(sub.add_parser("infer", help="early-exit inference on the test split"))
    sp.add_argument("--policy", required=True)
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--tau", type=float, help="override the policy threshold")
    sp.add_argument("--out", help="per-sample trace CSV")
    sp.set_defaults(func=cmd_infer)

    sp = with_data(sub.add_parser("sweep", help="accuracy/FLOPs trade-off over a threshold grid"))
    sp.add_argument("--policy", required=True)
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--tau-grid", default="0:1.01:0.01")
    sp.add_argument("--out", required=True)
    sp.add_argument("--pareto", help="also write the Pareto front CSV here")
    sp.set_defaults(func=cmd_sweep)

    sp = with_data(with_config(sub.add_parser("probe-flatness", help="loss-landscape grid around one IC")))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ic", required=True, help="modality:index, e.g. mv:2")
    sp.add_argument("--r", type=float, default=1.0)
    sp.add_argument("--n", type=int, default=21)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--normalization", choices=["filter", "unit"], default="filter")
    sp.add_argument("--eval-split", choices=["train", "test"])
    sp.add_argument("--out", help="grid CSV (alpha,beta,loss)")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("stream-report", help="relative latency and parametric bandwidth table")
    sp.add_argument("--specs", help="JSON stream specs (default: built-in mimo/coviar/ours)")
    sp.add_argument("--reference")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stream_report)

    for name, func, helptext in (
        ("run-table1", cmd_run_table1, "CE vs PKD per-IC accuracy table over all seeds and splits"),
        ("run-order-study", cmd_run_order_study, "I-frame KD vs curriculum vs anti-curriculum"),
        ("run-wise-study", cmd_run_wise_study, "no-lateral vs uniform vs WISE at matched FLOPs"),
        ("flatness-study", cmd_probe_study, "CE vs PKD flatness of the I-frame ICs"),
        ("frame-ablation", cmd_frame_ablation, "accuracy and FLOPs versus frames per modality"),
    ):
        sp = with_config(sub.add_parser(name, help=helptext))
        sp.add_argument("--out-dir")
        sp.set_defaults(func=func)
        if name == "run-wise-study":
            sp.add_argument("--force-tau", type=float, help="use one threshold for all policies instead of matching FLOPs")
        if name == "frame-ablation":
            sp.add_argument("--axis", default="all", choices=["all", "mv", "r", "iframe"])
            sp.add_argument("--counts", help="comma-separated frame counts (default from config)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cascade-kd {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report, do not dump a traceback unless verbose
        if args.verbose:
            log.exception("command failed")
        print(f"cascade-kd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
