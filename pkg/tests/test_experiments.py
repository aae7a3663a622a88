import json

import numpy as np
import pytest

from cascade_kd.distill import Strategy, mean_std
from cascade_kd.experiments import (
    RunManifest,
    _with_frames,
    ablation_summary,
    csv_text,
    flatness_medians,
    flatness_rows,
    frame_count_ablation,
    ic_mean_per_run,
    read_csv,
    run_seed,
    strategy_table,
    summarize,
    wise_rows,
    write_artifact,
)
from cascade_kd.moddata import MODALITIES, Modality
from cascade_kd.wise import (
    ExitPolicy,
    Lateral,
    compute_exit_outputs,
    evaluate_policy,
    fit_wise,
    full_ensemble_accuracy,
)


def _fake_rows(seeds, splits, rng):
    rows = []
    for seed in seeds:
        for split in splits:
            for s in ("ce", "pkd"):
                for m in MODALITIES:
                    for j in range(1, 5):
                        rows.append((seed, split, s, m.value, j, float(rng.uniform(0.5, 1.0))))
    return rows


def test_summary_counts(rng):
    strategies = [Strategy.CE, Strategy.PKD_CURRICULUM]
    one = summarize(_fake_rows([0], [1], rng), strategies, [(Strategy.PKD_CURRICULUM, Strategy.CE)])
    assert {r[3] for r in one} == {1} and all(r[5] == 0.0 for r in one)
    nine = summarize(_fake_rows([0, 1, 2], [1, 2, 3], rng), strategies, [(Strategy.PKD_CURRICULUM, Strategy.CE)])
    assert {r[3] for r in nine} == {9}
    assert sum(1 for r in nine if r[0] == "diff pkd - ce") == 10


def test_summary_std_matches_recomputation(rng):
    rows = _fake_rows([0, 1, 2], [1, 2, 3], rng)
    summary = summarize(rows, [Strategy.CE, Strategy.PKD_CURRICULUM], [(Strategy.PKD_CURRICULUM, Strategy.CE)])
    for label, m, j, n, mu, sd in summary:
        if label == "ce" and j != "1-3":
            vals = [r[5] for r in rows if r[2] == "ce" and r[3] == m and r[4] == j]
            assert mu == pytest.approx(sum(vals) / len(vals), abs=1e-15)
            assert sd == pytest.approx(np.std(vals, ddof=1), abs=1e-15)
        if label == "diff pkd - ce" and j == "1-3":
            pk, ce = ic_mean_per_run(rows, "pkd"), ic_mean_per_run(rows, "ce")
            d = [pk[k] - ce[k] for k in pk]
            assert (mu, sd) == pytest.approx(mean_std(d), abs=1e-15)


def test_run_seed_is_unique():
    seeds = {run_seed(d, s) for d in range(50) for s in (1, 2, 3)}
    assert len(seeds) == 150


def test_csv_header_and_append_only(tmp_path, tiny_cfg):
    text = csv_text(tiny_cfg, ("a", "b"), [(1, 0.5)])
    first = text.splitlines()[0]
    assert first.startswith("# cascade-kd ") and f"config={tiny_cfg.config_hash()}" in first
    assert read_csv(text) == [{"a": "1", "b": "0.5"}]
    path = write_artifact(tmp_path / "x" / "a.csv", text)
    with pytest.raises(FileExistsError, match="append-only"):
        write_artifact(path, "other")
    assert path.read_text() == text


def test_manifest_requires_artifacts(tmp_path):
    m = RunManifest("cmd", "abc", [0], ["missing.csv"])
    with pytest.raises(RuntimeError, match="missing"):
        m.write(tmp_path)
    (tmp_path / "here.csv").write_text("x")
    out = RunManifest("cmd", "abc", [0], ["here.csv"]).write(tmp_path)
    assert json.loads(out.read_text())["artifacts"] == ["here.csv"]


def test_strategy_table_from_run(tiny_run):
    table = strategy_table([tiny_run], [Strategy.CE, Strategy.PKD_CURRICULUM], [(Strategy.PKD_CURRICULUM, Strategy.CE)])
    assert len(table.rows) == 2 * 12
    diff = table.mean("diff pkd - ce")
    assert diff == pytest.approx(table.mean("pkd") - table.mean("ce"), abs=1e-12)


def test_forced_tau_wise_rows(tiny_cfg, tiny_run):
    rows = wise_rows(tiny_cfg, tiny_run, forced_tau=1.01)
    assert [r[2] for r in rows] == ["none", "uniform", "wise"]
    assert len({r[5] for r in rows}) == 1
    model = tiny_run.model("pkd")
    chain = tiny_cfg.chain()
    ex_test = compute_exit_outputs(model, chain, tiny_run.test)
    weights, _ = fit_wise(compute_exit_outputs(model, chain, tiny_run.train).probs, tiny_run.train.labels)
    assert rows[1][4] == full_ensemble_accuracy(ex_test, ExitPolicy(chain, Lateral.UNIFORM, 1.01))
    assert rows[2][4] == full_ensemble_accuracy(ex_test, ExitPolicy(chain, Lateral.WISE, 1.01, weights))


def test_iso_matched_rows_cross_check(tiny_cfg, tiny_run):
    rows = wise_rows(tiny_cfg, tiny_run)
    flops = [r[5] for r in rows]
    assert max(flops) <= 1.05 * min(flops)
    model = tiny_run.model("pkd")
    chain = tiny_cfg.chain()
    ex_test = compute_exit_outputs(model, chain, tiny_run.test)
    weights, _ = fit_wise(compute_exit_outputs(model, chain, tiny_run.train).probs, tiny_run.train.labels)
    for _seed, _split, lateral, tau, acc, mf in rows:
        w = weights if lateral == "wise" else None
        res = evaluate_policy(ex_test, ExitPolicy(chain, Lateral(lateral), tau, w))
        assert (res.accuracy, res.mean_flops) == (acc, mf)


def test_flatness_rows(tiny_cfg, tiny_run):
    rows = flatness_rows(tiny_cfg, tiny_run, [Strategy.CE, Strategy.PKD_CURRICULUM])
    assert len(rows) == 6 and {r[3] for r in rows} == {"iframe"}
    med = flatness_medians(rows)
    assert set(med) == {"ce", "pkd"}
    assert med["ce"] == pytest.approx(np.mean([r[6] for r in rows if r[2] == "ce"]))


def test_base_frame_count_is_base_spec(tiny_cfg):
    spec = tiny_cfg.spec_for_seed(0)
    for m in MODALITIES:
        assert _with_frames(spec, m, 3) == spec
    with pytest.raises(ValueError, match="unsupported"):
        _with_frames(spec, Modality.R, 16)


def test_frame_ablation_flops_increase(tiny_cfg):
    cache = {}
    pts = frame_count_ablation(tiny_cfg, "mv", [2, 3], cache=cache)
    assert [p.count for p in pts] == [2, 3]
    assert pts[0].full_flops < pts[1].full_flops
    assert all(0.0 <= p.accuracy <= 1.0 for p in pts)
    # R and I-frame backbones are shared across MV frame counts
    assert len(cache) == 4
    summary = ablation_summary(pts)
    assert [s[1] for s in summary] == [2, 3]
