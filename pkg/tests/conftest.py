import numpy as np
import pytest

from cascade_kd.config import config_from_dict
from cascade_kd.distill import Strategy
from cascade_kd.experiments import train_split
from cascade_kd.moddata import MODALITIES, GenSpec
from cascade_kd.netmodel import attach_ics, build_backbone, freeze

TINY = {
    "data": {"samples_per_class": 12},
    "train": {"backbone_epochs": 6, "backbone_milestones": [3], "ic_epochs": 6, "ic_milestones": [4]},
    "seeds": [0],
    "splits": [1],
}


@pytest.fixture(scope="session")
def tiny_cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg):
    """One (seed, split) run of every strategy on a small dataset."""
    return train_split(tiny_cfg, 0, 1, list(Strategy))


def random_model(seed: int = 0, spec: GenSpec | None = None):
    """Untrained frozen backbones with ICs for the given data spec."""
    spec = spec or GenSpec(samples_per_class=4)
    nets = {}
    for m in MODALITIES:
        net = build_backbone(m, spec.input_dim(m), spec.num_classes, seed=seed)
        attach_ics(net, seed=seed)
        freeze(net)
        nets[m] = net
    return nets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def run_pipeline(root, config_path) -> dict[str, int]:
    """Every per-step subcommand on the tiny config; returns exit codes by step."""
    from cascade_kd.cli import main

    root = str(root)
    cfg = ["--config", str(config_path)]
    steps = {
        "gen-data": ["gen-data", *cfg, "--out", f"{root}/data.cvkd"],
        "train-backbones": ["train-backbones", *cfg, "--data", f"{root}/data.cvkd", "--out-dir", f"{root}/bb"],
        "train-ics": ["train-ics", *cfg, "--data", f"{root}/data.cvkd", "--ckpt-dir", f"{root}/bb",
                      "--strategy", "pkd", "--out-dir", f"{root}/ics"],
        "fit-wise": ["fit-wise", *cfg, "--data", f"{root}/data.cvkd", "--ckpt-dir", f"{root}/ics",
                     "--out", f"{root}/policy.txt"],
        "infer": ["infer", "--data", f"{root}/data.cvkd", "--ckpt-dir", f"{root}/ics", "--policy", f"{root}/policy.txt",
                  "--out", f"{root}/trace.csv"],
        "sweep": ["sweep", "--data", f"{root}/data.cvkd", "--ckpt-dir", f"{root}/ics", "--policy", f"{root}/policy.txt",
                  "--tau-grid", "0:1.01:0.1", "--out", f"{root}/sweep.csv", "--pareto", f"{root}/pareto.csv"],
        "probe-flatness": ["probe-flatness", *cfg, "--data", f"{root}/data.cvkd", "--ckpt", f"{root}/ics/iframe.ckpt",
                           "--ic", "iframe:2", "--n", "5", "--out", f"{root}/grid.csv"],
        "stream-report": ["stream-report", "--out", f"{root}/streams.json"],
    }
    return {name: main(argv) for name, argv in steps.items()}


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    import yaml

    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def pytest_terminal_summary(terminalreporter):
    from criteria import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
