import numpy as np
import pytest

from cascade_kd import distill
from cascade_kd.distill import (
    OptimConfig,
    PkdSchedule,
    Strategy,
    TrainingError,
    evaluate_backbone,
    evaluate_ics,
    mean_std,
    teacher_for_epoch,
    train_backbone,
    train_ics,
)
from cascade_kd.moddata import MODALITIES, EpochRenders, GenSpec, Modality, ModalityDataset, build_videos, generate
from cascade_kd.netmodel import FC_EXIT, attach_ics, build_backbone, forward_with_taps, freeze, ic_forward, parameter_snapshot
from conftest import random_model

OPT = {m: OptimConfig(lr=0.01) for m in MODALITIES}


def _separable(n=100, seed=0):
    spec = GenSpec()
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    mv = rng.standard_normal((n, spec.input_dim(Modality.MV))) * 0.5
    mv[:, 0] += np.where(labels == 1, 2.0, -2.0)
    return ModalityDataset(spec, mv, np.zeros((n, 1)), np.zeros((n, 1)), labels)


def test_backbone_fits_separable_data():
    data = _separable()
    net = build_backbone(Modality.MV, data.mv.shape[1], 2, seed=0)
    train_backbone(net, data, 200, OptimConfig(lr=0.01, batch_size=32), seed=0)
    assert evaluate_backbone(net, data.mv, data.labels) >= 0.99


def test_zero_epochs_leave_backbone_unchanged():
    data = _separable(20)
    net = build_backbone(Modality.MV, data.mv.shape[1], 2)
    before = parameter_snapshot(net)
    assert train_backbone(net, data, 0, OptimConfig(lr=0.1)) == []
    after = parameter_snapshot(net)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_backbone_trace_deterministic():
    data = _separable(40)

    def trace():
        net = build_backbone(Modality.MV, data.mv.shape[1], 2, seed=4)
        return train_backbone(net, data, 5, OptimConfig(lr=0.01, batch_size=8), seed=4)

    assert trace() == trace()


def test_backbone_on_epoch_renders():
    bank = build_videos(GenSpec(samples_per_class=6))
    view = EpochRenders(bank, np.arange(len(bank)))
    net = build_backbone(Modality.R, bank.spec.input_dim(Modality.R), 10)
    trace = train_backbone(net, view, 3, OptimConfig(lr=0.005))
    assert len(trace) == 3 and all(np.isfinite(trace))


def test_frozen_backbone_refuses_training():
    data = _separable(20)
    net = build_backbone(Modality.MV, data.mv.shape[1], 2)
    freeze(net)
    with pytest.raises(TrainingError):
        train_backbone(net, data, 1, OptimConfig(lr=0.1))


def test_teacher_schedule():
    s = PkdSchedule(30, 10, 20)
    assert teacher_for_epoch(s, "pkd", 0) is Modality.MV
    assert teacher_for_epoch(s, "pkd", 9) is Modality.MV
    assert teacher_for_epoch(s, "pkd", 10) is Modality.R
    assert teacher_for_epoch(s, "pkd", 29) is Modality.IFRAME
    assert teacher_for_epoch(s, "pkd-anti", 0) is Modality.IFRAME
    assert teacher_for_epoch(s, "pkd-anti", 15) is Modality.R
    assert teacher_for_epoch(s, "pkd-anti", 25) is Modality.MV
    assert all(teacher_for_epoch(None, Strategy.IFRAME_KD, e) is Modality.IFRAME for e in range(50))
    assert teacher_for_epoch(None, "ce", 3) is None
    with pytest.raises(ValueError):
        teacher_for_epoch(s, "pkd", 30)


def test_schedule_constraints():
    with pytest.raises(ValueError, match="schedule requires K < T"):
        PkdSchedule(30, 20, 10)
    with pytest.raises(ValueError, match="T < M"):
        PkdSchedule(30, 10, 30)
    assert PkdSchedule.equal_phases(90) == PkdSchedule(90, 30, 60)
    assert PkdSchedule.parse("10,20,30") == PkdSchedule(30, 10, 20)


def test_ce_with_zero_lr_leaves_ics_unchanged():
    data = generate(GenSpec(samples_per_class=4))
    nets = random_model(1, data.spec)
    before = {m: parameter_snapshot(nets[m]) for m in MODALITIES}
    train_ics(nets, "ce", data, {m: OptimConfig(lr=0.0, weight_decay=0.0) for m in MODALITIES}, epochs=1)
    for m in MODALITIES:
        after = parameter_snapshot(nets[m])
        assert all(np.array_equal(after[k], before[m][k]) for k in after)


def test_kd_loss_starts_at_zero_for_cloned_teacher_head():
    # MV IC3 made to compute exactly what block 4 + the FC compute: under the
    # curriculum the first teacher is the MV final classifier, so its KD loss is 0
    data = generate(GenSpec(samples_per_class=4))
    nets = random_model(2, data.spec)
    mv = nets[Modality.MV]
    attach_ics(mv, hidden=(32, 32, mv.widths[3]), seed=2)
    ic3 = mv.ic(3)
    ic3.proj.W.data = mv.blocks[3].W.data.copy()
    ic3.proj.b.data = mv.blocks[3].b.data.copy()
    ic3.head.W.data = mv.fc.W.data.copy()
    ic3.head.b.data = mv.fc.b.data.copy()
    res = train_ics(nets, "pkd", data, {m: OptimConfig(lr=0.0) for m in MODALITIES}, epochs=3)
    assert res.traces[(Modality.MV, 3)][0] == 0.0
    assert res.traces[(Modality.MV, 2)][0] > 0.0


def test_teacher_sees_its_own_modality(monkeypatch):
    data = generate(GenSpec(samples_per_class=4))
    nets = random_model(3, data.spec)
    calls = []
    real = distill.teacher_logits

    def spy(net, x):
        calls.append((net.modality, x))
        return real(net, x)

    monkeypatch.setattr(distill, "teacher_logits", spy)
    res = train_ics(nets, "pkd", data, OPT, epochs=6)
    assert [c[0] for c in calls] == [Modality.MV, Modality.R, Modality.IFRAME]
    for m, x in calls:
        assert x is data.features(m)
    assert res.teachers == [Modality.MV] * 2 + [Modality.R] * 2 + [Modality.IFRAME] * 2


def test_teacher_routing_with_epoch_renders(monkeypatch):
    bank = build_videos(GenSpec(samples_per_class=4))
    view = EpochRenders(bank, np.arange(0, len(bank), 2))
    nets = random_model(3, bank.spec)
    calls = []
    real = distill.teacher_logits

    def spy(net, x):
        calls.append((net.modality, x))
        return real(net, x)

    monkeypatch.setattr(distill, "teacher_logits", spy)
    train_ics(nets, "pkd-anti", view, OPT, epochs=3)
    assert [c[0] for c in calls] == [Modality.IFRAME, Modality.R, Modality.MV]
    for e, (m, x) in enumerate(calls):
        assert np.array_equal(x, view.epoch(e).features(m))


def test_ic_independence(monkeypatch):
    data = generate(GenSpec(samples_per_class=4))

    def run(zero_at=None):
        nets = random_model(4, data.spec)
        calls = {"n": 0}
        real = distill.adam_step

        def step(state, params):
            real(state, params)
            calls["n"] += 1
            if calls["n"] == zero_at:
                for p in nets[Modality.MV].ic(1).parameters().values():
                    p.data = np.zeros_like(p.data)

        monkeypatch.setattr(distill, "adam_step", step)
        train_ics(nets, "pkd", data, OPT, epochs=6)
        return nets

    base, poked = run(), run(zero_at=7)
    for m in MODALITIES:
        a, b = parameter_snapshot(base[m]), parameter_snapshot(poked[m])
        for k in a:
            if m is Modality.MV and k.startswith("ic1."):
                assert not np.array_equal(a[k], b[k])
            else:
                assert a[k].tobytes() == b[k].tobytes(), (m, k)


def test_no_epochs_ce_equals_pkd():
    data = generate(GenSpec(samples_per_class=4))
    a, b = random_model(5, data.spec), random_model(5, data.spec)
    train_ics(a, "ce", data, OPT, epochs=0)
    train_ics(b, "pkd", data, OPT, epochs=0)
    for m in MODALITIES:
        pa, pb = parameter_snapshot(a[m]), parameter_snapshot(b[m])
        assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)


def test_train_ics_requires_frozen_backbones():
    data = generate(GenSpec(samples_per_class=4))
    nets = random_model(0, data.spec)
    nets[Modality.R].frozen = False
    with pytest.raises(TrainingError, match="not frozen"):
        train_ics(nets, "ce", data, OPT, epochs=1)


def test_constant_ic_accuracy_is_class_prior():
    data = generate(GenSpec(num_classes=3, samples_per_class=5))
    test = data.subset(np.r_[0:5, 5:7, 10:12])  # priors 5/9, 2/9, 2/9
    nets = random_model(0, data.spec)
    ic = nets[Modality.R].ic(2)
    ic.head.W.data = np.zeros_like(ic.head.W.data)
    ic.head.b.data = np.array([3.0, 1.0, 0.0] + [0.0] * (ic.head.b.data.size - 3))
    acc = evaluate_ics(nets, test)
    assert acc[(Modality.R, 2)] == pytest.approx(5 / 9)


def test_evaluate_matches_recount():
    data = generate(GenSpec(samples_per_class=3))
    nets = random_model(6, data.spec)
    acc = evaluate_ics(nets, data)
    assert len(acc) == 12
    for m in MODALITIES:
        net = nets[m]
        assert acc[(m, FC_EXIT)] == evaluate_backbone(net, data.features(m), data.labels)
        for j in (1, 2, 3):
            hits = 0
            for i in range(len(data)):
                taps, _ = forward_with_taps(net, data.features(m)[i:i + 1])
                logits = ic_forward(net.ic(j), taps[j - 1]).data[0]
                hits += int(np.argmax(logits) == data.labels[i])
            assert acc[(m, j)] == hits / len(data)


def test_mean_std_uses_sample_std():
    mu, sd = mean_std([1.0, 2.0, 4.0])
    assert mu == pytest.approx(7 / 3)
    assert sd == pytest.approx(np.sqrt(((1 - 7 / 3) ** 2 + (2 - 7 / 3) ** 2 + (4 - 7 / 3) ** 2) / 2))
    assert mean_std([0.5]) == (0.5, 0.0)
