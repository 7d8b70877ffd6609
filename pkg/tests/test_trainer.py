import csv
import math

import numpy as np
import pytest

from uda_lab.datasets import TrainingView, two_moons
from uda_lab.trainer import (
    METRIC_COLUMNS,
    ConfigError,
    OptimConfig,
    RunConfig,
    SeedConfig,
    TrainingDiverged,
    fit,
    parse_method,
    run,
    tc_ramp,
    train,
    write_metrics,
)


def tiny(method="cliv+tc", **kw):
    base = dict(dataset={"name": "two_moons", "n_per_domain": 24}, method=method, epochs=3, batch_size=8)
    base.update(kw)
    return RunConfig(**base)


@pytest.mark.parametrize(
    "method, expected",
    [
        ("source_only", ("source_only", False)),
        ("tc", ("source_only", True)),
        ("dann", ("dann", False)),
        ("dann+tc", ("dann", True)),
        ("cdan+tc", ("cdan", True)),
        ("cliv+tc", ("cliv", True)),
    ],
)
def test_parse_method(method, expected):
    assert parse_method(method) == expected


@pytest.mark.parametrize("method", ["mmd", "cliv+vat", "", "tc+tc+dann"])
def test_parse_method_rejects_unknown(method):
    with pytest.raises(ConfigError):
        parse_method(method)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(epochs=0)
    with pytest.raises(ConfigError):
        RunConfig(ema_beta=1.5)
    with pytest.raises(ConfigError):
        RunConfig(tc_rampup=-0.1)
    with pytest.raises(ConfigError):
        RunConfig(dataset={"n_per_domain": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"loss": {"lambda_dann": 1.0}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"loss": 3})


def test_config_dict_round_trip_and_digest():
    cfg = tiny(seed=SeedConfig(1, 2, 3))
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert back.digest() == cfg.digest()
    assert tiny(seed=SeedConfig(1, 2, 4)).digest() != cfg.digest()


def test_tc_ramp():
    assert tc_ramp(0.3, 0.0) == 1.0
    assert tc_ramp(0.0, 0.5) == pytest.approx(math.exp(-5))
    assert tc_ramp(0.25, 0.5) == pytest.approx(math.exp(-1.25))
    assert tc_ramp(0.5, 0.5) == 1.0 == tc_ramp(0.9, 0.5)


def test_training_is_deterministic(tmp_path):
    for name in ("a", "b"):
        run(tiny(), tmp_path / name)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()


def test_metrics_file_layout(tmp_path):
    _, history = train(tiny())
    path = write_metrics(history, tmp_path / "m.csv")
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    for r in rows:
        total = float(r["ce"]) + float(r["adv"]) + 10.0 * float(r["tc"])
        assert float(r["total"]) == pytest.approx(total, rel=1e-9)


def test_source_only_never_reads_the_target():
    pair = two_moons(24, seed=0)
    cfg = tiny("source_only")
    view = pair.training_view()
    scrambled = TrainingView(view.x_s, view.y_s, np.random.default_rng(9).standard_normal(view.x_t.shape), view.modality)
    a, _ = fit(cfg, view)
    b, _ = fit(cfg, scrambled)
    for k, v in a.parameters().items():
        np.testing.assert_array_equal(b.parameters()[k], v)


def test_unshifted_domains_match_source_accuracy():
    cfg = RunConfig(dataset={"name": "two_moons", "n_per_domain": 200, "rotation_deg": 0.0}, method="source_only", epochs=20)
    _, history = train(cfg)
    assert history[-1].source_acc > 0.9
    assert abs(history[-1].target_acc - history[-1].source_acc) < 0.05


def test_cross_entropy_falls_during_training():
    _, history = train(tiny("source_only", epochs=20))
    ce = np.array([r.breakdown.ce for r in history])
    assert ce[-5:].mean() < 0.8 * ce[:5].mean()
    assert np.all(np.diff(ce[5:]) < 0)


def test_schedules_are_logged():
    _, history = train(tiny("dann", epochs=4))
    lrs = [r.lr for r in history]
    assert lrs == sorted(lrs, reverse=True)
    assert history[0].grl_lambda < history[-1].grl_lambda < 1.0


def test_divergence_is_reported():
    with pytest.raises(TrainingDiverged) as info:
        train(tiny("source_only", optim=OptimConfig(lr0=1e300)))
    assert info.value.epoch >= 1
