import numpy as np
import pytest

from tsadc import pipeline as P
from tsadc.data import Dataset
from tsadc.errors import ConfigError, NumericError


@pytest.fixture(scope="module")
def smoke_run():
    from oracles import SMOKE
    from tsadc.config import Config

    cfg = Config(SMOKE)
    splits = P.load_splits(cfg)
    result = P.fit(cfg, splits["train"], splits["valid"])
    return cfg, splits, result


def test_training_lowers_the_loss(smoke_cfg):
    cfg = smoke_cfg.with_(train__epochs=5, train__patience=10)
    splits = P.load_splits(cfg)
    hist = P.fit(cfg, splits["train"], splits["valid"]).history
    assert len(hist) == 5
    assert hist[-1]["train_total"] < hist[0]["train_total"]
    assert hist[-1]["valid_total"] < hist[0]["valid_total"]


def test_training_is_deterministic(smoke_run):
    cfg, splits, result = smoke_run
    again = P.fit(cfg, splits["train"], splits["valid"])
    assert again.history == result.history
    for a, b in zip(result.models.parameters(), again.models.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_zero_learning_rate_stops_early(smoke_cfg):
    cfg = smoke_cfg.with_(train__lr=0.0, train__epochs=5, train__patience=1)
    splits = P.load_splits(cfg)
    res = P.fit(cfg, splits["train"], splits["valid"])
    assert res.stopped_early and len(res.history) == 2 and res.best_epoch == 1
    assert res.history[0]["valid_total"] == res.history[1]["valid_total"]


class _Guarded:
    """Exposes values; touching labels fails the test."""

    def __init__(self, ds: Dataset):
        self.values = ds.values

    @property
    def labels(self):
        raise AssertionError("training must not read labels")


def test_training_never_reads_labels(smoke_cfg):
    splits = P.load_splits(smoke_cfg)
    P.fit(smoke_cfg.with_(train__epochs=1), _Guarded(splits["train"]), _Guarded(splits["valid"]))


def test_best_state_is_restored(smoke_run):
    cfg, splits, result = smoke_run
    best = result.history[result.best_epoch - 1]["valid_total"]
    assert P.validation_loss(result.models, splits["valid"].values, cfg)["total"] == pytest.approx(best)


def test_variant_two_is_proportional_to_s2(smoke_run):
    cfg, splits, result = smoke_run
    rep = P.detect(result.models, splits["valid"], splits["test"], cfg, variant="2")
    np.testing.assert_array_equal(rep.s, cfg["score.lam2"] * rep.s2)
    assert np.all(rep.s1 == 0)
    assert len(rep.ids) == splits["test"].N


def test_variants_share_scores(smoke_run):
    cfg, splits, result = smoke_run
    reps = P.evaluate_variants(result.models, splits["valid"], splits["test"], cfg)
    np.testing.assert_array_equal(reps["12"].s, 0.5 * reps["1"].s1 + 0.5 * reps["2"].s2)
    single = P.detect(result.models, splits["valid"], splits["test"], cfg, variant="12")
    assert single.s.tobytes() == reps["12"].s.tobytes()
    for rep in reps.values():
        assert set(rep.metrics) == {"F1", "Rec", "APR"}


def test_checkpoint_round_trip(smoke_run, tmp_path):
    cfg, splits, result = smoke_run
    path = tmp_path / "ck.npz"
    P.save_models(result.models, cfg, path, extra={"K": 4, "L": 32})
    models, stored = P.load_models(path)
    assert stored == cfg
    x = splits["test"].values[:4]
    np.testing.assert_array_equal(P.reconstruct(models, x), P.reconstruct(result.models, x))
    with pytest.raises(Exception, match="diffusion.channels"):
        P.load_models(path, cfg.with_(diffusion__channels=4))


def test_history_file_round_trip(smoke_run, tmp_path):
    _, _, result = smoke_run
    P.write_history(result.history, tmp_path / "h.csv")
    assert P.read_history(tmp_path / "h.csv") == result.history


def test_numeric_failure_names_the_step(smoke_cfg):
    splits = P.load_splits(smoke_cfg)
    bad = splits["train"].values.copy()
    bad[3, 0, 5] = np.nan
    with pytest.raises(NumericError, match="epoch 1, step"):
        P.fit(smoke_cfg.with_(train__epochs=1), bad, splits["valid"].values)


def test_sweep_rows(smoke_cfg):
    rows = P.sweep(smoke_cfg.with_(train__epochs=1), "masking-strategy")
    assert [r["value"] for r in rows] == ["RandM", "RandBM", "BoM"]
    for r in rows:
        assert 0 <= r["F1"] <= 1 and 0 <= r["APR"] <= 1 and r["epochs"] == 1
    single = P.run(P.sweep_config(smoke_cfg.with_(train__epochs=1), "masking-strategy", "BoM"))
    assert single.report.metrics == {k: rows[2][k] for k in ("F1", "Rec", "APR")}


def test_sweep_level_zero_means_clean_training(smoke_cfg):
    cfg = P.sweep_config(smoke_cfg, "anomaly-level", 0.0)
    splits = P.load_splits(cfg)
    assert not np.any(splits["train"].labels)
    assert np.any(splits["valid"].labels)  # thresholds are still searchable
    base = P.load_splits(smoke_cfg)["test"]
    np.testing.assert_array_equal(splits["test"].values, base.values)


def test_sweep_errors(smoke_cfg):
    with pytest.raises(ConfigError):
        P.sweep(smoke_cfg, "learning-rate")
    with pytest.raises(ConfigError):
        P.sweep_config(smoke_cfg, "anomaly-types-n", 6)
    assert P.sweep_config(smoke_cfg, "anomaly-types-n", 2)["data.types"] == "spike,dropout"
