import csv
import io
import json

import numpy as np
import pytest

from condcd import autodiff as ad
from condcd.autodiff import ConfigurationError, DataError, Tensor
from condcd.training import (Adam, Checkpoint, ExperimentConfig, RESULTS_HEADER, batch_indices,
                             evaluate, load_manifest, predict, run_matrix, train)

from helpers import small_experiment
from oracles import adam_scalar


def test_adam_matches_scalar_reference():
    target = 0.7

    def grad(x):
        return 2 * (x - target) + 0.3 * np.cos(3 * x)

    x = Tensor(np.array([2.5]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.05)
    for _ in range(100):
        opt.zero_grad()
        x.grad = np.array([grad(float(x.data[0]))])
        opt.step()
    ref = adam_scalar(grad, 2.5, 100, lr=0.05)
    assert abs(float(x.data[0]) - ref) <= 1e-12


def test_adam_missing_grad_is_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"x": x})
    opt.step()
    np.testing.assert_array_equal(x.data, 1.0)


def test_batch_indices_cover_each_epoch():
    n, bs = 7, 3
    seen = np.concatenate([batch_indices(4, n, bs, s) for s in range(7)])  # exactly 3 epochs
    for e in range(3):
        assert sorted(seen[e * n:(e + 1) * n]) == list(range(n))
    assert np.array_equal(batch_indices(4, n, bs, 5), batch_indices(4, n, bs, 5))
    assert not np.array_equal(batch_indices(4, n, bs, 0), batch_indices(5, n, bs, 0))


def test_bi_temporal_mapformer_rejected():
    cfg = ExperimentConfig(regime="bi_temporal")
    with pytest.raises(ConfigurationError):
        cfg.validate()


def test_other_validation():
    for key, val in [("steps", 0), ("batch_size", 0)]:
        cfg = ExperimentConfig()
        setattr(cfg, key, val)
        with pytest.raises(ConfigurationError):
            cfg.validate()
    cfg = ExperimentConfig()
    cfg.optim.lr = 0
    with pytest.raises(ConfigurationError):
        cfg.validate()
    cfg = ExperimentConfig(regime="bi_temporal")
    cfg.fusion.kind = "concat"
    cfg.degradation.kind = "low_res"
    with pytest.raises(ConfigurationError):
        cfg.validate()


def test_identical_runs_identical_logs(train50, tmp_path):
    cfg = small_experiment(steps=5, seed=2)
    a = train(cfg, train50, log_path=tmp_path / "a.jsonl")
    b = train(small_experiment(steps=5, seed=2), train50, log_path=tmp_path / "b.jsonl")
    assert a.log == b.log
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    rec = json.loads(a.log[0])
    assert rec["step"] == 1 and set(rec) == {"step", "total", "contrastive", "ce_binary"}


def test_checkpoint_resume_is_bit_exact(train50, tmp_path):
    full = train(small_experiment(steps=4, seed=3), train50)
    half = train(small_experiment(steps=4, seed=3), train50, steps=2)
    half.checkpoint.save(tmp_path / "c.cdp")
    loaded = Checkpoint.load(tmp_path / "c.cdp")
    assert loaded.step == 2
    assert loaded.to_bytes() == half.checkpoint.to_bytes()
    rest = train(loaded.config, train50, resume=loaded)
    assert half.log + rest.log == full.log
    for name, t in full.checkpoint.params.items():
        assert rest.checkpoint.params[name].data.tobytes() == t.data.tobytes(), name
    assert rest.checkpoint.to_bytes() == full.checkpoint.to_bytes()


def test_checkpoint_carries_config(train50):
    ck = train(small_experiment(steps=1, seed=4, fusion__K=3), train50).checkpoint
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert back.config.fusion.K == 3 and back.config_hash == ck.config_hash
    assert back.num_classes == 5


@pytest.fixture(scope="module")
def trained200(train50):
    return train(small_experiment(steps=200, seed=0), train50)


def test_loss_decreases_30_percent(trained200):
    totals = [json.loads(line)["total"] for line in trained200.log]
    assert len(totals) == 200
    start, end = np.median(totals[:20]), np.median(totals[-20:])
    assert end <= 0.7 * start, (start, end)


def test_bc_beats_all_zero_predictor(train50, trained200):
    rep = evaluate(trained200.checkpoint, train50)
    zero_bc = 0.0 if train50.change.any() else 1.0
    assert rep.bc > zero_bc


def test_low_res_1_equals_none(train50, trained200):
    ck = trained200.checkpoint
    base = evaluate(ck, train50)
    ck.config.degradation.factor = 1
    try:
        assert evaluate(ck, train50, "low_res").to_json() == base.to_json()
    finally:
        ck.config.degradation.factor = 8


def test_identity_high_level_equals_none(train50, trained200):
    ck = trained200.checkpoint
    base = evaluate(ck, train50)
    ck.config.degradation.mapping = "0:0,1:1,2:2,3:3,4:4"
    try:
        assert evaluate(ck, train50, "high_level").to_json() == base.to_json()
    finally:
        ck.config.degradation.mapping = "0:0,1:0,2:0,3:1,4:1"


def test_class_mismatch_rejected(train50, trained200):
    from condcd.raster import ClassSet
    from condcd.training import Dataset

    other = Dataset(train50.ids, train50.img_pre, train50.img_post, train50.map_pre,
                    train50.map_post, train50.change, ClassSet.numbered(6))
    with pytest.raises(DataError):
        evaluate(trained200.checkpoint, other)


def test_predict_yields_every_sample(train50, trained200):
    out = list(predict(trained200.checkpoint, train50, keep_attention=True))
    assert [i for i, *_ in out] == list(range(50))
    i, b_hat, m_hat, attn = out[0]
    assert b_hat.shape == (64, 64) and m_hat is None
    assert [a.shape[:2] for a in attn] == [(4, 8), (4, 16), (4, 16)]


def test_nan_loss_aborts(train50):
    from condcd.training import TrainingAborted

    cfg = small_experiment(steps=3, seed=0)
    cfg.optim.lr = 1e300
    with pytest.raises(TrainingAborted) as info:
        train(cfg, train50)
    assert info.value.step >= 2


def test_predicted_premap_mode(train50):
    cfg = small_experiment(steps=2, heads__scd_placement="on_post_features")
    ck = train(cfg, train50).checkpoint
    rep = evaluate(ck, train50, "predicted_premap")
    assert 0.0 <= rep.bc <= 1.0 and rep.sc is not None


def test_run_matrix_sorted_and_records_failures(train50):
    good_b = small_experiment("bi_temporal", "concat", seed=1, steps=2)
    good_a = small_experiment(seed=0, steps=2)
    bad = small_experiment(seed=5, steps=2)
    bad.fusion.K = 0
    rows = run_matrix([good_a, bad, good_b], train50, train50)
    assert [r.key()[0] for r in rows] == ["bi_temporal", "conditional", "conditional"]
    assert rows[2].error is not None and "FusionConfig.K" in rows[2].error
    from condcd.training import results_csv

    parsed = list(csv.reader(io.StringIO(results_csv(rows))))
    assert parsed[0] == RESULTS_HEADER
    assert parsed[3][4] == ""


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.tsv")
