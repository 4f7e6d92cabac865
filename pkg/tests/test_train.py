import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qosforecast import autodiff as ad
from qosforecast.errors import CorruptFile, EmptySplit, FrameTooShort, VersionMismatch
from qosforecast.ingest import MetricColumn, MetricFrame, NormalizationStats
from qosforecast.labeling import LabelParams, ProxyLabelSeries
from qosforecast.model import ModelConfig, forward, init_params, loss_terms, trainable
from qosforecast.train import (
    ModelBundle,
    build_dataset,
    load_checkpoint,
    save_checkpoint,
    split_chronological,
    train,
)

T0 = 28_000_000
COLS = (MetricColumn("q", is_qos=True), MetricColumn("x"))


def frame(n, ts=None, seed=0):
    vals = np.random.default_rng(seed).random((n, 2))
    ts = T0 + np.arange(n) if ts is None else np.asarray(ts)
    return MetricFrame(ts, COLS, vals)


# -- dataset ------------------------------------------------------------------

def test_dataset_counts():
    assert len(build_dataset(frame(100), None, 60, 10)) == 31
    assert len(build_dataset(frame(70), None, 60, 10)) == 1
    with pytest.raises(FrameTooShort):
        build_dataset(frame(69), None, 60, 10)


def test_sample_contents():
    f = frame(20)
    d = build_dataset(f, None, 5, 3)
    s = d[0]
    assert s.t == T0 + 4
    np.testing.assert_array_equal(s.X, f.values[0:5])
    assert s.y_true.tolist() == [f.values[7, 0]]
    assert np.all(np.diff(d.anchor_times) > 0)


@pytest.mark.parametrize("w,gamma,stride", [(1, 1, 1), (3, 2, 1), (5, 4, 3), (10, 7, 4), (60, 10, 1)])
def test_count_formula_matches_enumeration(w, gamma, stride):
    for n in range(w + gamma, 301):
        brute = sum(1 for a in range(n) if a >= w - 1 and a + gamma < n and (a - w + 1) % stride == 0)
        got = len(build_dataset(frame(n), None, w, gamma, stride))
        assert got == brute == (n - w - gamma) // stride + 1


def test_dataset_skips_windows_across_gaps():
    ts = np.concatenate([T0 + np.arange(10), T0 + 12 + np.arange(10)])
    d = build_dataset(frame(20, ts), None, 4, 2)
    # each contiguous run of 10 rows gives 10 - 4 - 2 + 1 anchors
    assert len(d) == 10
    assert np.all(d.target_times - d.anchor_times == 2)


def test_labels_read_at_target_time():
    f = frame(12)
    lab = np.zeros(12, dtype=bool)
    lab[9] = True
    series = {"q": ProxyLabelSeries("q", f.timestamps, lab, LabelParams(), 0.5)}
    d = build_dataset(f, series, 3, 2)
    assert d.labels[:, 0].tolist() == [t == T0 + 9 for t in d.target_times]


# -- split --------------------------------------------------------------------

def test_split_sizes_and_order():
    d = build_dataset(frame(101), None, 1, 1)  # 100 samples
    tr, va, te = split_chronological(d, 0.7, 0.1)
    assert (len(tr), len(te)) == (70, 20)
    # the last validation sample targets the first test minute, so the guard drops it
    assert len(va) == 9
    assert tr.anchor_times[-1] < va.anchor_times[0] < te.anchor_times[0]


def test_split_guard_hand_case():
    # w=2, gamma=1 on 14 rows: anchors 1..12 split 6/3/3
    d = build_dataset(frame(14), None, 2, 1)
    tr, va, te = split_chronological(d, 0.5, 0.25)
    assert te.anchors.tolist() == [10, 11, 12]
    # test inputs start at row 9; val anchors 8 and 9 target rows 9 and 10 and go
    assert va.anchors.tolist() == [7]
    assert tr.anchors.tolist() == [1, 2, 3, 4, 5, 6]


def test_split_all_to_train_is_empty_test():
    d = build_dataset(frame(101), None, 1, 1)
    with pytest.raises(EmptySplit):
        split_chronological(d, 1.0, 0.1)
    with pytest.raises(EmptySplit):
        split_chronological(d, 0.9, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(40, 300), st.integers(1, 12), st.integers(1, 12),
       st.floats(0.3, 0.7), st.floats(0.05, 0.2))
def test_no_leakage_into_test_period(n, w, gamma, f_tr, f_va):
    d = build_dataset(frame(n), None, w, gamma)
    try:
        tr, va, te = split_chronological(d, f_tr, f_va)
    except EmptySplit:
        return
    test_start = te.anchor_times[0] - w + 1
    for part in (tr, va):
        assert np.all(part.anchor_times < test_start)
        assert np.all(part.target_times < test_start)


# -- training -----------------------------------------------------------------

def tiny_cfg(**kw):
    base = dict(n_metrics=2, qos=("q",), w=6, gamma=2, hidden_per_direction=4,
                mdn_hidden=(8,), clf_hidden=(4,), C=2, seed=5, dropout_p=0.0)
    base.update(kw)
    return ModelConfig(**base)


def predictable_data(n=500, seed=0):
    # q at t+2 is a noisy copy of x at t, so the future is learnable from the window
    rng = np.random.default_rng(seed)
    x = np.clip(0.5 + 0.3 * np.sin(np.arange(n) / 7.0) + 0.05 * rng.normal(size=n), 0, 1)
    q = np.roll(x, 2) + 0.01 * rng.normal(size=n)
    f = MetricFrame(T0 + np.arange(n), COLS, np.column_stack([q, x]))
    lab = q > np.quantile(q, 0.9)
    series = {"q": ProxyLabelSeries("q", f.timestamps, lab, LabelParams(), 0.0)}
    return split_chronological(build_dataset(f, series, 6, 2), 0.7, 0.1)


def test_learning_reduces_val_nll():
    tr, va, _ = predictable_data()
    _, rep = train(tiny_cfg(), tr, va, epochs=30, batch_size=32, patience=30)
    best = rep.history[rep.best_epoch]
    assert best.val_nll < rep.history[0].val_nll
    assert rep.best_epoch <= rep.epochs_run


def test_training_is_deterministic():
    tr, va, _ = predictable_data(200)
    cfg = tiny_cfg(dropout_p=0.3)
    p1, r1 = train(cfg, tr, va, epochs=3, batch_size=16)
    p2, r2 = train(cfg, tr, va, epochs=3, batch_size=16)
    assert r1 == r2
    assert ad.encode_params(p1) == ad.encode_params(p2)


def test_lambda_changes_trajectory():
    tr, va, _ = predictable_data(200)
    p0, _ = train(tiny_cfg(lam=0.0), tr, va, epochs=2, batch_size=16)
    p1, _ = train(tiny_cfg(lam=1.0), tr, va, epochs=2, batch_size=16)
    assert ad.encode_params(p0) != ad.encode_params(p1)


def test_empty_split_rejected():
    tr, va, _ = predictable_data(200)
    with pytest.raises(EmptySplit):
        train(tiny_cfg(), tr.subset([]), va)


def test_small_adam_step_lowers_batch_loss():
    tr, _, _ = predictable_data(300)
    X, y, lab = tr.batch(np.arange(64))
    lowered = 0
    seeds = range(40)
    for seed in seeds:
        cfg = tiny_cfg(seed=seed)
        params = init_params(cfg)
        before = loss_terms(forward(X, params, cfg), y, lab, cfg).total
        ad.backward(before)
        ad.adam_step(trainable(params, cfg), ad.AdamState(lr=1e-4))
        with ad.no_grad():
            after = loss_terms(forward(X, params, cfg), y, lab, cfg).total
        lowered += after.item() < before.item()
    assert lowered >= 0.95 * len(seeds)


# -- checkpoints ----------------------------------------------------------------

def bundle():
    cfg = tiny_cfg()
    return ModelBundle(init_params(cfg), cfg, NormalizationStats({"q": 0.0, "x": 1.0}, {"q": 2.0, "x": 3.0}),
                       COLS, LabelParams(window=7), {"q": 1.5}, theta=0.25, youden_j=0.5)


def test_checkpoint_round_trip(tmp_path):
    b = bundle()
    save_checkpoint(b, tmp_path / "a.qfck")
    back = load_checkpoint(tmp_path / "a.qfck")
    assert back.config == b.config and back.sidecar() == b.sidecar()
    for k in b.params:
        assert back.params[k].data.tobytes() == b.params[k].data.tobytes()
    save_checkpoint(back, tmp_path / "b.qfck")
    assert (tmp_path / "a.qfck").read_bytes() == (tmp_path / "b.qfck").read_bytes()
    assert (tmp_path / "a.qfck.json").read_text() == (tmp_path / "b.qfck.json").read_text()


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(bundle(), tmp_path / "a.qfck")
    blob = (tmp_path / "a.qfck").read_bytes()
    (tmp_path / "a.qfck").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "a.qfck")


def test_checkpoint_future_sidecar(tmp_path):
    save_checkpoint(bundle(), tmp_path / "a.qfck")
    side = tmp_path / "a.qfck.json"
    side.write_text(side.read_text().replace('"format": 1', '"format": 99'))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "a.qfck")


def test_checkpoint_missing_sidecar(tmp_path):
    save_checkpoint(bundle(), tmp_path / "a.qfck")
    (tmp_path / "a.qfck.json").unlink()
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "a.qfck")
