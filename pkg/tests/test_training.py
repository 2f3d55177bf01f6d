import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phinet import training
from phinet.arch import ParamStore, build_phinet
from phinet.phantom import PhantomSpec, generate_phantom
from phinet.tensor import NonFiniteError
from phinet.training import (
    SGD,
    Checkpoint,
    CheckpointFormatError,
    EarlyStopping,
    EpochRecord,
    PlateauScheduler,
    TrainConfig,
    checkpoint_bytes,
    fit,
    load_checkpoint,
    read_history_csv,
    save_checkpoint,
    stratified_split,
    train_epoch,
    train_step,
    write_history_csv,
)

from test_arch import narrow_phinet_spec


@pytest.fixture(scope="module")
def tiny_data():
    """12 small phantoms over 3 classes at 16^3, scaled to unit p99-ish range."""
    spec = PhantomSpec(extent=16, spacing=4.0)
    X, y = [], []
    for label, name in enumerate(("T1", "T2", "FLAIR")):
        for i in range(4):
            vol, _ = generate_phantom(name, spec, seed=(77, label, i))
            X.append(vol.data / np.percentile(vol.data, 99))
            y.append(label)
    return np.stack(X)[:, None].astype(np.float32), np.array(y)


def tiny_model(seed=0, **kw):
    return build_phinet(narrow_phinet_spec(**kw), seed=seed)


def quick_config(**kw):
    base = dict(batch_size=4, max_epochs=3, seed=3, record_time=False, val_fraction=0.25)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- optimizer and epoch


def test_sgd_single_parameter_hand_arithmetic():
    store = ParamStore()
    store.add("p", np.array([1.0]))
    opt = SGD(store, momentum=0.0)
    opt.step({"p": 2 * store["p"]}, lr=0.1)
    assert store["p"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_update_rule():
    store = ParamStore()
    store.add("p", np.array([1.0]))
    opt = SGD(store, momentum=0.5)
    opt.step({"p": np.array([1.0])}, lr=0.1)  # v = -0.1, p = 0.9
    opt.step({"p": np.array([1.0])}, lr=0.1)  # v = -0.05 - 0.1, p = 0.75
    assert store["p"][0] == pytest.approx(0.75)
    assert opt.velocity["p"][0] == pytest.approx(-0.15)


def test_zero_learning_rate_epoch_leaves_parameters(tiny_data):
    X, y = tiny_data
    model = tiny_model()
    before = model.params.copy()
    opt = SGD(model.params, 0.9)
    train_epoch(model, opt, X, y, np.arange(len(X)), quick_config(), 0.0, 1)
    for name in before:
        assert model.params[name].tobytes() == before[name].tobytes()
        assert not opt.velocity[name].any()


def test_zero_learning_rate_fit_over_three_epochs(tiny_data):
    model = tiny_model()
    before = model.params.copy()
    fit(model, tiny_data, quick_config(learning_rate=0.0))
    for name in before:
        assert model.params[name].tobytes() == before[name].tobytes()


def test_train_epoch_is_deterministic(tiny_data):
    X, y = tiny_data
    records = []
    for _ in range(2):
        model = tiny_model(seed=4)
        opt = SGD(model.params, 0.9)
        order = np.random.default_rng(1).permutation(len(X))
        records.append(train_epoch(model, opt, X, y, order, quick_config(), 0.01, 1, X[:3], y[:3]))
    assert records[0] == records[1]


def test_non_finite_loss_names_the_batch(tiny_data):
    X, y = tiny_data
    X = X.copy()
    X[5] = np.nan
    model = tiny_model()
    with pytest.raises(NonFiniteError, match="batch 1"):
        train_epoch(model, SGD(model.params), X, y, np.arange(len(X)), quick_config(), 0.01, 1)


def test_fixed_batch_loss_decreases_over_twenty_steps(tiny_data):
    X, y = tiny_data
    model = tiny_model(seed=2)
    opt = SGD(model.params, momentum=0.0)
    losses = [train_step(model, opt, X[:6], y[:6], 0.005) for _ in range(20)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


# ---------------------------------------------------------------- schedule and stopping


def test_early_stop_trace_stops_at_five_and_returns_epoch_two(monkeypatch, tiny_data):
    trace = [0.5, 0.9, 0.9, 0.9, 0.9, 0.9, 0.95, 0.95]

    def fake_epoch(model, opt, X, y, order, config, lr, epoch, X_val=None, y_val=None):
        return EpochRecord(epoch, 1.0, 1.0, trace[epoch - 1], lr, 0.0)

    monkeypatch.setattr(training, "train_epoch", fake_epoch)
    result = fit(tiny_model(), tiny_data, quick_config(max_epochs=8, early_stop_patience=3))
    assert [r.epoch for r in result.history] == [1, 2, 3, 4, 5]
    assert result.best.epoch == 2
    assert result.best.best_val_acc == 0.9


def test_max_epochs_one_gives_one_record(tiny_data):
    result = fit(tiny_model(), tiny_data, quick_config(max_epochs=1))
    assert len(result.history) == 1 and result.history[0].epoch == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60), st.integers(1, 5))
def test_plateau_schedule_properties(losses, patience):
    sched = PlateauScheduler(0.01, factor=0.5, patience=patience, floor=1e-5)
    lrs = [sched.step(v) for v in losses]
    prev = 0.01
    for lr in lrs:
        assert lr <= prev
        assert lr == prev or lr == prev * 0.5
        assert lr >= 1e-5
        prev = lr


def test_plateau_decays_after_patience_and_respects_floor():
    sched = PlateauScheduler(1e-4, factor=0.5, patience=2, floor=3e-5)
    assert [sched.step(v) for v in [1.0, 1.0, 1.0]] == [1e-4, 1e-4, 5e-5]
    assert [sched.step(v) for v in [1.0, 1.0]] == [5e-5, 5e-5]  # 2.5e-5 would cross the floor


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=40), st.integers(1, 6))
def test_early_stopping_keeps_earliest_maximum(accs, patience):
    stopper = EarlyStopping(patience)
    seen = []
    for epoch, acc in enumerate(accs, start=1):
        stopper.update(epoch, acc)
        seen.append(acc)
        if stopper.should_stop:
            break
    assert stopper.best_acc == max(seen)
    assert stopper.best_epoch == seen.index(max(seen)) + 1


def test_config_validation():
    for bad in (dict(decay_factor=1.0), dict(decay_factor=0.0), dict(plateau_patience=0),
                dict(early_stop_patience=0), dict(val_fraction=0.6), dict(val_fraction=0.0), dict(task="regression")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- splits and errors


def test_stratified_split_is_seeded_and_stratified():
    labels = np.repeat([0, 1, 2], [10, 20, 5])
    tr, va = stratified_split(labels, 0.2, seed=1)
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(len(labels)))
    assert np.bincount(labels[va]).tolist() == [2, 4, 1]
    tr2, va2 = stratified_split(labels, 0.2, seed=1)
    assert tr.tolist() == tr2.tolist() and va.tolist() == va2.tolist()
    assert stratified_split(labels, 0.2, seed=2)[1].tolist() != va.tolist()


def test_fit_errors(tiny_data):
    X, y = tiny_data
    with pytest.raises(ValueError, match="empty"):
        fit(tiny_model(), (X[:0], y[:0]), quick_config())
    with pytest.raises(ValueError, match="missing"):
        fit(tiny_model(), (X[:8], y[:8]), quick_config())
    with pytest.raises(ValueError, match="2-class"):
        fit(tiny_model(), tiny_data, quick_config(task="binary"))


# ---------------------------------------------------------------- determinism and checkpoints


def test_fit_is_deterministic(tiny_data):
    runs = [fit(tiny_model(seed=1), tiny_data, quick_config()) for _ in range(2)]
    assert runs[0].history == runs[1].history
    assert runs[0].best.params.equals(runs[1].best.params)
    assert checkpoint_bytes(runs[0].last) == checkpoint_bytes(runs[1].last)


def test_checkpoint_round_trip_is_lossless(tmp_path, tiny_data):
    result = fit(tiny_model(), tiny_data, quick_config(max_epochs=2))
    ck = result.last
    save_checkpoint(ck, tmp_path / "a.phiw")
    loaded = load_checkpoint(tmp_path / "a.phiw")
    assert loaded.params.equals(ck.params)
    for name, v in ck.velocity.items():
        assert loaded.velocity[name].tobytes() == v.tobytes()
    assert loaded.rng_state == ck.rng_state
    assert loaded.epoch == ck.epoch and loaded.best_val_acc == ck.best_val_acc
    save_checkpoint(loaded, tmp_path / "b.phiw")
    assert (tmp_path / "a.phiw").read_bytes() == (tmp_path / "b.phiw").read_bytes()
    x = tiny_data[0][:3]
    before = ck.build_model().forward(x).data
    assert loaded.build_model().forward(x).data.tobytes() == before.tobytes()


def test_checkpoint_header_layout(tmp_path):
    model = tiny_model()
    raw = checkpoint_bytes(Checkpoint(model.params, {}, 0, 0.0, {}, _model_dict(model)))
    assert raw[:4] == b"PHIW"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(model.params.params) + len(model.params.buffers)


def _model_dict(model):
    from phinet.arch import spec_to_dict

    return spec_to_dict(model.spec)


def _valid_bytes():
    model = tiny_model()
    return checkpoint_bytes(Checkpoint(model.params, {}, 0, 0.0, {}, _model_dict(model)))


@pytest.mark.parametrize(
    "corrupt,match",
    [
        (lambda r: b"XXXX" + r[4:], "magic"),
        (lambda r: r[:4] + (2).to_bytes(4, "little") + r[8:], "version"),
        (lambda r: r[: len(r) // 2], "truncated"),
        (lambda r: r[:8] + (int.from_bytes(r[8:12], "little") - 1).to_bytes(4, "little") + r[12:], None),
        (lambda r: r + b"\x00", "trailing"),
    ],
)
def test_checkpoint_corruption_rejected(tmp_path, corrupt, match):
    path = tmp_path / "bad.phiw"
    path.write_bytes(corrupt(_valid_bytes()))
    with pytest.raises(CheckpointFormatError, match=match):
        load_checkpoint(path)


def test_checkpoint_name_inconsistency_rejected(tmp_path):
    model = tiny_model()
    store = model.params.copy()
    store.params["intruder.weight"] = np.zeros(3, np.float32)
    path = tmp_path / "extra.phiw"
    save_checkpoint(Checkpoint(store, {}, 0, 0.0, {}, _model_dict(model)), path)
    with pytest.raises(CheckpointFormatError, match="do not match"):
        load_checkpoint(path)


def test_resume_matches_uninterrupted_run(tmp_path, tiny_data):
    cfg = quick_config(max_epochs=4)
    full = fit(tiny_model(seed=5), tiny_data, cfg, checkpoint_dir=tmp_path / "full")
    fit(tiny_model(seed=5), tiny_data, dataclasses.replace(cfg, max_epochs=2), checkpoint_dir=tmp_path / "part")
    resumed = fit(tiny_model(seed=5), tiny_data, cfg, checkpoint_dir=tmp_path / "part", resume=True)
    assert resumed.history == full.history
    assert resumed.best.params.equals(full.best.params)
    assert (tmp_path / "full" / "last.phiw").read_bytes() == (tmp_path / "part" / "last.phiw").read_bytes()


def test_history_csv_round_trip(tmp_path):
    rows = [EpochRecord(1, 0.5, 0.6, 0.75, 0.01, 1.25), EpochRecord(2, 1 / 3, math.pi, 1.0, 0.005, 0.0)]
    write_history_csv(rows, tmp_path / "h.csv")
    text = (tmp_path / "h.csv").read_text()
    assert text.splitlines()[0] == "epoch,train_loss,val_loss,val_acc,lr,seconds"
    assert read_history_csv(tmp_path / "h.csv") == rows
