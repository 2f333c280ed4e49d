import numpy as np
import pytest

from segtrus import train as T
from segtrus.data import TEST, TRAIN, Dataset, Rng, generate_samples, split_dataset
from segtrus.errors import (
    CheckpointError, ChecksumError, ConfigError, ShapeError, UsageError, VersionError,
)
from segtrus.model import NetworkConfig, ParamStore, init_params

SMALL_NET = NetworkConfig(input_size=(16, 16), widths=(4, 6), conv_counts=(2, 2))


def scalar_store(value=0.0):
    store = ParamStore()
    store.add("theta", np.array([value]))
    return store


def test_sgd_hand_calculation():
    store = scalar_store()
    store.grads["theta"][...] = 1.0
    store.grads_ready = True
    T.sgd_step(store, 0.1, 0.9)
    assert store.velocity["theta"][0] == pytest.approx(-0.1, abs=1e-15)
    assert store["theta"][0] == pytest.approx(-0.1, abs=1e-15)
    assert not store.grads["theta"].any() and not store.grads_ready
    store.grads["theta"][...] = 1.0
    store.grads_ready = True
    T.sgd_step(store, 0.1, 0.9)
    assert store.velocity["theta"][0] == pytest.approx(-0.19, abs=1e-15)
    assert store["theta"][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_without_momentum_is_plain_descent():
    store = scalar_store(2.0)
    store.grads["theta"][...] = 3.0
    store.grads_ready = True
    T.sgd_step(store, 0.5, 0.0)
    assert store["theta"][0] == 0.5


def test_sgd_matches_closed_form():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(25, 3, 2))
    lr, mu = 0.01, 0.9
    store = ParamStore()
    store.add("w", np.zeros((3, 2)))
    for t, g in enumerate(grads):
        store.grads["w"][...] = g
        store.grads_ready = True
        T.sgd_step(store, lr, mu)
        closed = -lr * sum(mu ** (t - j) * grads[j] for j in range(t + 1))
        np.testing.assert_allclose(store.velocity["w"], closed, atol=1e-12, rtol=0)


def test_sgd_needs_gradients():
    with pytest.raises(UsageError):
        T.sgd_step(scalar_store(), 0.1, 0.9)


@pytest.mark.parametrize("kwargs", [
    dict(learning_rate=0.0), dict(momentum=1.0), dict(batch_size=0), dict(epochs=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        T.TrainConfig(**kwargs)


def test_train_config_defaults():
    cfg = T.TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.epochs) == (0.0005, 0.9, 4, 30)


def small_dataset(n=12, size=16, seed=0):
    ds = Dataset(generate_samples(n, size, seed))
    return ds.with_split(split_dataset(ds, Rng(seed)))


def test_step_count(monkeypatch):
    ds = Dataset(generate_samples(4, 16, 0))
    ds = ds.with_split({sid: TRAIN for sid in ds.ids})
    calls = []
    real = T.sgd_step
    monkeypatch.setattr(T, "sgd_step", lambda *a: calls.append(1) or real(*a))
    _, log = T.run_training(ds, T.TrainConfig(epochs=1, network=SMALL_NET))
    assert len(calls) == 1 and len(log) == 1 and log[0].epoch == 1


def test_partial_last_batch(monkeypatch):
    ds = small_dataset(12)  # 11 train samples -> batches of 4, 4, 3
    sizes = []
    real = T.forward
    monkeypatch.setattr(T, "forward", lambda net, p, x, training: sizes.append(len(x)) or real(net, p, x, training))
    T.run_training(ds, T.TrainConfig(epochs=1, network=SMALL_NET))
    assert sizes == [4, 4, 3]


def test_training_is_bit_reproducible():
    ds = small_dataset()
    cfg = T.TrainConfig(learning_rate=20.0, epochs=2, seed=3, network=SMALL_NET)
    a, log_a = T.run_training(ds, cfg)
    b, log_b = T.run_training(ds, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert log_a == log_b


def test_training_errors():
    ds = small_dataset()
    with pytest.raises(ShapeError):
        T.run_training(ds, T.TrainConfig(network=SMALL_NET.replace(input_size=(32, 32))))
    with pytest.raises(UsageError):
        T.run_training(Dataset(ds.samples), T.TrainConfig(network=SMALL_NET))


def test_loss_decreases_on_phantoms():
    ds = Dataset(generate_samples(64, 32, 0))
    ds = ds.with_split(split_dataset(ds, Rng(0)))
    net = NetworkConfig(input_size=(32, 32), widths=(8, 16), conv_counts=(2, 2))
    _, log = T.run_training(ds, T.TrainConfig(learning_rate=50.0, epochs=4, network=net))
    assert log[-1].mean_loss < log[0].mean_loss


def test_evaluate_is_pure_and_repeatable():
    ds = small_dataset()
    ckpt, _ = T.run_training(ds, T.TrainConfig(learning_rate=20.0, epochs=1, network=SMALL_NET))
    before = ckpt.to_bytes()
    first = T.evaluate(ckpt, ds.subset(TEST))
    assert T.evaluate(ckpt, ds.subset(TEST)) == first
    assert ckpt.to_bytes() == before
    assert all(0.0 <= v <= 1.0 for v in first.per_image)
    with pytest.raises(UsageError):
        T.evaluate(ckpt, [])


def test_train_split_not_worse_than_test(desk_run):
    ds, ckpt = desk_run["dataset"], desk_run["checkpoint"]
    train_dsc = T.evaluate(ckpt, ds.subset(TRAIN)).average
    test_dsc = T.evaluate(ckpt, ds.subset(TEST)).average
    assert train_dsc >= test_dsc - 0.05


# ---- checkpoints ----------------------------------------------------------

@pytest.fixture
def checkpoint():
    params = init_params(SMALL_NET, 5)
    for i, buf in enumerate(params.buffers.values()):
        buf += 0.1 * i
    return T.Checkpoint(config=SMALL_NET, params=params, epoch=7)


def test_checkpoint_round_trip(tmp_path, checkpoint):
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, checkpoint)
    loaded = T.load_checkpoint(path)
    assert loaded.config == checkpoint.config and loaded.epoch == 7
    assert loaded.params.names() == checkpoint.params.names()
    assert all(loaded.params[n].tobytes() == checkpoint.params[n].tobytes() for n in loaded.params.names())
    assert all(loaded.params.buffers[n].tobytes() == checkpoint.params.buffers[n].tobytes()
               for n in checkpoint.params.buffers)
    T.save_checkpoint(tmp_path / "again.ckpt", loaded)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(checkpoint):
    blob = checkpoint.to_bytes()
    assert blob[:4] == b"VR19"
    assert int.from_bytes(blob[4:8], "little") == T.FORMAT_VERSION
    assert int.from_bytes(blob[8:16], "little") == len(blob) - 20


def test_checkpoint_flipped_byte(checkpoint):
    blob = bytearray(checkpoint.to_bytes())
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        T.Checkpoint.from_bytes(bytes(blob))


def test_checkpoint_version_bump(checkpoint):
    blob = bytearray(checkpoint.to_bytes())
    blob[4:8] = (T.FORMAT_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(VersionError):
        T.Checkpoint.from_bytes(bytes(blob))


@pytest.mark.parametrize("cut", [3, 16, 100])
def test_checkpoint_truncated(checkpoint, cut):
    with pytest.raises(CheckpointError):
        T.Checkpoint.from_bytes(checkpoint.to_bytes()[:cut])


def test_checkpoint_bad_magic(checkpoint):
    with pytest.raises(CheckpointError):
        T.Checkpoint.from_bytes(b"XXXX" + checkpoint.to_bytes()[4:])


# ---- ablation -------------------------------------------------------------

def test_ablation_shares_splits(monkeypatch, tmp_path):
    ds = Dataset(generate_samples(12, 16, 0))
    seen = []
    real = T.run_training
    monkeypatch.setattr(T, "run_training",
                        lambda d, cfg: seen.append((dict(d.split), cfg.network.nrc_enabled)) or real(d, cfg))
    base = T.TrainConfig(learning_rate=20.0, epochs=1, seed=4, network=SMALL_NET)
    result = T.run_ablation(ds, base, runs=2)
    assert [nrc for _, nrc in seen] == [True, False, True, False]
    assert seen[0][0] == seen[1][0] == result.splits[0]
    assert seen[2][0] == seen[3][0] == result.splits[1]
    assert seen[0][0] != seen[2][0]
    assert len(result.nrc_on) == len(result.nrc_off) == 2
    out = T.write_ablation(tmp_path, result)
    for name in ("nrc_on.csv", "nrc_off.csv"):
        rows = (out / name).read_text().splitlines()
        assert rows[0] == "DSC,Test run 1,Test run 2"
        assert all(0.0 <= float(v) <= 1.0 for row in rows[1:] for v in row.split(",")[1:])
    assert (out / "run_1_manifest.csv").exists()


def test_ablation_needs_runs():
    with pytest.raises(UsageError):
        T.run_ablation(small_dataset(), T.TrainConfig(network=SMALL_NET), runs=0)
