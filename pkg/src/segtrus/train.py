"""SGD with momentum, the training loop, evaluation, checkpoints and ablation.

Checkpoint layout (all integers little-endian)::

    b"VR19" | u32 version | u64 payload length | payload | u32 CRC32(payload)

    payload = u64 len + config JSON
            | u64 epoch
            | u64 count + params   (u64 name len, name, u64 ndim, u64 dims..., f64 data)
            | u64 count + buffers  (same record layout)
"""

from __future__ import annotations

import csv
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss_metrics as LM
from .data import TEST, TRAIN, Rng, split_dataset, write_manifest
from .errors import (
    CheckpointError, ChecksumError, ConfigError, NumericError, ShapeError, UsageError, VersionError,
)
from .model import NetworkConfig, ParamStore, backward, build_network, forward, init_params

logger = logging.getLogger(__name__)

MAGIC = b"VR19"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_U64 = struct.Struct("<Q")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")


def sgd_step(params, lr, mu):
    """Heavy-ball update ``v <- mu*v - lr*g; theta <- theta + v``, then zero grads."""
    if not params.grads_ready:
        raise UsageError("sgd_step called before gradients were populated")
    for name, theta in params.params.items():
        v = params.velocity[name]
        v *= mu
        v -= lr * params.grads[name]
        theta += v
    params.zero_grad()
    return params


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: NetworkConfig
    params: ParamStore
    epoch: int = 0

    def to_bytes(self):
        parts = [_pack_blob(self.config.to_json().encode("utf-8")), _U64.pack(self.epoch)]
        for group in (self.params.params, self.params.buffers):
            parts.append(_U64.pack(len(group)))
            for name, arr in group.items():
                parts.append(_pack_blob(name.encode("utf-8")))
                parts.append(_U64.pack(arr.ndim))
                parts.extend(_U64.pack(d) for d in arr.shape)
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        payload = b"".join(parts)
        return (_HEADER.pack(MAGIC, FORMAT_VERSION, len(payload)) + payload
                + _CRC.pack(zlib.crc32(payload)))

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < _HEADER.size:
            raise CheckpointError("file too short for a checkpoint header", offset=len(blob))
        magic, version, length = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}", offset=0)
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}", offset=4)
        end = _HEADER.size + length
        if len(blob) < end + _CRC.size:
            raise CheckpointError("truncated checkpoint", offset=len(blob))
        if len(blob) > end + _CRC.size:
            raise CheckpointError("trailing bytes after checkpoint", offset=end + _CRC.size)
        payload = blob[_HEADER.size:end]
        (stored,) = _CRC.unpack_from(blob, end)
        if zlib.crc32(payload) != stored:
            raise ChecksumError("CRC32 mismatch: checkpoint payload is corrupted", offset=_HEADER.size)
        return _parse_payload(payload)


def _pack_blob(data):
    return _U64.pack(len(data)) + data


class _Reader:
    def __init__(self, payload):
        self.buf = payload
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("payload ends early", offset=_HEADER.size + self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self):
        return _U64.unpack(self.take(_U64.size))[0]

    def blob(self):
        return self.take(self.u64())

    def tensor(self):
        name = self.blob().decode("utf-8")
        dims = tuple(self.u64() for _ in range(self.u64()))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        return name, data


def _parse_payload(payload):
    r = _Reader(payload)
    try:
        config = NetworkConfig.from_json(r.blob().decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid network config: {exc}") from exc
    epoch = r.u64()
    params = [r.tensor() for _ in range(r.u64())]
    buffers = [r.tensor() for _ in range(r.u64())]
    if r.pos != len(payload):
        raise CheckpointError("unparsed bytes at end of payload", offset=_HEADER.size + r.pos)

    template = init_params(config, seed=0)
    store = ParamStore()
    if [n for n, _ in params] != template.names() or [n for n, _ in buffers] != list(template.buffers):
        raise CheckpointError("stored tensors do not match the network described by its config")
    for name, arr in params:
        if arr.shape != template[name].shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {template[name].shape}")
        store.add(name, arr)
    for name, arr in buffers:
        store.add_buffer(name, arr)
    return Checkpoint(config=config, params=store, epoch=epoch)


def save_checkpoint(path, checkpoint):
    Path(path).write_bytes(checkpoint.to_bytes())


def load_checkpoint(path):
    return Checkpoint.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    mean_loss: float
    train_dsc: float


def _stack(samples):
    x = np.stack([s.image for s in samples])[:, None]
    m = np.stack([s.mask for s in samples])
    return x, m


def _check_sizes(samples, config):
    for s in samples:
        if s.image.shape != config.input_size:
            raise ShapeError(
                f"sample {s.id} has size {s.image.shape}, network expects {config.input_size}")


def run_training(dataset, train_cfg, progress=None):
    """Train from scratch on the dataset's train split.

    Returns the final :class:`Checkpoint` and a list of :class:`EpochLog`.
    The result depends only on the dataset contents and ``train_cfg``.
    """
    if dataset.split is None:
        raise UsageError("dataset has no train/test split")
    train = dataset.subset(TRAIN)
    if not train:
        raise UsageError("train split is empty")
    net_cfg = train_cfg.network
    _check_sizes(train, net_cfg)

    network = build_network(net_cfg)
    params = init_params(net_cfg, train_cfg.seed)
    order_rng = Rng(train_cfg.seed + 1)
    log = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = order_rng.shuffle(list(range(len(train))))
        losses, scores = [], []
        for step, start in enumerate(range(0, len(order), train_cfg.batch_size), start=1):
            batch = [train[i] for i in order[start:start + train_cfg.batch_size]]
            x, m = _stack(batch)
            try:
                probs, trace = forward(network, params, x, training=True)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            weights = LM.class_weights(m)
            loss = LM.weighted_ce(probs, m, weights)
            if not np.isfinite(loss):
                raise NumericError(f"epoch {epoch} step {step}: non-finite loss")
            backward(network, params, trace, LM.weighted_ce_grad(probs, m, weights))
            sgd_step(params, train_cfg.learning_rate, train_cfg.momentum)
            losses.append(loss)
            pred = LM.binarize(probs)
            scores.extend(LM.dsc(pred[b], m[b]) for b in range(len(batch)))
        entry = EpochLog(epoch=epoch, mean_loss=float(np.mean(losses)), train_dsc=float(np.mean(scores)))
        log.append(entry)
        logger.debug("epoch %d loss %.6g train dsc %.4f", entry.epoch, entry.mean_loss, entry.train_dsc)
        if progress is not None:
            progress(entry)
    return Checkpoint(config=net_cfg, params=params, epoch=train_cfg.epochs), log


def predict_proba(checkpoint, images, chunk=16):
    """Inference-mode probabilities for a (N, 1, H, W) image batch."""
    network = build_network(checkpoint.config)
    out = []
    for start in range(0, len(images), chunk):
        probs, _ = forward(network, checkpoint.params, images[start:start + chunk], training=False)
        out.append(probs)
    return np.concatenate(out)


def evaluate(checkpoint, samples):
    """Per-image DSC report of the inference-mode network on ``samples``."""
    samples = list(samples)
    if not samples:
        raise UsageError("cannot evaluate on an empty split")
    _check_sizes(samples, checkpoint.config)
    x, m = _stack(samples)
    pred = LM.binarize(predict_proba(checkpoint, x))
    return LM.report_stats([LM.dsc(pred[i], m[i]) for i in range(len(samples))])


def write_log_csv(path, log):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "train_dsc"])
        for e in log:
            writer.writerow([e.epoch, repr(e.mean_loss), repr(e.train_dsc)])


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

@dataclass
class AblationResult:
    nrc_on: list
    nrc_off: list
    splits: list

    @property
    def mean_on(self):
        return float(np.mean([r.average for r in self.nrc_on]))

    @property
    def mean_off(self):
        return float(np.mean([r.average for r in self.nrc_off]))

    @property
    def difference(self):
        return self.mean_on - self.mean_off


def run_ablation(dataset, base_cfg, runs=5, progress=None):
    """Train and test with NRC on and off on ``runs`` random splits.

    Run ``k`` (1-based) splits with ``Rng(seed + k)`` and trains both
    variants with seed ``seed + k`` on that identical split.
    """
    if runs < 1:
        raise UsageError("runs must be at least 1")
    result = AblationResult(nrc_on=[], nrc_off=[], splits=[])
    for k in range(1, runs + 1):
        split = split_dataset(dataset, Rng(base_cfg.seed + k))
        ds = dataset.with_split(split)
        result.splits.append(split)
        for nrc, bucket in ((True, result.nrc_on), (False, result.nrc_off)):
            cfg = TrainConfig(
                learning_rate=base_cfg.learning_rate, momentum=base_cfg.momentum,
                batch_size=base_cfg.batch_size, epochs=base_cfg.epochs, seed=base_cfg.seed + k,
                network=base_cfg.network.replace(nrc_enabled=nrc),
            )
            ckpt, _ = run_training(ds, cfg)
            report = evaluate(ckpt, ds.subset(TEST))
            bucket.append(report)
            logger.info("run %d nrc=%s avg dsc %.4f", k, nrc, report.average)
            if progress is not None:
                progress(k, nrc, report)
    return result


def write_ablation(out_dir, result):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "nrc_on.csv").write_text(LM.reports_to_table(result.nrc_on))
    (out / "nrc_off.csv").write_text(LM.reports_to_table(result.nrc_off))
    (out / "summary.csv").write_text(
        "nrc_on_mean,nrc_off_mean,difference\n"
        f"{result.mean_on:.6f},{result.mean_off:.6f},{result.difference:.6f}\n")
    for k, split in enumerate(result.splits, start=1):
        write_manifest(out / f"run_{k}_manifest.csv", split)
    return out
