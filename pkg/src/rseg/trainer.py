"""Sequence training: Adam over backprop-through-time with early stopping.

A model is trained one sequence chunk per optimizer step. Long sequences are
split into consecutive chunks of at most ``max_seq_len`` slices; the last
prediction of a chunk is carried into the next chunk as a constant, so
gradients never flow across chunk boundaries regardless of mode. Early
stopping monitors the validation mean combined loss and restores the best
snapshot seen.

Checkpoints use a small binary format ("RSCK"): magic, version, a UTF-8
``key = value`` echo of the model config, then every named array (trainable
parameters and BN running statistics alike) as f32 little-endian payloads.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import ModelConfig, ParamStore, build_model
from .data import SliceSequence
from .loss import LossWeights, combined_loss, sequence_loss
from .recurrent import MODES, unroll_forward

CHECKPOINT_MAGIC = b"RSCK"
CHECKPOINT_VERSION = 1

_CONFIG_KEYS = ("backbone", "levels", "base_channels", "recurrent", "bn_eps", "bn_momentum")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 40
    patience: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    bptt_mode: str = "detach"
    teacher_forcing: bool = False
    threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_seq_len: int = 8

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")
        if self.bptt_mode not in MODES:
            raise ValueError(f"bptt_mode must be one of {MODES}, got {self.bptt_mode!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.max_seq_len < 1:
            raise ValueError(f"max_seq_len must be at least 1, got {self.max_seq_len}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float


class AdamState:
    """First/second moment accumulators mirroring the trainable parameters."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.trainable_items()}


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float) -> None:
    """Apply one Adam update in place; moments advance even when lr is 0."""
    if lr < 0.0:
        raise ValueError(f"lr must be nonnegative, got {lr}")
    names = [n for n, _ in params.trainable_items()]
    if set(grads) != set(names):
        raise ValueError("gradient names do not match the trainable parameters")
    state.step_count += 1
    c1 = 1.0 - state.beta1 ** state.step_count
    c2 = 1.0 - state.beta2 ** state.step_count
    for name, tens in params.trainable_items():
        g = np.asarray(grads[name])
        if g.shape != tens.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match {name!r} {tens.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tens.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sequence_gradients(params: ParamStore, tconfig: TrainConfig, seq: SliceSequence,
                       y0: np.ndarray = None):
    """Unroll, sum per-slice losses, backprop; (loss, grads, last prediction)."""
    if seq.labels is None:
        raise ValueError("training requires a labeled sequence")
    start = None if y0 is None else Tensor(y0)
    preds = unroll_forward(params, seq, y0=start, mode=tconfig.bptt_mode, train=True,
                           teacher_forcing=tconfig.teacher_forcing)
    targets = [Tensor(lbl) for lbl in seq.labels]
    loss = sequence_loss(preds, targets, tconfig.weights)
    params.zero_grads()
    ad.backward(loss)
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for n, t in params.trainable_items()}
    params.zero_grads()
    return float(loss.data), grads, preds[-1].data


def train_step(params: ParamStore, tconfig: TrainConfig, state: AdamState,
               seq: SliceSequence, y0: np.ndarray = None):
    """One optimizer step on one chunk; returns (loss, carry prediction)."""
    loss, grads, y_last = sequence_gradients(params, tconfig, seq, y0)
    adam_step(params, grads, state, tconfig.lr)
    return loss, y_last


def _chunks(seq: SliceSequence, max_len: int):
    for i in range(0, len(seq.frames), max_len):
        labels = None if seq.labels is None else seq.labels[i:i + max_len]
        yield SliceSequence(frames=seq.frames[i:i + max_len], labels=labels,
                            direction=seq.direction, orig_hw=seq.orig_hw,
                            pad_offset=seq.pad_offset, spacing_mm=seq.spacing_mm)


def validation_stats(params: ParamStore, tconfig: TrainConfig, val_set):
    """Eval-mode free-running pass; (mean per-slice loss, mean volume Dice)."""
    total = 0.0
    slices = 0
    dices = []
    with ad.no_grad():
        for seq in val_set:
            if seq.labels is None:
                raise ValueError("validation requires labeled sequences")
            preds = unroll_forward(params, seq, mode="detach", train=False)
            inter = 0
            a = 0
            b = 0
            for p, lbl in zip(preds, seq.labels):
                total += float(combined_loss(p, Tensor(lbl), tconfig.weights).data)
                slices += 1
                hard = p.data > tconfig.threshold
                gt = lbl > 0.5
                inter += int(np.count_nonzero(hard & gt))
                a += int(np.count_nonzero(hard))
                b += int(np.count_nonzero(gt))
            dices.append(1.0 if a + b == 0 else 2.0 * inter / (a + b))
    return total / slices, float(np.mean(dices))


def train(params: ParamStore, tconfig: TrainConfig, train_set, val_set):
    """Epoch loop with seeded shuffling; leaves params at the best snapshot."""
    if not train_set:
        raise ValueError("training set must not be empty")
    if not val_set:
        raise ValueError("validation set must not be empty")
    for seq in train_set:
        if seq.labels is None:
            raise ValueError("training requires labeled sequences")
    state = AdamState(params, tconfig.beta1, tconfig.beta2, tconfig.eps)
    rng = np.random.Generator(np.random.Philox(tconfig.seed))
    history = []
    best_val = np.inf
    best_snapshot = None
    stale = 0
    for epoch in range(tconfig.epochs):
        total = 0.0
        slices = 0
        for idx in rng.permutation(len(train_set)):
            carry = None
            for chunk in _chunks(train_set[idx], tconfig.max_seq_len):
                loss, carry = train_step(params, tconfig, state, chunk, y0=carry)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite training loss {loss!r} at epoch {epoch}, sequence {idx}"
                    )
                total += loss
                slices += len(chunk.frames)
        val_loss, val_dice = validation_stats(params, tconfig, val_set)
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        history.append(EpochStats(epoch, total / slices, val_loss, val_dice))
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = {n: t.data.copy() for n, t in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= tconfig.patience:
                break
    if best_snapshot is not None:
        for name, tens in params.items():
            tens.data[...] = best_snapshot[name]
    return history


def _config_blob(config: ModelConfig) -> bytes:
    lines = [f"{key} = {getattr(config, key)}" for key in _CONFIG_KEYS]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config(blob: bytes) -> ModelConfig:
    kwargs = {}
    for raw in blob.decode("utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep:
            raise ValueError(f"malformed config line {raw!r} in checkpoint")
        if key == "backbone":
            kwargs[key] = value
        elif key in ("levels", "base_channels"):
            kwargs[key] = int(value)
        elif key == "recurrent":
            if value not in ("True", "False"):
                raise ValueError(f"bad boolean {value!r} for config key {key!r}")
            kwargs[key] = value == "True"
        elif key in ("bn_eps", "bn_momentum"):
            kwargs[key] = float(value)
        else:
            raise ValueError(f"unknown config key {key!r} in checkpoint")
    return ModelConfig(**kwargs)


def save_checkpoint(params: ParamStore, path) -> None:
    """Atomic write (temp file then rename) of every named array as f32."""
    blob = _config_blob(params.config)
    entries = params.items()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(entries))
    for name, tens in entries:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(tens.data, dtype="<f4")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    target = os.fspath(path)
    tmp = target + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
    os.replace(tmp, target)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValueError("truncated checkpoint file")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ParamStore:
    """Rebuild the architecture from the config echo and fill in every array."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (blob_len,) = reader.unpack("<I")
    config = _parse_config(reader.take(blob_len))
    params = build_model(config, seed=0)
    (count,) = reader.unpack("<I")
    loaded = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if name in loaded:
            raise ValueError(f"duplicate parameter {name!r} in checkpoint")
        if name not in params:
            raise ValueError(f"unknown parameter {name!r} for this architecture")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        tens = params[name]
        if shape != tens.data.shape:
            raise ValueError(
                f"parameter {name!r} has shape {shape} in file, expected {tens.data.shape}"
            )
        n_vals = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(reader.take(4 * n_vals), dtype="<f4").reshape(shape)
        tens.data[...] = arr
        loaded.add(name)
    missing = [n for n in params.names() if n not in loaded]
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {missing[:3]}...")
    if reader.off != len(reader.buf):
        raise ValueError("trailing bytes after checkpoint payload")
    return params
