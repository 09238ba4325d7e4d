"""Adam + L1 training loop with a step-halving schedule and exact resume."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from . import tensor as T
from .data import PairSet, batch_iter
from .model import RNANWeights, read_weights, rnan_forward, write_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    patch: int = 48
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    halve_every_epochs: int = 200
    total_epochs: int = 1
    steps_per_epoch: int = 1000
    seed: int = 0
    precision: str = "float32"
    log_every: int = 100
    prefetch: int = 0

    def __post_init__(self):
        for name in ("batch_size", "patch", "halve_every_epochs", "total_epochs", "steps_per_epoch", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if not self.lr0 > 0 or not self.eps_adam > 0:
            raise ValueError("TrainConfig.lr0 and eps_adam must be positive")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"TrainConfig.precision must be float32 or float64, got {self.precision!r}")
        if self.seed < 0 or self.prefetch < 0:
            raise ValueError("TrainConfig.seed and prefetch must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every_epochs)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0,
            beta1,
            beta2,
            eps,
        )


def adam_step(
    params: Mapping[str, T.Tensor], grads: Mapping[str, np.ndarray | None] | None, state: AdamState, lr: float
) -> None:
    """Bias-corrected Adam update in place. ``grads=None`` reads ``param.grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        m, v = state.m[name], state.v[name]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        mhat = m / dt.type(c1)
        vhat = v / dt.type(c2)
        p.data -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(state.eps))


class TrainingDiverged(RuntimeError):
    pass


def train_step(
    weights: RNANWeights, batch: tuple[np.ndarray, np.ndarray], state: AdamState, lr: float, step: int = -1, ids=()
) -> float:
    """forward -> L1 -> backward -> Adam -> clear grads; returns the loss."""
    lr_img, hr_img = batch
    dtype = weights["head.weight"].dtype
    T.get_tape().clear()
    pred = rnan_forward(T.Tensor(np.asarray(lr_img, dtype=dtype)), weights, weights.config)
    loss = T.l1_loss(pred, T.Tensor(np.asarray(hr_img, dtype=dtype)))
    value = loss.item()
    if not math.isfinite(value):
        T.get_tape().clear()
        raise TrainingDiverged(f"non-finite loss {value} at step {step} (lr {lr:g}, images {list(ids)})")
    T.backward(loss)
    adam_step(weights, None, state, lr)
    weights.zero_grad()
    return value


# --------------------------------------------------------------------------
# checkpoints

OPT_MAGIC = b"RNANOPT\x00"
OPT_VERSION = 1


@dataclass
class Checkpoint:
    weights: RNANWeights
    state: AdamState
    step: int
    epoch: int
    seed: int
    train_config: dict = field(default_factory=dict)


def write_checkpoint(f: BinaryIO, ckpt: Checkpoint) -> None:
    write_weights(f, ckpt.weights)
    meta = json.dumps(ckpt.train_config, sort_keys=True).encode()
    f.write(OPT_MAGIC)
    f.write(struct.pack("<IQQQQ", OPT_VERSION, ckpt.state.t, ckpt.step, ckpt.epoch, ckpt.seed))
    f.write(struct.pack("<ddd", ckpt.state.beta1, ckpt.state.beta2, ckpt.state.eps))
    f.write(struct.pack("<I", len(meta)))
    f.write(meta)
    for name in ckpt.weights:
        for arr in (ckpt.state.m[name], ckpt.state.v[name]):
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(f: BinaryIO) -> Checkpoint:
    weights = read_weights(f)
    if f.read(len(OPT_MAGIC)) != OPT_MAGIC:
        raise ValueError("checkpoint has no optimizer section")
    version, t, step, epoch, seed = struct.unpack("<IQQQQ", f.read(36))
    if version != OPT_VERSION:
        raise ValueError(f"unsupported optimizer section version {version}")
    beta1, beta2, eps = struct.unpack("<ddd", f.read(24))
    (mlen,) = struct.unpack("<I", f.read(4))
    meta = json.loads(f.read(mlen))
    m, v = {}, {}
    for name, p in weights.items():
        dt = p.data.dtype.newbyteorder("<")
        for store in (m, v):
            raw = f.read(p.size * dt.itemsize)
            if len(raw) != p.size * dt.itemsize:
                raise ValueError("checkpoint truncated in optimizer section")
            store[name] = np.frombuffer(raw, dtype=dt).reshape(p.shape).astype(p.data.dtype, copy=True)
    return Checkpoint(weights, AdamState(m, v, t, beta1, beta2, eps), step, epoch, seed, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        write_checkpoint(f, ckpt)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return read_checkpoint(f)


# --------------------------------------------------------------------------
# loop


@contextlib.contextmanager
def strict_determinism(enabled: bool | None = None) -> Iterator[None]:
    """Single-threaded BLAS while active; ``None`` reads ``RNAN_DETERMINISTIC``."""
    if enabled is None:
        enabled = os.environ.get("RNAN_DETERMINISTIC", "") == "1"
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


@dataclass
class TrainResult:
    weights: RNANWeights
    state: AdamState
    losses: list[float]
    step: int


def train_loop(
    weights: RNANWeights,
    data: PairSet,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_step: int | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` Adam steps (or up to ``stop_step``).

    Batches depend only on (seed, step), so resuming from a checkpoint replays
    the uninterrupted run exactly. With ``out_dir`` set, a checkpoint is
    written after every epoch and losses are appended to ``metrics.csv``.
    """
    if resume is not None:
        weights, state, start = resume.weights, resume.state, resume.step
    else:
        state = AdamState.zeros_like(weights, cfg.beta1, cfg.beta2, cfg.eps_adam)
        start = 0
    end = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    data = PairSet(data.pairs, data.scale, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = start == 0 or not metrics_path.exists()
        metrics = open(metrics_path, "w" if fresh else "a", newline="")
        if fresh:
            metrics.write("step,epoch,lr,loss\n")
    losses = []
    try:
        with T.precision(cfg.precision), strict_determinism():
            for step, lr_b, hr_b, ids in batch_iter(data, cfg.batch_size, cfg.patch, start, end, cfg.prefetch):
                epoch = step // cfg.steps_per_epoch
                lr = lr_at_epoch(epoch, cfg)
                loss = train_step(weights, (lr_b, hr_b), state, lr, step, ids)
                losses.append(loss)
                done = step + 1
                if done % cfg.log_every == 0 or done == end:
                    log.info("step %d epoch %d lr %.3g loss %.5f", done, epoch, lr, loss)
                    if metrics is not None:
                        csv.writer(metrics, lineterminator="\n").writerow([done, epoch, f"{lr:.8g}", f"{loss:.8g}"])
                        metrics.flush()
                if out is not None and done % cfg.steps_per_epoch == 0:
                    ckpt = Checkpoint(weights, state, done, done // cfg.steps_per_epoch, cfg.seed, asdict(cfg))
                    save_checkpoint(ckpt, out / f"epoch_{ckpt.epoch:04d}.ckpt")
                    save_checkpoint(ckpt, out / "latest.ckpt")
    finally:
        if metrics is not None:
            metrics.close()
    return TrainResult(weights, state, losses, end)


def window_means(losses: list[float], window: int = 50) -> list[float]:
    n = len(losses) // window
    return [float(np.mean(losses[i * window : (i + 1) * window])) for i in range(n)]


def descent_fraction(losses: list[float], window: int = 50) -> float:
    """Share of consecutive window transitions whose mean loss does not increase."""
    means = window_means(losses, window)
    if len(means) < 2:
        return 1.0
    return sum(b <= a for a, b in zip(means, means[1:])) / (len(means) - 1)
