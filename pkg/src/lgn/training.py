"""Soft IoU labels, masked binary cross-entropy, Adam and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample
from .errors import ConfigError, IngestionError, NoProposalError, OptimizerError
from .grad.tensor import Parameter, Tape, Tensor, record
from .model import LGNModel
from .moments import iou_field, valid_mask
from .text import pad_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelConfig:
    t_min: float = 0.0
    t_max: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise ConfigError(f"need 0 <= t_min < t_max <= 1, got ({self.t_min}, {self.t_max})")


def soft_label(o: float, cfg: LabelConfig) -> float:
    if o <= cfg.t_min:
        return 0.0
    if o >= cfg.t_max:
        return 1.0
    return (o - cfg.t_min) / (cfg.t_max - cfg.t_min)


def label_field(field_: np.ndarray, valid: np.ndarray, cfg: LabelConfig) -> np.ndarray:
    """Elementwise :func:`soft_label` on valid cells, 0 elsewhere."""
    o = np.asarray(field_, dtype=np.float64)
    mid = (o - cfg.t_min) / (cfg.t_max - cfg.t_min)
    y = np.where(o <= cfg.t_min, 0.0, np.where(o >= cfg.t_max, 1.0, mid))
    return np.where(valid, y, 0.0)


def masked_bce(p, y: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over valid cells.

    ``p`` and ``y`` are [N, N] or [B, N, N]; the mean runs over every valid
    cell of every sample. Invalid cells never enter the computation.
    """
    if not isinstance(p, Tensor):
        p = Tensor(p)
    valid = np.asarray(valid, dtype=bool)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} do not match scores {p.shape}")
    count = int(valid.sum()) * (p.size // valid.size)
    if count == 0:
        raise NoProposalError("masked_bce: no valid cells")
    sel = np.broadcast_to(valid, p.shape)
    pv, yv = p.data[sel], y[sel]
    loss = -np.sum(yv * np.log(pv) + (1.0 - yv) * np.log(1.0 - pv)) / count

    def adjoint(g):
        grad = np.zeros(p.shape)
        grad[sel] = -(yv / pv - (1.0 - yv) / (1.0 - pv)) * (float(g) / count)
        return (grad,)

    return record(np.array(loss), (p,), adjoint, "masked_bce")


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over parameters whose ``requires_grad`` is set."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        live = [p for p in params if p.requires_grad]
        for p in live:
            if p.grad is None:
                raise OptimizerError(f"parameter {p.name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in live:
            g = p.grad
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": dict(self.m),
            "v": dict(self.v),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Adam":
        opt = cls(state["lr"], state["beta1"], state["beta2"], state["eps"])
        opt.step_count = int(state["step"])
        opt.m = {k: np.array(a, dtype=np.float64) for k, a in state["m"].items()}
        opt.v = {k: np.array(a, dtype=np.float64) for k, a in state["v"].items()}
        return opt


def adam_step(params: list[Parameter], state: Adam) -> None:
    state.step(params)


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 writes only the final one
    labels: LabelConfig = field(default_factory=LabelConfig)

    def __post_init__(self):
        if isinstance(self.labels, dict):
            self.labels = LabelConfig(**self.labels)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"need epochs >= 1 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: LGNModel
    log: list
    optimizer: Adam


def attach_labels(samples: list[Sample], model: LGNModel, cfg: LabelConfig) -> list[np.ndarray]:
    n = model.config.N
    valid = valid_mask(n)
    out = []
    for s in samples:
        try:
            out.append(label_field(iou_field(n, s.span, s.duration_s), valid, cfg))
        except Exception as exc:
            raise IngestionError(f"sample {s.query_id}: {exc}") from exc
    return out


def _check_samples(samples: list[Sample], model: LGNModel) -> None:
    want = (model.config.d_v, model.config.N, model.config.N)
    for s in samples:
        if s.cells.shape != want:
            raise IngestionError(f"sample {s.query_id}: cell features {s.cells.shape}, model expects {want}")


def train_step(model: LGNModel, opt: Adam, batch: list[Sample], labels: list[np.ndarray], rng) -> float:
    cells = np.stack([s.cells for s in batch])
    ids, lengths = pad_batch([s.ids for s in batch])
    y = np.stack(labels)
    with Tape() as tape:
        p = model.forward_maps(cells, ids, lengths, training=True, rng=rng)
        loss = masked_bce(p, y, valid_mask(model.config.N))
    tape.backward(loss)
    opt.step(model.params)
    model.params.zero_grad()
    return loss.item()


def train(
    samples: list[Sample],
    model: LGNModel,
    cfg: TrainConfig,
    out: str | Path | None = None,
    log_path: str | Path | None = None,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Run epochs ``start_epoch .. cfg.epochs-1``.

    Shuffling and dropout draw from a generator seeded by ``(cfg.seed, epoch)``,
    so a run resumed from a checkpoint replays exactly the epochs it skipped.
    """
    if not samples:
        raise IngestionError("training set is empty")
    _check_samples(samples, model)
    labels = attach_labels(samples, model, cfg.labels)
    opt = optimizer or Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    log = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(samples))
            total = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                loss = train_step(model, opt, [samples[i] for i in idx], [labels[i] for i in idx], rng)
                total += loss * len(idx)
            row = {
                "epoch": epoch + 1,
                "mean_loss": total / len(samples),
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            log.append(row)
            logger.info("epoch %d loss %.6f", row["epoch"], row["mean_loss"])
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            last = epoch + 1 == cfg.epochs
            due = cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0
            if out is not None and (last or due):
                path = Path(out)
                if due and not last:
                    path = path.with_name(f"{path.stem}.epoch{epoch + 1}{path.suffix}")
                save_checkpoint(path, model, opt.state_dict(), {"epoch": epoch + 1, "train": cfg.to_dict()})
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, log, opt)


def resume(path: str | Path, samples: list[Sample], cfg: TrainConfig, out=None, log_path=None) -> TrainResult:
    """Continue training from a checkpoint written by :func:`train`."""
    model, opt_state, state = load_checkpoint(path)
    opt = Adam.from_state(opt_state) if opt_state else None
    start = int(state["epoch"]) if state else 0
    return train(samples, model, cfg, out, log_path, optimizer=opt, start_epoch=start)
