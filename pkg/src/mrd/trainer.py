"""Training loop for the point encoder against frozen image/text embeddings."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding_space import TripletDataset
from .encoder import PARAM_NAMES, PointEncoder
from .errors import BadMagic, ConfigError, DimMismatch, MRDIOError, NonFiniteLoss
from .evaluation import zero_shot_classify
from .losses import LossParams, LossReport, WeightLogits, dynamic_weights, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MRDC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQQQ")

CSV_COLUMNS = ("step", "align", "intra", "cross_p2t", "cross_p2i", "total", "alpha", "beta", "gamma", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 200
    warmup_fraction: float = 0.15
    batch_size: int = 160
    seed: int = 0
    loss: LossParams = field(default_factory=LossParams)
    logits_lr: float | None = None
    logits_weight_decay: float = 0.0
    hidden: int = 64
    tau_min: float = 1e-3
    tau_max: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    update_mode: str = "joint"

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and hidden >= 1 are required")
        if self.weight_decay < 0 or self.logits_weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if not 0 < self.tau_min <= self.loss.tau_align <= self.tau_max:
            raise ConfigError("initial tau_align must lie within [tau_min, tau_max]")
        if self.update_mode != "joint":
            # alternating (bi-level) updates are reserved, not implemented
            raise ConfigError(f"unsupported update_mode {self.update_mode!r}")

    @property
    def effective_logits_lr(self) -> float:
        return self.lr if self.logits_lr is None else self.logits_lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossParams.from_dict(d.get("loss", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def total_steps(n_samples: int, config: TrainConfig) -> int:
    return config.epochs * steps_per_epoch(n_samples, config)


def steps_per_epoch(n_samples: int, config: TrainConfig) -> int:
    # the trailing partial batch is dropped
    return max(1, n_samples // config.batch_size)


def lr_at(step: int, config: TrainConfig, n_steps: int) -> float:
    """Linear warm-up to ``config.lr`` followed by cosine decay to 0 at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup = int(round(config.warmup_fraction * n_steps))
    if step < warmup:
        return config.lr * step / warmup
    decay_steps = n_steps - 1 - warmup
    if decay_steps <= 0:
        return config.lr
    progress = min(1.0, (step - warmup) / decay_steps)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay over a dict of named arrays."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps=1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float], decays: dict[str, float]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            lr = lrs[name]
            if decays[name]:
                p *= 1.0 - lr * decays[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    encoder: PointEncoder
    log_tau: np.ndarray  # shape (1,)
    logits: np.ndarray  # 3 x 2
    optimizer: AdamW

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau[0]))

    def weight_logits(self) -> WeightLogits:
        return WeightLogits.from_array(self.logits)

    def trainables(self) -> dict[str, np.ndarray]:
        params = self.encoder.params()
        params["log_tau"] = self.log_tau
        params["logits"] = self.logits
        return params


def init_state(config: TrainConfig, out_dim: int, rng: np.random.Generator) -> TrainState:
    encoder = PointEncoder.init(config.hidden, out_dim, rng)
    log_tau = np.array([math.log(config.loss.tau_align)])
    logits = np.zeros((3, 2))
    params = {**encoder.params(), "log_tau": log_tau, "logits": logits}
    return TrainState(encoder, log_tau, logits, AdamW(params, config.betas, config.adam_eps))


def compute_step(state: TrainState, clouds, image, text, params: LossParams):
    """Forward and backward pass on one batch; returns ``(report, grads_by_param)``."""
    point, cache = state.encoder.forward(clouds)
    params = dataclasses.replace(params, tau_align=state.tau)
    report, grads = total_loss(point, image, text, state.weight_logits(), params)
    if not math.isfinite(report.total):
        raise NonFiniteLoss(f"total loss is {report.total}")
    named = state.encoder.backward(grads.point, cache)
    named["log_tau"] = np.array([grads.tau_align * state.tau])
    named["logits"] = grads.logits
    return report, named


def apply_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, config: TrainConfig) -> None:
    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.grad_clip:
            grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
    logits_lr = lr * config.effective_logits_lr / config.lr
    lrs = {name: lr for name in PARAM_NAMES}
    lrs.update(log_tau=lr, logits=logits_lr)
    decays = {name: config.weight_decay for name in PARAM_NAMES}
    decays.update(log_tau=0.0, logits=config.logits_weight_decay)
    state.optimizer.step(state.trainables(), grads, lrs, decays)
    np.clip(state.log_tau, math.log(config.tau_min), math.log(config.tau_max), out=state.log_tau)


@dataclass
class StepRecord:
    step: int
    report: LossReport
    lr: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def weights(self) -> np.ndarray:
        """``S x 3`` array of the logged ``(alpha, beta, gamma)``."""
        return np.array([[r.report.alpha, r.report.beta, r.report.gamma] for r in self.steps]).reshape(-1, 3)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r.report, name) for r in self.steps])


@dataclass
class TrainResult:
    encoder: PointEncoder
    logits: WeightLogits
    log: TrainLog
    tau_align: float


def train(dataset: TripletDataset, config: TrainConfig, eval_set: TripletDataset | None = None,
          progress: bool = False) -> TrainResult:
    """Fit the point encoder; image/text embeddings of ``dataset`` are read, never modified."""
    config.validate()
    if config.batch_size > dataset.n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {dataset.n}")
    rng = np.random.default_rng(int(config.seed))
    state = init_state(config, dataset.image_emb.d, rng)
    image = dataset.image_emb.as_float64()
    text = dataset.text_emb.as_float64()
    clouds = dataset.clouds.astype(np.float64)
    per_epoch = steps_per_epoch(dataset.n, config)
    n_steps = config.epochs * per_epoch
    train_log = TrainLog()

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(dataset.n)
        totals = []
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            report, grads = compute_step(state, clouds[idx], image[idx], text[idx], config.loss)
            lr = lr_at(step, config, n_steps)
            apply_step(state, grads, lr, config)
            train_log.steps.append(StepRecord(step, report, lr))
            totals.append(report.total)
            step += 1
        snapshot = {"epoch": epoch, "mean_total": float(np.mean(totals)), "tau_align": state.tau}
        if eval_set is not None:
            emb = state.encoder.encode(eval_set.clouds)
            zs = zero_shot_classify(emb, eval_set.class_text_emb.as_float64(), eval_set.labels, (1,))
            snapshot["zero_shot_top1"] = zs.values[0]
        train_log.epochs.append(snapshot)
        if progress:
            log.info("epoch %d: %s", epoch, snapshot)

    return TrainResult(state.encoder, state.weight_logits(), train_log, state.tau)


def final_weights(result: TrainResult, params: LossParams) -> tuple[float, float, float]:
    if not params.dd_enabled:
        return 0.5, 0.5, 0.5
    return dynamic_weights(result.logits)


# --- persistence -------------------------------------------------------------

def save_checkpoint(result: TrainResult, path) -> None:
    """``MRDC`` header then every parameter as little-endian float64.

    Parameter order: w1, b1, w2, b2, w3, b3, log_tau, weight logits (3 x 2).
    """
    enc = result.encoder
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 3, enc.hidden, enc.out_dim)
    arrays = [getattr(enc, n) for n in PARAM_NAMES]
    arrays += [np.array([math.log(result.tau_align)]), result.logits.as_array()]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    try:
        with open(path, "wb") as fh:
            fh.write(header + payload)
    except OSError as exc:
        raise MRDIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> TrainResult:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise MRDIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size or raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path} is not an MRDC checkpoint")
    _, version, in_dim, hidden, out_dim = _CKPT_HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION or in_dim != 3:
        raise BadMagic(f"{path}: unsupported checkpoint version {version} / input dim {in_dim}")
    shapes = [(hidden, 3), (hidden,), (hidden, hidden), (hidden,), (out_dim, hidden), (out_dim,), (1,), (3, 2)]
    sizes = [int(np.prod(s)) for s in shapes]
    values = np.frombuffer(raw[_CKPT_HEADER.size:], dtype="<f8")
    if values.size != sum(sizes) or (len(raw) - _CKPT_HEADER.size) % 8:
        raise DimMismatch(f"{path}: payload does not match declared dims {hidden} x {out_dim}")
    parts, offset = [], 0
    for shape, size in zip(shapes, sizes):
        parts.append(values[offset:offset + size].reshape(shape).astype(np.float64))
        offset += size
    encoder = PointEncoder(*parts[:6])
    return TrainResult(encoder, WeightLogits.from_array(parts[7]), TrainLog(), float(np.exp(parts[6][0])))


def write_trainlog_csv(train_log: TrainLog, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rec in train_log.steps:
                r = rec.report
                writer.writerow([rec.step] + [repr(float(x)) for x in (
                    r.align, r.intra, r.cross_p2t, r.cross_p2i, r.total, r.alpha, r.beta, r.gamma, rec.lr)])
    except OSError as exc:
        raise MRDIOError(f"cannot write train log {path}: {exc}") from exc


def read_trainlog_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "StepRecord",
    "AdamW",
    "lr_at",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_trainlog_csv",
    "read_trainlog_csv",
]
