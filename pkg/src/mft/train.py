"""Class-weighted BCE training with Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .ingest import ClipSample
from .model import MFTConfig, MFTParameters, forward_batch, init_parameters, make_batch, predict
from .rng import DROPOUT, SHUFFLE, KeyedRNG

log = logging.getLogger(__name__)

# per-dataset learning rates used by the reference setup
LR_JAAD = 5e-7
LR_PIE = 2e-5


@dataclass
class TrainConfig:
    learning_rate: float = LR_JAAD
    epochs: int = 60
    batch_size: int = 2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    class_weighting: str = "ratio"
    grad_clip: float | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.class_weighting not in ("ratio", "none"):
            raise ConfigError("class_weighting must be 'ratio' or 'none'")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


def positive_weight(labels: Sequence[int], class_weighting: str = "ratio") -> float:
    """n_neg / n_pos on the training labels, or 1 without weighting."""
    if class_weighting == "none":
        return 1.0
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 1.0
    return n_neg / n_pos


def weighted_bce(prob: T.Tensor, labels, w_pos: float = 1.0, floor: float = 1e-12) -> T.Tensor:
    """Batch mean of -[w_pos*y*log p + (1-y)*log(1-p)]."""
    p = prob.data
    y = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    if p.shape != y.shape:
        raise ContractError(f"weighted_bce: prob {p.shape} vs labels {y.shape}")
    if not np.all((p >= 0) & (p <= 1)):
        raise NumericError("weighted_bce: probability outside [0, 1]")
    pc = np.clip(p.astype(np.float64), floor, 1.0 - floor)
    n = p.size
    losses = -(w_pos * y * np.log(pc) + (1 - y) * np.log1p(-pc))
    value = np.asarray(losses.mean(), dtype=p.dtype)

    def grad(g):
        dp = -(w_pos * y / pc - (1 - y) / (1 - pc)) / n
        return ((g * dp).astype(p.dtype),)

    return T.record("weighted_bce", value, (prob,), grad)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: MFTParameters) -> "AdamState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: Mapping[str, T.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grad_clip: float | None = None,
) -> None:
    """Bias-corrected Adam update, in place."""
    items = list(params.items())
    for name, t in items:
        if t.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient")
    grads = {name: t.grad for name, t in items}
    if grad_clip is not None:
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, t in items:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.data -= update.astype(t.data.dtype)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: MFTParameters
    best_params: MFTParameters
    best_epoch: int
    w_pos: float
    history: list[EpochRecord] = field(default_factory=list)

    def history_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.history]


def batch_loss(params: MFTParameters, clips: Sequence[ClipSample], w_pos: float, training: bool = False, rng=None) -> T.Tensor:
    batch = make_batch(clips, params.config, dtype=params["global.cls"].dtype)
    prob, _ = forward_batch(params, batch, training, rng)
    return weighted_bce(prob, batch.labels, w_pos)


def train(
    model_config: MFTConfig,
    train_clips: Sequence[ClipSample],
    val_clips: Sequence[ClipSample],
    config: TrainConfig,
    init: MFTParameters | None = None,
) -> TrainResult:
    """Shuffled mini-batch Adam; keeps the final and best-val-accuracy weights."""
    from .evaluate import compute_metrics

    if not train_clips:
        raise ContractError("train needs a nonempty training split")
    params = init.copy() if init is not None else init_parameters(model_config, config.seed)
    state = AdamState.zeros(params)
    w_pos = positive_weight([c.label for c in train_clips], config.class_weighting)
    keyed = KeyedRNG(config.seed)
    n = len(train_clips)
    history: list[EpochRecord] = []
    best_acc, best_epoch = -1.0, 0
    best = params.copy()
    log.info("training %d clips, %d parameters, w_pos=%.3f", n, params.count(), w_pos)
    for epoch in range(1, config.epochs + 1):
        order = keyed.stream(SHUFFLE, epoch).permutation(n)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            clips = [train_clips[i] for i in idx]
            params.zero_grad()
            with T.tape_scope():
                try:
                    loss = batch_loss(params, clips, w_pos, True, keyed.stream(DROPOUT, epoch, b))
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} batch {b}: {exc}") from None
                if not np.isfinite(loss.data):
                    raise NumericError(f"epoch {epoch} batch {b}: loss is not finite")
                T.backward(loss)
            adam_step(params, state, config.learning_rate, config.beta1, config.beta2, config.adam_eps, config.grad_clip)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        record = EpochRecord(epoch, total / seen)
        if val_clips:
            scores = predict(params, val_clips, config.eval_batch_size)
            record.val = compute_metrics(scores, [c.label for c in val_clips]).to_dict()
            if record.val["acc"] > best_acc:
                best_acc, best_epoch = record.val["acc"], epoch
                best = params.copy()
        log.info("epoch %d loss %.5f val %s", epoch, record.train_loss, record.val and round(record.val["acc"], 4))
        history.append(record)
    if not val_clips:
        best, best_epoch = params.copy(), config.epochs
    return TrainResult(params, best, best_epoch, w_pos, history)
