"""Metrics, attention summaries and the ablation grid."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import ConfigError, ContractError
from .ingest import ClipSample
from .model import MFTConfig, MFTParameters, forward_batch, make_batch, param_count, predict
from .train import TrainConfig, train


class UndefinedMetricError(ContractError):
    pass


@dataclass
class MetricsReport:
    acc: float
    auc: float | None
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0 or s.size != y.size:
        raise ContractError(f"need equal-length nonempty scores/labels, got {s.size} and {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U statistic with average ranks for ties."""
    s, y = _check_scores(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Hard predictions at ``score >= threshold``; 0/0 ratios are reported as 0."""
    s, y = _check_scores(scores, labels)
    pred = (s >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    try:
        auc = roc_auc(s, y)
    except UndefinedMetricError:
        auc = None
    return MetricsReport(
        acc=(tp + tn) / y.size, auc=auc, f1=f1, precision=precision, recall=recall,
        tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold,
    )


# -- attention -----------------------------------------------------------------


@dataclass
class AttentionSummary:
    tokens: tuple[str, ...]
    mc: np.ndarray  # (h, k, k)
    gc: np.ndarray  # (h', 1, k)
    n_clips: int

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "n_clips": self.n_clips,
            "mc": {"per_head": self.mc.tolist(), "head_mean": self.mc.mean(axis=0).tolist()},
            "gc": {"per_head": self.gc.tolist(), "head_mean": self.gc.mean(axis=0).tolist()},
        }

    def gc_weight(self, token: str) -> np.ndarray:
        """Per-head averaged GC weight placed on ``token``."""
        return self.gc[:, 0, self.tokens.index(token)]


def attention_summary(params: MFTParameters, clips: Sequence[ClipSample], batch_size: int = 256) -> AttentionSummary:
    """Mean over clips of the per-head MC and GC attention matrices."""
    if not clips:
        raise ContractError("attention_summary needs at least one clip")
    mc_sum = gc_sum = None
    tokens: tuple[str, ...] = ()
    with T.no_grad():
        for lo in range(0, len(clips), batch_size):
            batch = make_batch(clips[lo : lo + batch_size], params.config, dtype=params["global.cls"].dtype)
            _, trace = forward_batch(params, batch, training=False)
            tokens = trace.tokens
            mc = trace.mc.astype(np.float64).sum(axis=0)
            gc = trace.gc.astype(np.float64).sum(axis=0)
            mc_sum = mc if mc_sum is None else mc_sum + mc
            gc_sum = gc if gc_sum is None else gc_sum + gc
    n = len(clips)
    return AttentionSummary(tokens, mc_sum / n, gc_sum / n, n)


# -- ablation --------------------------------------------------------------------

VARIANTS: dict[str, dict] = {
    "full": {},
    "v1": {"use_E": False},
    "v2": {"use_P": False},
    "v3": {"use_P": False, "use_E": False},
    "v4": {"ccr_mode": "mean_pool"},
    "v5": {"ccr_mode": "modality_attn"},
}
TABLE_COLUMNS = ("variant", "acc", "auc", "f1", "precision", "recall", "params", "best_epoch")


def variant_config(base: MFTConfig, name: str) -> MFTConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}")
    return replace(base, **VARIANTS[name])


@dataclass
class AblationRow:
    variant: str
    report: MetricsReport
    params: int
    best_epoch: int

    def to_dict(self) -> dict:
        return {"variant": self.variant, "params": self.params, "best_epoch": self.best_epoch, **self.report.to_dict()}


def ablation_run(
    base: MFTConfig,
    variants: Sequence[str],
    train_clips: Sequence[ClipSample],
    val_clips: Sequence[ClipSample],
    test_clips: Sequence[ClipSample],
    train_config: TrainConfig,
    use_best: bool = True,
) -> list[AblationRow]:
    """Train every variant from the same seed and data; score on the test clips."""
    for name in variants:
        variant_config(base, name)  # fail fast on a bad name
    rows = []
    for name in variants:
        cfg = variant_config(base, name)
        result = train(cfg, train_clips, val_clips, train_config)
        chosen = result.best_params if use_best else result.params
        scores = predict(chosen, test_clips, train_config.eval_batch_size)
        report = compute_metrics(scores, [c.label for c in test_clips])
        rows.append(AblationRow(name, report, param_count(cfg), result.best_epoch))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        r = row.report
        auc = "" if r.auc is None else f"{r.auc:.4f}"
        writer.writerow(
            [row.variant, f"{r.acc:.4f}", auc, f"{r.f1:.4f}", f"{r.precision:.4f}", f"{r.recall:.4f}", row.params, row.best_epoch]
        )
    return buf.getvalue()
