"""Central finite-difference check of every parameter gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ingest import CONTEXT_WIDTHS, ClipSample
from .model import MFTConfig, init_parameters, make_batch, forward_batch, dropout_stream
from .train import weighted_bce


@dataclass
class ParamCheck:
    name: str
    size: int
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    dtype: str
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "step": self.step,
            "dtype": self.dtype,
            "max_rel_error": self.max_rel_error,
            "failures": self.failures,
            "parameters": [c.__dict__ for c in self.checks],
        }


def random_clips(config: MFTConfig, n: int, seed: int = 0) -> list[ClipSample]:
    """Random inputs with label-code-like categorical columns."""
    rng = np.random.default_rng(seed)
    widths = CONTEXT_WIDTHS[config.flavor]
    N = config.n_frames
    clips = []
    for i in range(n):
        clips.append(
            ClipSample(
                P=rng.integers(0, 3, size=(N, widths["P"])).astype(np.float64),
                L=rng.normal(size=(N, 4)),
                V=rng.normal(size=(N, 1)),
                E=rng.integers(0, 3, size=(N, widths["E"])).astype(np.float64),
                label=i % 2,
                tte_frames=30,
                flavor=config.flavor,
            )
        )
    return clips


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / scale) if scale > 1e-12 else float(diff)


def gradient_check(
    config: MFTConfig,
    seed: int = 0,
    batch_size: int = 3,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    w_pos: float = 1.7,
) -> GradCheckReport:
    """Compare backward() against central differences for every scalar.

    Runs in float64 with dropout active under a replayed mask.
    """
    with T.precision(np.float64):
        params = init_parameters(config, seed, dtype=np.float64)
        # move tokens and norm params off their init values so every path is generic
        rng = np.random.default_rng(seed + 1)
        for name, t in params.items():
            if name.endswith(("cls", "norm.g", "norm.b")):
                t.data += rng.normal(0.0, 0.3, size=t.shape)
        batch = make_batch(random_clips(config, batch_size, seed), config, dtype=np.float64)

        def loss_value() -> T.Tensor:
            prob, _ = forward_batch(params, batch, True, dropout_stream(seed, 0, 0))
            return weighted_bce(prob, batch.labels, w_pos)

        params.zero_grad()
        with T.tape_scope():
            T.backward(loss_value())
        report = GradCheckReport(tolerance, step, "float64")
        with T.no_grad():
            for name, t in params.items():
                analytic = t.grad.copy()
                numeric = np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                num_flat = numeric.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = float(loss_value().data)
                    flat[i] = orig - step
                    down = float(loss_value().data)
                    flat[i] = orig
                    num_flat[i] = (up - down) / (2 * step)
                err = relative_error(analytic, numeric)
                report.checks.append(ParamCheck(name, t.size, err, err < tolerance))
    return report
