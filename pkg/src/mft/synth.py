"""Synthetic pedestrian tracks with a planted crossing rule.

Each track draws five latent features, one or more per context:

    crosswalk (E, binary)   looking (P, binary)   walking (P, binary)
    decel (V, standard normal: ego deceleration rate)
    drift (L, standard normal: lateral bbox velocity)

The clean label is ``w . f + bias > 0``; the observed label flips it with
probability ``noise``. Binary latents are held constant along a track, decel
sets the slope of a piecewise-linear speed profile and drift the lateral
velocity of a smoothed bbox random walk, so every sampled clip exposes them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import ConfigError, ContractError
from .ingest import (
    CODE_TABLES,
    JAAD,
    PIE,
    FrameAnnotation,
    PedestrianTrack,
    check_flavor,
    code_tables,
)
from .rng import SYNTH, KeyedRNG

FEATURES = ("crosswalk", "looking", "walking", "decel", "drift")
BINARY = ("crosswalk", "looking", "walking")
GAUSSIAN = ("decel", "drift")
FEATURE_CONTEXT = {"crosswalk": "E", "looking": "P", "walking": "P", "decel": "V", "drift": "L"}

FRAME_W, FRAME_H = 1920, 1080
DECEL_PER_UNIT = 0.12  # km/h per frame per unit of the decel latent
DRIFT_PER_UNIT = 2.5  # px per frame per unit of the drift latent


@dataclass(frozen=True)
class ScenarioRule:
    weights: tuple[float, ...] = (2.5, 1.5, 1.5, 1.0, 1.0)
    bias: float | None = None  # None: solve for the target positive rate
    noise: float = 0.05
    flavor: str = JAAD
    binary_prior: float = 0.5
    positive_rate: float = 1.0 / 3.0

    def __post_init__(self):
        if len(self.weights) != len(FEATURES):
            raise ConfigError(f"rule needs {len(FEATURES)} weights, got {len(self.weights)}")
        if not all(math.isfinite(w) for w in self.weights):
            raise ConfigError("rule weights must be finite")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError("noise must lie in [0, 0.5)")
        if not 0.0 < self.binary_prior < 1.0:
            raise ConfigError("binary_prior must lie in (0, 1)")
        object.__setattr__(self, "flavor", check_flavor(self.flavor))
        if self.bias is None:
            object.__setattr__(self, "bias", self._solve_bias())

    @property
    def weight(self) -> dict[str, float]:
        return dict(zip(FEATURES, self.weights))

    def _hidden_gaussian_sd(self, hidden: Sequence[str]) -> float:
        w = self.weight
        return math.sqrt(sum(w[f] ** 2 for f in GAUSSIAN if f in hidden))

    def clean_probability(self, latents: np.ndarray, observed: Sequence[str] = FEATURES) -> np.ndarray:
        """P(clean label = 1 | observed latents), marginalizing the rest exactly.

        Hidden binaries are enumerated under their prior; hidden Gaussians
        contribute a normal tail probability.
        """
        latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        w = self.weight
        hidden = [f for f in FEATURES if f not in observed]
        base = np.full(latents.shape[0], float(self.bias))
        for j, f in enumerate(FEATURES):
            if f in observed:
                base += w[f] * latents[:, j]
        hidden_bin = [f for f in BINARY if f in hidden]
        sd = self._hidden_gaussian_sd(hidden)
        prob = np.zeros_like(base)
        for combo in itertools.product((0, 1), repeat=len(hidden_bin)):
            weight = math.prod(self.binary_prior if c else 1 - self.binary_prior for c in combo)
            logit = base + sum(w[f] * c for f, c in zip(hidden_bin, combo))
            if sd > 0:
                prob += weight * norm.sf(-logit / sd)
            else:
                prob += weight * (logit > 0)
        return prob

    def positive_fraction(self, bias: float) -> float:
        rule = ScenarioRule(self.weights, bias, self.noise, self.flavor, self.binary_prior, self.positive_rate)
        return float(rule.clean_probability(np.zeros((1, len(FEATURES))), observed=())[0])

    def _solve_bias(self) -> float:
        total = sum(abs(w) for w in self.weights) + 10.0
        f = lambda b: self.positive_fraction(b) - self.positive_rate  # noqa: E731
        if f(-total) * f(total) > 0:
            return 0.0
        return float(brentq(f, -total, total, xtol=1e-12))

    def expected_bayes_accuracy(self) -> float:
        """All features observed: the threshold rule errs only on flipped labels."""
        return 1.0 - self.noise

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["features"] = list(FEATURES)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioRule":
        d = {k: v for k, v in d.items() if k != "features"}
        d["weights"] = tuple(d["weights"])
        return cls(**d)


E_ONLY_WEIGHTS = (4.0, 0.0, 0.0, 0.0, 0.0)


def e_only_rule(noise: float = 0.05, flavor: str = JAAD) -> ScenarioRule:
    """Label carried by the crosswalk flag alone (environment context)."""
    return ScenarioRule(E_ONLY_WEIGHTS, bias=-2.0, noise=noise, flavor=flavor)


@dataclass
class SyntheticDataset:
    rule: ScenarioRule
    seed: int
    tracks: list[PedestrianTrack]
    latents: np.ndarray  # (n_tracks, 5)
    clean_labels: np.ndarray
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def flavor(self) -> str:
        return self.rule.flavor

    def split(self, name: str) -> list[PedestrianTrack]:
        return [self.tracks[i] for i in self.splits[name]]

    def split_counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


def split_sizes(n_tracks: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n_tracks))
    n_val = int(round(0.1 * n_tracks))
    return n_train, n_val, n_tracks - n_train - n_val


def _smooth_walk(rng: np.random.Generator, n: int, step_sd: float) -> np.ndarray:
    steps = rng.normal(0.0, step_sd, size=n)
    kernel = np.ones(5) / 5.0
    return np.cumsum(np.convolve(steps, kernel, mode="same"))


def _generate_track(index: int, rule: ScenarioRule, rng: np.random.Generator) -> tuple[PedestrianTrack, np.ndarray, int]:
    flavor = rule.flavor
    tables = code_tables(flavor)
    binary = (rng.random(3) < rule.binary_prior).astype(float)
    gauss = rng.normal(size=2)
    latent = np.concatenate([binary, gauss])
    clean = int(float(np.dot(rule.weights, latent)) + rule.bias > 0)
    label = clean ^ int(rng.random() < rule.noise)

    length = int(rng.integers(60, 121))
    event = length - 1
    t = np.arange(length)

    # speed: decelerate from the start until shortly before the event, then hold
    s0 = rng.uniform(40.0, 60.0)
    rate = DECEL_PER_UNIT * gauss[0]
    knee = event - 25
    speed = s0 - rate * np.minimum(t, knee)
    speed = np.maximum(speed + rng.normal(0.0, 0.3, size=length), 0.5)

    # bbox: lateral drift plus a smoothed random walk; slow looming
    h0 = rng.uniform(80.0, 250.0)
    heights = h0 * (1.0 + 0.002 * t)
    widths = 0.4 * heights
    vx = DRIFT_PER_UNIT * gauss[1]
    # center the path so the drift stays inside the frame
    cx0 = FRAME_W / 2 - vx * length / 2 + rng.uniform(-250.0, 250.0)
    cx = cx0 + vx * t + _smooth_walk(rng, length, 0.5)
    bottom = rng.uniform(600.0, 950.0) + _smooth_walk(rng, length, 0.3)
    cx = np.clip(cx, widths / 2 + 1, FRAME_W - widths / 2 - 1)
    bottom = np.clip(bottom, heights + 1, FRAME_H - 1)

    behavior_const = {
        "motion_state": "walking" if binary[2] else "standing",
        "gaze_state": "looking" if binary[1] else "not_looking",
        "motion_direction": str(rng.choice(tables["motion_direction"])),
    }
    gesture = str(rng.choice(tables["hand_gesture"]))
    nod_rate = rng.uniform(0.0, 0.2)
    environment = {
        "lane_count": int(rng.integers(1, 5)),
        "intersection": bool(rng.random() < 0.5),
        "crosswalk": bool(binary[0]),
        "traffic_light": str(rng.choice(CODE_TABLES["traffic_light"])),
        "traffic_direction": str(rng.choice(CODE_TABLES["traffic_direction"])),
        "signage_type": str(rng.choice(CODE_TABLES["signage_type"])),
    }
    if flavor == JAAD:
        environment["road_type"] = str(rng.choice(CODE_TABLES["road_type"]))
        environment["stop_sign"] = bool(rng.random() < 0.3)

    frames = []
    nods = rng.random(length) < nod_rate
    for i in range(length):
        behavior = dict(behavior_const)
        behavior["hand_gesture"] = gesture
        if flavor == JAAD:
            behavior["head_nod"] = "nodding" if nods[i] else "other"
        elif nods[i]:
            behavior["hand_gesture"] = "nod"
        bbox = (
            round(float(cx[i] - widths[i] / 2), 2),
            round(float(bottom[i] - heights[i]), 2),
            round(float(cx[i] + widths[i] / 2), 2),
            round(float(bottom[i]), 2),
        )
        frames.append(FrameAnnotation(i, behavior, bbox, round(float(speed[i]), 3), dict(environment)))
    track = PedestrianTrack(f"syn{index:05d}", frames, event, label, (FRAME_W, FRAME_H), flavor)
    return track, latent, clean


def generate_dataset(n_tracks: int, rule: ScenarioRule | None = None, seed: int = 0, flavor: str | None = None) -> SyntheticDataset:
    """Tracks plus latent features and a deterministic 70/10/20 track split."""
    if n_tracks < 10:
        raise ConfigError("n_tracks must be at least 10")
    rule = rule or ScenarioRule()
    if flavor is not None and check_flavor(flavor) != rule.flavor:
        rule = ScenarioRule(rule.weights, rule.bias, rule.noise, flavor, rule.binary_prior, rule.positive_rate)
    keyed = KeyedRNG(seed)
    tracks, latents, clean = [], [], []
    for i in range(n_tracks):
        track, latent, c = _generate_track(i, rule, keyed.stream(SYNTH, i))
        tracks.append(track)
        latents.append(latent)
        clean.append(c)
    order = keyed.stream(SYNTH, n_tracks, 1).permutation(n_tracks)
    n_train, n_val, _ = split_sizes(n_tracks)
    splits = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    return SyntheticDataset(rule, seed, tracks, np.array(latents), np.array(clean), splits)


def bayes_accuracy(
    rule: ScenarioRule,
    dataset: SyntheticDataset,
    contexts: Sequence[str] = ("P", "L", "V", "E"),
    split: str | None = None,
) -> float:
    """Accuracy of thresholding P(clean=1 | observed features) at 0.5.

    Features of contexts outside ``contexts`` are marginalized under the
    generator's priors. Scored against the dataset's observed labels.
    """
    if not isinstance(dataset, SyntheticDataset):
        raise ContractError("bayes_accuracy needs a dataset produced by generate_dataset")
    if dataset.rule != rule:
        raise ContractError("dataset was generated under a different rule")
    idx = dataset.splits[split] if split else list(range(len(dataset.tracks)))
    observed = [f for f in FEATURES if FEATURE_CONTEXT[f] in contexts]
    prob = rule.clean_probability(dataset.latents[idx], observed)
    labels = np.array([dataset.tracks[i].label for i in idx])
    return float(((prob > 0.5).astype(int) == labels).mean())


def manifest(dataset: SyntheticDataset) -> dict:
    return {
        "seed": dataset.seed,
        "flavor": dataset.flavor,
        "n_tracks": len(dataset.tracks),
        "splits": dataset.split_counts(),
        "rule": dataset.rule.to_dict(),
        "expected_bayes_accuracy": dataset.rule.expected_bayes_accuracy(),
        "bayes_accuracy": {
            name: bayes_accuracy(dataset.rule, dataset, split=name) for name in dataset.splits
        },
    }


__all__ = [
    "E_ONLY_WEIGHTS",
    "FEATURES",
    "FEATURE_CONTEXT",
    "PIE",
    "ScenarioRule",
    "e_only_rule",
    "SyntheticDataset",
    "bayes_accuracy",
    "generate_dataset",
    "manifest",
    "split_sizes",
]
