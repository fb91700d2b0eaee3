"""Annotation ingestion, clip sampling and per-context encoding.

Input is UTF-8 JSONL, one record per annotated frame::

    {"ped_id": "p01", "frame": 12, "bbox": [x1, y1, x2, y2], "speed": 23.5,
     "behavior": {...}, "environment": {...},
     "event_frame": 99, "label": 1, "frame_w": 1920, "frame_h": 1080}

``behavior`` / ``environment`` keys depend on the flavor (see BEHAVIOR_KEYS
and ENVIRONMENT_KEYS). Categorical values are strings from CODE_TABLES;
flags are JSON booleans (0/1 also accepted); ``lane_count`` is an integer.
Codes are 0-based in listing order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, ParseError, SchemaError

JAAD = "jaad"
PIE = "pie"
FLAVORS = (JAAD, PIE)

CODE_TABLES: dict[str, tuple] = {
    "motion_state": ("standing", "walking"),
    "gaze_state": ("looking", "not_looking"),
    "head_nod": ("nodding", "other"),
    "hand_gesture": ("greeting", "yielding", "right_of_way", "other"),
    "motion_direction": ("lateral", "longitudinal", "other"),
    "intersection": (False, True),
    "crosswalk": (False, True),
    "traffic_light": ("red", "green", "other"),
    "traffic_direction": ("one_way", "two_way"),
    "road_type": ("street", "parking_lot", "garage"),
    "stop_sign": (False, True),
    "signage_type": ("none", "pedestrian_crossing", "stop", "yield", "other"),
}
# PIE folds head nods into the gesture attribute
PIE_CODE_TABLES = dict(CODE_TABLES, hand_gesture=("greeting", "yielding", "right_of_way", "nod", "other"))

# PIE has no stop-sign flag; it is read off the signage category
STOP_SIGN_FROM_SIGNAGE = {
    "none": False,
    "pedestrian_crossing": False,
    "stop": True,
    "yield": False,
    "other": False,
}

BEHAVIOR_KEYS = {
    JAAD: ("motion_state", "gaze_state", "head_nod", "hand_gesture", "motion_direction"),
    PIE: ("motion_state", "gaze_state", "hand_gesture", "motion_direction"),
}
ENVIRONMENT_KEYS = {
    JAAD: (
        "lane_count", "intersection", "crosswalk", "traffic_light",
        "traffic_direction", "road_type", "stop_sign", "signage_type",
    ),
    PIE: (
        "lane_count", "intersection", "crosswalk", "traffic_light",
        "traffic_direction", "signage_type",
    ),
}
# column order of the E matrix (PIE's stop_sign is derived)
ENVIRONMENT_COLUMNS = {
    JAAD: ENVIRONMENT_KEYS[JAAD],
    PIE: (
        "lane_count", "intersection", "crosswalk", "traffic_light",
        "traffic_direction", "stop_sign", "signage_type",
    ),
}
FLAGS = ("intersection", "crosswalk", "stop_sign")
CONTINUOUS = ("x1", "y1", "x2", "y2", "speed")
RECORD_KEYS = (
    "ped_id", "frame", "bbox", "speed", "behavior", "environment",
    "event_frame", "label", "frame_w", "frame_h",
)
CONTEXT_WIDTHS = {
    JAAD: {"P": 5, "L": 4, "V": 1, "E": 8},
    PIE: {"P": 4, "L": 4, "V": 1, "E": 7},
}


def check_flavor(flavor: str) -> str:
    flavor = str(flavor).lower()
    if flavor not in FLAVORS:
        raise SchemaError(f"unknown flavor {flavor!r}; expected one of {FLAVORS}")
    return flavor


def code_tables(flavor: str) -> dict[str, tuple]:
    return PIE_CODE_TABLES if check_flavor(flavor) == PIE else CODE_TABLES


def encode_value(attr: str, value, flavor: str = JAAD) -> int:
    table = code_tables(flavor)[attr]
    if attr in FLAGS:
        if isinstance(value, bool):
            return int(value)
        if value in (0, 1) and not isinstance(value, float):
            return int(value)
        raise DataError(f"{attr}: expected a boolean flag, got {value!r}")
    try:
        return table.index(value)
    except ValueError:
        raise DataError(f"{attr}: unknown category {value!r}; expected one of {table}") from None


def decode_value(attr: str, code: int, flavor: str = JAAD):
    table = code_tables(flavor)[attr]
    if not 0 <= code < len(table):
        raise DataError(f"{attr}: code {code} outside table of size {len(table)}")
    return table[code]


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    behavior: dict
    bbox: tuple[float, float, float, float]
    vehicle_speed: float
    environment: dict


@dataclass
class PedestrianTrack:
    pedestrian_id: str
    frames: list[FrameAnnotation]
    event_frame: int
    label: int
    frame_size: tuple[int, int]
    flavor: str = JAAD

    @property
    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.frames]


@dataclass
class Window:
    """A gap-free run of ``n_frames`` annotated frames, not yet encoded."""

    track: PedestrianTrack
    start: int  # position in track.frames
    n_frames: int
    end_frame: int
    tte_frames: int

    @property
    def frames(self) -> list[FrameAnnotation]:
        return self.track.frames[self.start : self.start + self.n_frames]

    @property
    def label(self) -> int:
        return self.track.label


@dataclass
class ClipSample:
    P: np.ndarray
    L: np.ndarray
    V: np.ndarray
    E: np.ndarray
    label: int
    tte_frames: int
    flavor: str = JAAD
    pedestrian_id: str = ""

    def context(self, name: str) -> np.ndarray:
        return getattr(self, name)


# -- parsing ---------------------------------------------------------------


def _validate_record(rec: dict, flavor: str, lineno: int) -> None:
    missing = [k for k in RECORD_KEYS if k not in rec]
    if missing:
        raise SchemaError(f"line {lineno}: missing field(s) {missing}")
    extra = sorted(set(rec) - set(RECORD_KEYS))
    if extra:
        raise SchemaError(f"line {lineno}: unexpected field(s) {extra}")
    for group, keys in (("behavior", BEHAVIOR_KEYS[flavor]), ("environment", ENVIRONMENT_KEYS[flavor])):
        sub = rec[group]
        if not isinstance(sub, dict):
            raise SchemaError(f"line {lineno}: {group} must be an object")
        absent = [k for k in keys if k not in sub]
        if absent:
            raise SchemaError(f"line {lineno}: {group} lacks {absent} for flavor {flavor}")
        foreign = sorted(set(sub) - set(keys))
        if foreign:
            raise SchemaError(f"line {lineno}: {group} field(s) {foreign} not in flavor {flavor}")
    bbox = rec["bbox"]
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise SchemaError(f"line {lineno}: bbox must be a list of 4 numbers")


def _frame_from_record(rec: dict, flavor: str, lineno: int) -> FrameAnnotation:
    ped, frame = rec["ped_id"], rec["frame"]
    where = f"pedestrian {ped!r} frame {frame} (line {lineno})"
    try:
        x1, y1, x2, y2 = (float(v) for v in rec["bbox"])
        speed = float(rec["speed"])
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: bbox and speed must be numeric") from None
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2, speed)):
        raise DataError(f"{where}: non-finite bbox or speed")
    if not (x1 < x2 and y1 < y2):
        raise DataError(f"{where}: bbox must satisfy x1 < x2 and y1 < y2, got {rec['bbox']}")
    behavior = dict(rec["behavior"])
    environment = dict(rec["environment"])
    try:
        for key in BEHAVIOR_KEYS[flavor]:
            encode_value(key, behavior[key], flavor)
        for key in ENVIRONMENT_KEYS[flavor]:
            if key == "lane_count":
                lanes = environment[key]
                if isinstance(lanes, bool) or not isinstance(lanes, int) or lanes < 1:
                    raise DataError(f"lane_count must be an integer >= 1, got {lanes!r}")
            else:
                encode_value(key, environment[key], flavor)
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None
    return FrameAnnotation(int(frame), behavior, (x1, y1, x2, y2), speed, environment)


def parse_annotations(lines: Iterable[str], flavor: str = JAAD) -> list[PedestrianTrack]:
    """Group JSONL frame records into tracks, sorted by frame index."""
    flavor = check_flavor(flavor)
    grouped: dict[str, list[tuple[dict, FrameAnnotation, int]]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise ParseError(f"line {lineno}: expected a JSON object")
        _validate_record(rec, flavor, lineno)
        frame = _frame_from_record(rec, flavor, lineno)
        grouped.setdefault(str(rec["ped_id"]), []).append((rec, frame, lineno))

    tracks = []
    for ped, items in grouped.items():
        items.sort(key=lambda item: item[1].frame_index)
        first = items[0][0]
        for prev, cur in zip(items, items[1:]):
            if cur[1].frame_index <= prev[1].frame_index:
                raise DataError(
                    f"pedestrian {ped!r}: frame {cur[1].frame_index} repeated (line {cur[2]})"
                )
        for rec, _, lineno in items:
            for key in ("event_frame", "label", "frame_w", "frame_h"):
                if rec[key] != first[key]:
                    raise DataError(f"pedestrian {ped!r}: {key} changes within the track (line {lineno})")
        if first["label"] not in (0, 1) or isinstance(first["label"], bool):
            raise DataError(f"pedestrian {ped!r}: label must be 0 or 1")
        tracks.append(
            PedestrianTrack(
                pedestrian_id=ped,
                frames=[item[1] for item in items],
                event_frame=int(first["event_frame"]),
                label=int(first["label"]),
                frame_size=(int(first["frame_w"]), int(first["frame_h"])),
                flavor=flavor,
            )
        )
    return tracks


def track_records(track: PedestrianTrack) -> list[dict]:
    """Inverse of :func:`parse_annotations` for one track."""
    out = []
    for f in track.frames:
        out.append(
            {
                "ped_id": track.pedestrian_id,
                "frame": f.frame_index,
                "bbox": list(f.bbox),
                "speed": f.vehicle_speed,
                "behavior": f.behavior,
                "environment": f.environment,
                "event_frame": track.event_frame,
                "label": track.label,
                "frame_w": track.frame_size[0],
                "frame_h": track.frame_size[1],
            }
        )
    return out


def dump_jsonl(tracks: Sequence[PedestrianTrack]) -> str:
    return "".join(
        json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"
        for track in tracks
        for rec in track_records(track)
    )


# -- sampling --------------------------------------------------------------


def clip_stride(n_frames: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ContractError(f"overlap must be in [0, 1), got {overlap}")
    return max(1, round(n_frames * (1.0 - overlap)))


def sample_clips(
    track: PedestrianTrack,
    n_frames: int = 16,
    overlap: float = 0.8,
    tte_range: Sequence[int] = (30, 60),
) -> list[Window]:
    """Windows whose last frame lies ``tte_range`` frames before the event.

    Only gap-free windows qualify. Starting at the earliest admissible end
    frame, windows are taken every ``clip_stride`` frames.
    """
    tte_lo, tte_hi = int(tte_range[0]), int(tte_range[1])
    if tte_lo > tte_hi or tte_lo < 0:
        raise ContractError(f"invalid tte_range {tuple(tte_range)}")
    stride = clip_stride(n_frames, overlap)
    idx = track.frame_indices
    # run[j] = length of the consecutive run of frame indices ending at j
    run = [1] * len(idx)
    for j in range(1, len(idx)):
        if idx[j] == idx[j - 1] + 1:
            run[j] = run[j - 1] + 1
    windows: list[Window] = []
    first_end = None
    for j, t in enumerate(idx):
        if run[j] < n_frames or not tte_lo <= track.event_frame - t <= tte_hi:
            continue
        if first_end is None:
            first_end = t
        if (t - first_end) % stride == 0:
            windows.append(Window(track, j - n_frames + 1, n_frames, t, track.event_frame - t))
    return windows


# -- normalization / encoding ----------------------------------------------


@dataclass
class FeatureStats:
    mean: float
    std: float
    constant: bool = False


@dataclass
class EncodingSchema:
    flavor: str = JAAD
    stats: dict[str, FeatureStats] = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return all(name in self.stats for name in CONTINUOUS)

    def to_dict(self) -> dict:
        return {
            "flavor": self.flavor,
            "code_tables": {k: list(v) for k, v in code_tables(self.flavor).items()},
            "stop_sign_from_signage": STOP_SIGN_FROM_SIGNAGE,
            "stats": {
                k: {"mean": s.mean, "std": s.std, "constant": s.constant} for k, s in self.stats.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingSchema":
        flavor = check_flavor(d["flavor"])
        tables = {k: list(v) for k, v in code_tables(flavor).items()}
        if "code_tables" in d and d["code_tables"] != tables:
            raise SchemaError("stored code tables differ from this build's tables")
        stats = {k: FeatureStats(float(v["mean"]), float(v["std"]), bool(v["constant"])) for k, v in d["stats"].items()}
        return cls(flavor, stats)


def _continuous_rows(windows: Iterable[Window]) -> np.ndarray:
    rows = [(*f.bbox, f.vehicle_speed) for w in windows for f in w.frames]
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(CONTINUOUS))


def fit_normalizer(windows: Sequence[Window], flavor: str | None = None) -> EncodingSchema:
    """Population mean/std of bbox coordinates and speed over all frames."""
    if not windows:
        raise ContractError("fit_normalizer needs at least one training window")
    flavor = check_flavor(flavor or windows[0].track.flavor)
    rows = _continuous_rows(windows)
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    stats = {}
    for i, name in enumerate(CONTINUOUS):
        constant = bool(std[i] <= 1e-12 * max(1.0, abs(mean[i])))
        stats[name] = FeatureStats(float(mean[i]), float(std[i]), constant)
    return EncodingSchema(flavor, stats)


def _z(value: float, s: FeatureStats) -> float:
    return value if s.constant else (value - s.mean) / s.std


def _encode_frames(frames: Sequence[FrameAnnotation], schema: EncodingSchema) -> tuple[np.ndarray, ...]:
    flavor = schema.flavor
    n = len(frames)
    widths = CONTEXT_WIDTHS[flavor]
    P = np.zeros((n, widths["P"]))
    L = np.zeros((n, 4))
    V = np.zeros((n, 1))
    E = np.zeros((n, widths["E"]))
    st = schema.stats
    for r, f in enumerate(frames):
        for c, key in enumerate(BEHAVIOR_KEYS[flavor]):
            P[r, c] = encode_value(key, f.behavior[key], flavor)
        for c, name in enumerate(("x1", "y1", "x2", "y2")):
            L[r, c] = _z(f.bbox[c], st[name])
        V[r, 0] = _z(f.vehicle_speed, st["speed"])
        for c, key in enumerate(ENVIRONMENT_COLUMNS[flavor]):
            if key == "lane_count":
                E[r, c] = f.environment[key]
            elif key == "stop_sign" and flavor == PIE:
                E[r, c] = int(STOP_SIGN_FROM_SIGNAGE[f.environment["signage_type"]])
            else:
                E[r, c] = encode_value(key, f.environment[key], flavor)
    return tuple(m.astype(np.float32) for m in (P, L, V, E))


def _check_encodable(window: Window, schema: EncodingSchema) -> None:
    if not schema.fitted:
        raise ContractError("encode_clip needs a fitted schema")
    if window.track.flavor != schema.flavor:
        raise SchemaError(
            f"window flavor {window.track.flavor} does not match schema flavor {schema.flavor}"
        )


def _clip(window: Window, mats: tuple[np.ndarray, ...], flavor: str) -> ClipSample:
    P, L, V, E = mats
    return ClipSample(
        P, L, V, E, label=window.label, tte_frames=window.tte_frames, flavor=flavor,
        pedestrian_id=window.track.pedestrian_id,
    )


def encode_clip(window: Window, schema: EncodingSchema) -> ClipSample:
    """Label-encode categoricals and z-score bbox/speed for one window."""
    _check_encodable(window, schema)
    return _clip(window, _encode_frames(window.frames, schema), schema.flavor)


def windows_from_tracks(
    tracks: Iterable[PedestrianTrack],
    n_frames: int = 16,
    overlap: float = 0.8,
    tte_range: Sequence[int] = (30, 60),
) -> list[Window]:
    return [w for t in tracks for w in sample_clips(t, n_frames, overlap, tte_range)]


def encode_all(windows: Iterable[Window], schema: EncodingSchema) -> list[ClipSample]:
    """Encode many windows, encoding each track's frames only once."""
    cache: dict[int, tuple[np.ndarray, ...]] = {}
    clips = []
    for w in windows:
        _check_encodable(w, schema)
        key = id(w.track)
        if key not in cache:
            cache[key] = _encode_frames(w.track.frames, schema)
        lo, hi = w.start, w.start + w.n_frames
        clips.append(_clip(w, tuple(m[lo:hi] for m in cache[key]), schema.flavor))
    return clips
