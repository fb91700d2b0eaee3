"""Multi-context fusion transformer.

Pipeline per clip (all stages batched over a leading axis):

    embed -> +cls, +PE -> MI-Attn (ICF) -> MC-Attn over tokens (CCF)
          -> FFN + GI-Attn per context (ICR) -> GC-Attn from the global token (CCR)
          -> MLP head -> sigmoid

Per-head projections are stored as one ``d x d`` matrix per role; head ``n``
owns columns ``n*d_head:(n+1)*d_head``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .ingest import CONTEXT_WIDTHS, ClipSample, check_flavor
from .rng import DROPOUT, INIT, KeyedRNG

CONTEXTS = ("P", "L", "V", "E")
CCR_MODES = ("gc_attn", "mean_pool", "modality_attn")


@dataclass
class MFTConfig:
    n_frames: int = 16
    model_dim: int = 128
    heads: int = 4
    flavor: str = "jaad"
    ffn_hidden: int = 256
    mlp_hidden: int = 64
    dropout_p: float = 0.2
    use_P: bool = True
    use_E: bool = True
    ccr_mode: str = "gc_attn"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.flavor = check_flavor(self.flavor)
        except Exception as exc:
            raise ConfigError(str(exc)) from None
        if self.model_dim <= 0 or self.heads <= 0 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} must be a positive multiple of heads {self.heads}")
        if self.n_frames < 2:
            raise ConfigError("n_frames must be at least 2")
        if self.ccr_mode not in CCR_MODES:
            raise ConfigError(f"unknown ccr_mode {self.ccr_mode!r}; expected one of {CCR_MODES}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.ffn_hidden <= 0 or self.mlp_hidden <= 0:
            raise ConfigError("ffn_hidden and mlp_hidden must be positive")
        if len(self.contexts) < 2:
            raise ConfigError("at least two contexts must be enabled")

    @property
    def contexts(self) -> tuple[str, ...]:
        enabled = {"P": self.use_P, "L": True, "V": True, "E": self.use_E}
        return tuple(c for c in CONTEXTS if enabled[c])

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return len(self.contexts) + 1

    def input_width(self, context: str) -> int:
        return CONTEXT_WIDTHS[self.flavor][context]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MFTConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.Wq": (d, d),
        f"{prefix}.Wk": (d, d),
        f"{prefix}.Wv": (d, d),
        f"{prefix}.Wo": (d, d),
        f"{prefix}.bo": (d,),
    }


def parameter_shapes(config: MFTConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in a fixed order."""
    d = config.model_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for c in config.contexts:
        shapes[f"{c}.emb.W"] = (config.input_width(c), d)
        shapes[f"{c}.emb.b"] = (d,)
        shapes[f"{c}.cls"] = (1, d)
        shapes.update(_attention_shapes(f"{c}.mi", d))
        shapes[f"{c}.icf_norm.g"] = (d,)
        shapes[f"{c}.icf_norm.b"] = (d,)
        shapes[f"{c}.ffn.W1"] = (d, config.ffn_hidden)
        shapes[f"{c}.ffn.b1"] = (config.ffn_hidden,)
        shapes[f"{c}.ffn.W2"] = (config.ffn_hidden, d)
        shapes[f"{c}.ffn.b2"] = (d,)
        shapes[f"{c}.icr_norm.g"] = (d,)
        shapes[f"{c}.icr_norm.b"] = (d,)
        shapes.update(_attention_shapes(f"{c}.gi", d))
    shapes["global.cls"] = (1, d)
    shapes.update(_attention_shapes("mc", d))
    shapes["mc_norm.g"] = (d,)
    shapes["mc_norm.b"] = (d,)
    if config.ccr_mode == "gc_attn":
        shapes.update(_attention_shapes("gc", d))
    elif config.ccr_mode == "modality_attn":
        shapes["ma.w"] = (d, 1)
    shapes["head.W1"] = (d, config.mlp_hidden)
    shapes["head.b1"] = (config.mlp_hidden,)
    shapes["head.W2"] = (config.mlp_hidden, 1)
    shapes["head.b2"] = (1,)
    return shapes


def param_count(config: MFTConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(config).values()))


class MFTParameters:
    """Ordered name -> Tensor map of the learnable weights."""

    def __init__(self, config: MFTConfig, tensors: Mapping[str, T.Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ConfigError(f"parameter names do not match config (difference: {sorted(missing)[:6]})")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"parameter {name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self, dtype=None) -> "MFTParameters":
        return MFTParameters(
            self.config,
            {
                k: T.Tensor(v.data.astype(dtype or v.data.dtype, copy=True), requires_grad=True, name=k)
                for k, v in self.tensors.items()
            },
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: MFTConfig, arrays: Mapping[str, np.ndarray], dtype=None) -> "MFTParameters":
        return cls(
            config,
            {k: T.Tensor(np.array(v, dtype=dtype or v.dtype), requires_grad=True, name=k) for k, v in arrays.items()},
        )


def init_parameters(config: MFTConfig, seed: int = 0, dtype=None) -> MFTParameters:
    """Uniform(+-1/sqrt(fan_in)) projections, N(0, 0.02) tokens, unit norms."""
    dtype = dtype or T.default_dtype()
    shapes = parameter_shapes(config)
    rng = KeyedRNG(seed).stream(INIT)
    weights = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "cls":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("norm.g"):
            arr = np.ones(shape)
        elif name.endswith("norm.b"):
            arr = np.zeros(shape)
        else:
            # biases share their weight's fan-in: emb.b -> emb.W, bo -> Wo, b1 -> W1
            if leaf.startswith("b"):
                weight_name = name[: -len(leaf)] + "W" + leaf[1:]
                fan_in = shapes[weight_name][0]
            else:
                fan_in = shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        weights[name] = T.parameter(arr.astype(dtype), name=name)
    return MFTParameters(config, weights)


# -- trace -------------------------------------------------------------------


@dataclass
class AttentionTrace:
    """Attention weights captured during one batched forward pass.

    Arrays keep the batch axis first and the head axis second.
    """

    tokens: tuple[str, ...]
    mi: dict[str, np.ndarray] = field(default_factory=dict)  # (B, h, N+1, N+1)
    mc: np.ndarray | None = None  # (B, h, k, k)
    gi: dict[str, np.ndarray] = field(default_factory=dict)  # (B, h, 1, N+1)
    gc: np.ndarray | None = None  # (B, h', 1, k)

    def clip(self, b: int) -> "AttentionTrace":
        return AttentionTrace(
            self.tokens,
            {c: a[b] for c, a in self.mi.items()},
            None if self.mc is None else self.mc[b],
            {c: a[b] for c, a in self.gi.items()},
            None if self.gc is None else self.gc[b],
        )

    def matrices(self) -> Iterator[tuple[str, np.ndarray]]:
        for c, a in self.mi.items():
            yield f"mi.{c}", a
        if self.mc is not None:
            yield "mc", self.mc
        for c, a in self.gi.items():
            yield f"gi.{c}", a
        if self.gc is not None:
            yield "gc", self.gc


# -- stages ------------------------------------------------------------------


def multi_head_attention(
    query_in: T.Tensor,
    kv_in: T.Tensor,
    params: MFTParameters,
    prefix: str,
    heads: int,
) -> tuple[T.Tensor, np.ndarray]:
    """Scaled dot-product attention with per-head projections.

    ``query_in`` is (B, Tq, d), ``kv_in`` is (B, Tk, d). Returns the projected
    (B, Tq, d) output and the (B, heads, Tq, Tk) weights.
    """
    B, Tq, d = query_in.shape
    Tk = kv_in.shape[1]
    dh = d // heads

    def split(x: T.Tensor, length: int) -> T.Tensor:
        return T.transpose(T.reshape(x, (B, length, heads, dh)), (0, 2, 1, 3))

    q = split(T.matmul(query_in, params[f"{prefix}.Wq"]), Tq)
    k = split(T.matmul(kv_in, params[f"{prefix}.Wk"]), Tk)
    v = split(T.matmul(kv_in, params[f"{prefix}.Wv"]), Tk)
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    alpha = T.softmax(scores, axis=-1)
    mixed = T.matmul(alpha, v)  # (B, h, Tq, dh)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (B, Tq, d))
    out = T.linear(merged, params[f"{prefix}.Wo"], params[f"{prefix}.bo"])
    return out, alpha.data


def embed_context(raw: T.Tensor, params: MFTParameters, context: str) -> T.Tensor:
    """Per-frame affine projection (B, N, w) -> (B, N, d)."""
    W = params[f"{context}.emb.W"]
    if raw.ndim != 3 or raw.shape[-1] != W.shape[0]:
        raise ShapeError(f"context {context}: input {raw.shape} does not match width {W.shape[0]}")
    return T.linear(raw, W, params[f"{context}.emb.b"])


_PE_CACHE: dict[tuple, np.ndarray] = {}


def positional_table(length: int, dim: int, dtype) -> np.ndarray:
    key = (length, dim, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = T.sinusoidal_table(length, dim, dtype)
    return _PE_CACHE[key]


def positional_encode(features: T.Tensor, cls: T.Tensor) -> T.Tensor:
    """Prepend the context token and add sinusoidal PE to all N+1 rows."""
    B, N, d = features.shape
    token = T.broadcast_to(T.reshape(cls, (1, 1, d)), (B, 1, d))
    seq = T.concat([token, features], axis=1)
    return T.add(seq, positional_table(N + 1, d, features.dtype))


def mi_attention(seq: T.Tensor, params: MFTParameters, context: str, config: MFTConfig):
    """Mutual intra-context attention followed by residual + layer norm."""
    out, alpha = multi_head_attention(seq, seq, params, f"{context}.mi", config.heads)
    fused = T.layer_norm(
        T.add(seq, out), params[f"{context}.icf_norm.g"], params[f"{context}.icf_norm.b"], config.ln_eps
    )
    return fused, alpha


def ccf_fuse(context_tokens: Sequence[T.Tensor], params: MFTParameters, config: MFTConfig):
    """Mutual cross-context attention over [global, context tokens...].

    Each token is (B, 1, d); returns (B, k, d) and the (B, h, k, k) weights.
    """
    if len(context_tokens) < 1:
        raise ConfigError("cross-context fusion needs at least two tokens")
    B = context_tokens[0].shape[0]
    d = config.model_dim
    glob = T.broadcast_to(T.reshape(params["global.cls"], (1, 1, d)), (B, 1, d))
    tokens = T.concat([glob, *context_tokens], axis=1)
    out, alpha = multi_head_attention(tokens, tokens, params, "mc", config.heads)
    fused = T.layer_norm(T.add(tokens, out), params["mc_norm.g"], params["mc_norm.b"], config.ln_eps)
    return fused, alpha


def icr_refine(token: T.Tensor, sequence: T.Tensor, params: MFTParameters, context: str, config: MFTConfig):
    """Swap the updated token into row 0, FFN + residual + norm, then GI-Attn.

    ``token`` is (B, 1, d), ``sequence`` the (B, N+1, d) ICF output. Returns
    the refined (B, 1, d) token and the (B, h, 1, N+1) weights.
    """
    n1 = sequence.shape[1]
    seq = T.concat([token, T.slice_(sequence, 1, 1, n1)], axis=1)
    hidden = T.relu(T.linear(seq, params[f"{context}.ffn.W1"], params[f"{context}.ffn.b1"]))
    ffn = T.linear(hidden, params[f"{context}.ffn.W2"], params[f"{context}.ffn.b2"])
    refined_seq = T.layer_norm(
        T.add(seq, ffn), params[f"{context}.icr_norm.g"], params[f"{context}.icr_norm.b"], config.ln_eps
    )
    query = T.slice_(refined_seq, 1, 0, 1)
    return multi_head_attention(query, refined_seq, params, f"{context}.gi", config.heads)


def ccr_refine(global_token: T.Tensor, context_tokens: Sequence[T.Tensor], params: MFTParameters, config: MFTConfig):
    """Refine the global token over [global, refined context tokens...].

    Returns (B, 1, d) and weights shaped (B, h, 1, k); the pooling variants
    report a single pseudo-head.
    """
    tokens = T.concat([global_token, *context_tokens], axis=1)
    B, k, d = tokens.shape
    mode = config.ccr_mode
    if mode == "gc_attn":
        return multi_head_attention(global_token, tokens, params, "gc", config.heads)
    if mode == "mean_pool":
        pooled = T.mean(tokens, axis=1, keepdims=True)
        return pooled, np.full((B, 1, 1, k), 1.0 / k, dtype=tokens.dtype)
    if mode == "modality_attn":
        scores = T.matmul(tokens, params["ma.w"])  # (B, k, 1)
        weights = T.softmax(T.swap_last(scores), axis=-1)  # (B, 1, k)
        pooled = T.matmul(weights, tokens)
        return pooled, weights.data.reshape(B, 1, 1, k)
    raise ConfigError(f"unknown ccr_mode {mode!r}")


def mlp_head(token: T.Tensor, params: MFTParameters, config: MFTConfig, training: bool, rng) -> T.Tensor:
    x = T.reshape(token, (token.shape[0], config.model_dim))
    h = T.relu(T.linear(x, params["head.W1"], params["head.b1"]))
    h = T.dropout(h, config.dropout_p, training, rng)
    logit = T.linear(h, params["head.W2"], params["head.b2"])
    return T.reshape(T.sigmoid(logit), (x.shape[0],))


# -- full pass ---------------------------------------------------------------


@dataclass
class ClipBatch:
    inputs: dict[str, np.ndarray]  # context -> (B, N, w)
    labels: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(clips: Sequence[ClipSample], config: MFTConfig, dtype=None) -> ClipBatch:
    if not clips:
        raise ConfigError("empty batch")
    dtype = dtype or T.default_dtype()
    for clip in clips:
        if clip.flavor != config.flavor:
            raise ConfigError(f"clip flavor {clip.flavor} does not match model flavor {config.flavor}")
    inputs = {}
    for c in config.contexts:
        stacked = np.stack([clip.context(c) for clip in clips]).astype(dtype, copy=False)
        if stacked.shape[1:] != (config.n_frames, config.input_width(c)):
            raise ConfigError(
                f"context {c}: clip shape {stacked.shape[1:]} != {(config.n_frames, config.input_width(c))}"
            )
        inputs[c] = stacked
    return ClipBatch(inputs, np.array([clip.label for clip in clips], dtype=np.int64))


def forward_batch(
    params: MFTParameters,
    batch: ClipBatch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    context_order: Sequence[str] | None = None,
) -> tuple[T.Tensor, AttentionTrace]:
    """Probabilities (B,) and the attention trace for a batch.

    ``context_order`` permutes the token order fed to the fusion stages; the
    result is invariant to it.
    """
    config = params.config
    order = tuple(context_order or config.contexts)
    if sorted(order) != sorted(config.contexts):
        raise ConfigError(f"context_order {order} must permute {config.contexts}")
    if training and config.dropout_p > 0 and rng is None:
        raise ConfigError("training forward needs an rng for dropout")
    trace = AttentionTrace(tokens=("global", *order))
    sequences, tokens = {}, []
    for c in order:
        raw = T.Tensor(batch.inputs[c], dtype=params[f"{c}.emb.W"].dtype)
        seq = positional_encode(embed_context(raw, params, c), params[f"{c}.cls"])
        fused, trace.mi[c] = mi_attention(seq, params, c, config)
        sequences[c] = fused
        tokens.append(T.slice_(fused, 1, 0, 1))
    fused_tokens, trace.mc = ccf_fuse(tokens, params, config)
    refined = []
    for i, c in enumerate(order, start=1):
        tok, trace.gi[c] = icr_refine(T.slice_(fused_tokens, 1, i, i + 1), sequences[c], params, c, config)
        refined.append(tok)
    glob = T.slice_(fused_tokens, 1, 0, 1)
    final, trace.gc = ccr_refine(glob, refined, params, config)
    prob = mlp_head(final, params, config, training, rng)
    return prob, trace


def forward(
    clip: ClipSample,
    params: MFTParameters,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, AttentionTrace]:
    """Single-clip convenience wrapper around :func:`forward_batch`."""
    batch = make_batch([clip], params.config, dtype=params["global.cls"].dtype)
    if training:
        prob, trace = forward_batch(params, batch, True, rng)
    else:
        with T.no_grad():
            prob, trace = forward_batch(params, batch, False)
    return float(prob.data[0]), trace.clip(0)


def predict(params: MFTParameters, clips: Sequence[ClipSample], batch_size: int = 256) -> np.ndarray:
    """Eval-mode probabilities for many clips."""
    out = []
    with T.no_grad():
        for lo in range(0, len(clips), batch_size):
            batch = make_batch(clips[lo : lo + batch_size], params.config, dtype=params["global.cls"].dtype)
            prob, _ = forward_batch(params, batch, training=False)
            out.append(prob.data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def dropout_stream(seed: int, epoch: int, batch_index: int) -> np.random.Generator:
    return KeyedRNG(seed).stream(DROPOUT, epoch, batch_index)
