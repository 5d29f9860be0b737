"""Attention, interaction features, and the learned scoring head.

A query and a document each carry two item matrices (text tokens and
linked entities). Per channel, an attention matrix A = softmax(Q D^T)
re-reads the document through the query's eyes (D_att = A D), then
element-wise interactions (multiply, add, subtract) between Q and D_att
are mean-pooled over query items into fixed-size feature blocks. Blocks
concatenate in a fixed order (text before entity; multiply, add,
subtract within a channel), are scaled by the first-stage retrieval
score, and feed a bilinear head raw = h^T M h whose logistic gives the
relevance probability.

With no interaction ops selected, the feature vector falls back to the
pooled query and attended-document rows per channel, so the head sees
both sides but no element-wise coupling between them.

An optional per-channel affine adapter (x -> x W + b on every item row,
shared between query and document) can sit in front of the attention;
it is off by default and trained jointly with the head when present.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, NumericError
from .records import DocumentRecord, QueryRecord

CANONICAL_OPS = ("multiply", "add", "subtract")
DEFAULT_OPS = frozenset({"multiply", "add"})

MODEL_MAGIC = b"QDERM"
_MODEL_VERSION_PLAIN = 1
_MODEL_VERSION_ADAPTER = 2
_U32 = struct.Struct("<I")

_FLAG_BITS = (
    ("add", 0),
    ("multiply", 1),
    ("subtract", 2),
    ("use_text", 3),
    ("use_entity", 4),
    ("score_scaling", 5),
    ("adapter", 6),
)

_PROB_LO = float(np.nextafter(0.0, 1.0))
_PROB_HI = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class AblationConfig:
    """Which interaction ops and channels are active.

    The default matches the full model: multiply and add over both
    channels, with first-stage score scaling. ``ops`` may be empty,
    which selects the pooled-representation fallback layout.
    """

    ops: frozenset[str] = DEFAULT_OPS
    use_text: bool = True
    use_entity: bool = True
    score_scaling: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ops", frozenset(self.ops))
        unknown = self.ops - set(CANONICAL_OPS)
        if unknown:
            raise ValueError(f"unknown interaction ops {sorted(unknown)}")
        if not (self.use_text or self.use_entity):
            raise ValueError("at least one channel must be active")

    @property
    def active_ops(self) -> tuple[str, ...]:
        return tuple(op for op in CANONICAL_OPS if op in self.ops)

    def feature_dim(self, d_t: int, d_e: int) -> int:
        per_channel = d_t * self.use_text + d_e * self.use_entity
        blocks = len(self.ops) if self.ops else 2
        return blocks * per_channel


def logistic(x: float) -> float:
    """Numerically stable sigmoid, clamped to the open interval (0, 1)."""
    x = float(x)
    if not math.isfinite(x):
        raise NumericError(f"non-finite logit {x!r}")
    if x >= 0.0:
        p = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        p = e / (1.0 + e)
    return min(max(p, _PROB_LO), _PROB_HI)


def bce_with_logits(raw: float, label: float) -> float:
    """Binary cross-entropy computed in logit space (no overflow)."""
    raw = float(raw)
    return max(raw, 0.0) - raw * float(label) + math.log1p(math.exp(-abs(raw)))


def attend(query_items: np.ndarray, doc_items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax attention of query items over document items.

    Returns (A, D_att) where A has one probability row per query item
    and D_att = A @ doc_items. Logits are max-subtracted per row before
    exponentiation so large magnitudes cannot overflow.
    """
    logits = query_items @ doc_items.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    attention = weights / weights.sum(axis=1, keepdims=True)
    return attention, attention @ doc_items


def interact(query_items: np.ndarray, attended: np.ndarray, op: str) -> np.ndarray:
    if op == "multiply":
        return query_items * attended
    if op == "add":
        return query_items + attended
    if op == "subtract":
        return query_items - attended
    raise ValueError(f"unknown interaction op {op!r}")


def mean_pool(items: np.ndarray) -> np.ndarray:
    return items.mean(axis=0)


@dataclass(frozen=True)
class InteractionFeatures:
    """Feature blocks for one (query, document) pair.

    ``blocks`` holds the unscaled pooled vectors keyed by
    ``"<channel>.<op>"`` (or ``"<channel>.query_pool"`` /
    ``"<channel>.doc_pool"`` in the no-op layout) in concatenation
    order. ``vector`` is their concatenation with score scaling already
    applied.
    """

    blocks: tuple[tuple[str, np.ndarray], ...]
    vector: np.ndarray
    attention: dict[str, np.ndarray | None] | None = None


@dataclass
class Adapter:
    """Per-channel affine transform applied to every item row."""

    w_text: np.ndarray
    b_text: np.ndarray
    w_entity: np.ndarray
    b_entity: np.ndarray

    def for_channel(self, channel: str) -> tuple[np.ndarray, np.ndarray]:
        if channel == "text":
            return self.w_text, self.b_text
        return self.w_entity, self.b_entity


def identity_adapter(d_t: int, d_e: int) -> Adapter:
    return Adapter(
        w_text=np.eye(d_t),
        b_text=np.zeros(d_t),
        w_entity=np.eye(d_e),
        b_entity=np.zeros(d_e),
    )


class _ChannelTrace:
    """Intermediates of one channel's forward pass, kept for backprop."""

    __slots__ = ("raw_q", "raw_d", "xq", "xd", "attention", "attended", "n_rows")

    def __init__(self, raw_q, raw_d, xq, xd, attention, attended):
        self.raw_q = raw_q
        self.raw_d = raw_d
        self.xq = xq
        self.xd = xd
        self.attention = attention
        self.attended = attended
        self.n_rows = xq.shape[0] if xq is not None else 0


def _channel_blocks(channel, xq, xd, config, dim):
    """Pooled blocks for one channel; None inputs mean an empty side."""
    labels = (
        [f"{channel}.{op}" for op in config.active_ops]
        if config.ops
        else [f"{channel}.query_pool", f"{channel}.doc_pool"]
    )
    if xq is None or xd is None or xq.shape[0] == 0 or xd.shape[0] == 0:
        zero = np.zeros(dim)
        return [(label, zero) for label in labels], None
    attention, attended = attend(xq, xd)
    trace = _ChannelTrace(None, None, xq, xd, attention, attended)
    if config.ops:
        blocks = [
            (f"{channel}.{op}", mean_pool(interact(xq, attended, op)))
            for op in config.active_ops
        ]
    else:
        blocks = [
            (f"{channel}.query_pool", mean_pool(xq)),
            (f"{channel}.doc_pool", mean_pool(attended)),
        ]
    return blocks, trace


def _channel_inputs(query: QueryRecord, doc: DocumentRecord, channel: str):
    if channel == "text":
        return query.tokens.values, doc.tokens.values
    q = query.entities.values if query.entities.rows > 0 else None
    d = doc.entities.values if doc.entities.rows > 0 else None
    return q, d


def _channel_dim(query: QueryRecord, doc: DocumentRecord, channel: str, d_t, d_e) -> int:
    if channel == "text":
        return query.tokens.dim if d_t is None else d_t
    if d_e is not None:
        return d_e
    if query.entities.rows > 0:
        return query.entities.dim
    if doc.entities.rows > 0:
        return doc.entities.dim
    raise ValueError(
        "entity dim is not inferable when both sides have no entities; pass d_e"
    )


def build_features(
    query: QueryRecord,
    doc: DocumentRecord,
    config: AblationConfig,
    first_stage_score: float,
    adapter: Adapter | None = None,
    capture_attention: bool = False,
    d_t: int | None = None,
    d_e: int | None = None,
) -> InteractionFeatures:
    """Compute the feature vector for a (query, document) pair.

    An empty entity side (query or document) yields zero entity blocks;
    the text channel is always populated. ``first_stage_score`` scales
    the concatenated vector when the config enables scaling. Dims are
    inferred from the records unless given (``d_e`` is required when
    neither side carries entities).
    """
    blocks: list[tuple[str, np.ndarray]] = []
    attention: dict[str, np.ndarray | None] = {}
    for channel in ("text", "entity"):
        if not (config.use_text if channel == "text" else config.use_entity):
            continue
        xq, xd = _channel_inputs(query, doc, channel)
        dim = _channel_dim(query, doc, channel, d_t, d_e)
        if adapter is not None:
            w, b = adapter.for_channel(channel)
            xq = None if xq is None else xq @ w + b
            xd = None if xd is None else xd @ w + b
        channel_blocks, trace = _channel_blocks(channel, xq, xd, config, dim)
        blocks.extend(channel_blocks)
        attention[channel] = trace.attention if trace is not None else None
    vector = np.concatenate([b for _, b in blocks])
    if config.score_scaling:
        vector = vector * float(first_stage_score)
    if not np.all(np.isfinite(vector)):
        raise NumericError("non-finite interaction features")
    return InteractionFeatures(
        blocks=tuple(blocks),
        vector=vector,
        attention=attention if capture_attention else None,
    )


# ---------------------------------------------------------------------------
# scoring heads
# ---------------------------------------------------------------------------


@dataclass
class BilinearModel:
    """Bilinear relevance head raw = h^T M h over interaction features."""

    matrix: np.ndarray
    config: AblationConfig
    d_t: int
    d_e: int
    adapter: Adapter | None = None

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim(self.d_t, self.d_e)

    def param_arrays(self) -> dict[str, np.ndarray]:
        params = {"matrix": self.matrix}
        if self.adapter is not None:
            params.update(_adapter_params(self.adapter))
        return params

    def with_params(self, params: dict[str, np.ndarray]) -> "BilinearModel":
        return dataclasses.replace(
            self,
            matrix=params["matrix"],
            adapter=_adapter_from_params(params) if self.adapter is not None else None,
        )


@dataclass
class LinearModel:
    """Linear relevance head raw = w . h + b (head ablation)."""

    weights: np.ndarray
    bias: float
    config: AblationConfig
    d_t: int
    d_e: int
    adapter: Adapter | None = None

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim(self.d_t, self.d_e)

    def param_arrays(self) -> dict[str, np.ndarray]:
        params = {"weights": self.weights, "bias": np.array([self.bias])}
        if self.adapter is not None:
            params.update(_adapter_params(self.adapter))
        return params

    def with_params(self, params: dict[str, np.ndarray]) -> "LinearModel":
        return dataclasses.replace(
            self,
            weights=params["weights"],
            bias=float(params["bias"][0]),
            adapter=_adapter_from_params(params) if self.adapter is not None else None,
        )


Model = BilinearModel | LinearModel


def _adapter_params(adapter: Adapter) -> dict[str, np.ndarray]:
    return {
        "adapter_w_text": adapter.w_text,
        "adapter_b_text": adapter.b_text,
        "adapter_w_entity": adapter.w_entity,
        "adapter_b_entity": adapter.b_entity,
    }


def _adapter_from_params(params: dict[str, np.ndarray]) -> Adapter:
    return Adapter(
        w_text=params["adapter_w_text"],
        b_text=params["adapter_b_text"],
        w_entity=params["adapter_w_entity"],
        b_entity=params["adapter_b_entity"],
    )


def init_model(
    d_t: int,
    d_e: int,
    config: AblationConfig | None = None,
    seed: "int | Sequence[int]" = 0,
    head: str = "bilinear",
    adapter: bool = False,
) -> Model:
    """Seeded uniform init on [-1/sqrt(d), 1/sqrt(d)].

    The adapter starts as the identity transform so an untrained adapter
    never changes scores.
    """
    config = AblationConfig() if config is None else config
    d = config.feature_dim(d_t, d_e)
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    adapter_obj = identity_adapter(d_t, d_e) if adapter else None
    if head == "bilinear":
        matrix = rng.uniform(-bound, bound, size=(d, d))
        return BilinearModel(matrix, config, d_t, d_e, adapter_obj)
    if head == "linear":
        weights = rng.uniform(-bound, bound, size=d)
        return LinearModel(weights, 0.0, config, d_t, d_e, adapter_obj)
    raise ValueError(f"unknown head {head!r}")


def bilinear_score(matrix: np.ndarray, features: np.ndarray) -> float:
    return float(features @ matrix @ features)


def score_features(model: Model, features: np.ndarray) -> float:
    """Raw (pre-logistic) score of a feature vector under either head."""
    if isinstance(model, BilinearModel):
        raw = bilinear_score(model.matrix, features)
    else:
        raw = float(model.weights @ features) + model.bias
    if not math.isfinite(raw):
        raise NumericError(f"non-finite raw score {raw!r}")
    return raw


@dataclass(frozen=True)
class ScoreBreakdown:
    features: InteractionFeatures
    raw: float
    prob: float


def forward(
    model: Model,
    query: QueryRecord,
    doc: DocumentRecord,
    first_stage_score: float,
    capture_attention: bool = False,
) -> ScoreBreakdown:
    feats = build_features(
        query,
        doc,
        model.config,
        first_stage_score,
        adapter=model.adapter,
        capture_attention=capture_attention,
        d_t=model.d_t,
        d_e=model.d_e,
    )
    raw = score_features(model, feats.vector)
    return ScoreBreakdown(feats, raw, logistic(raw))


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------


def _head_backward(model: Model, features: np.ndarray, label: float):
    raw = score_features(model, features)
    prob = logistic(raw)
    loss = bce_with_logits(raw, label)
    g = prob - float(label)
    if isinstance(model, BilinearModel):
        grads = {"matrix": g * np.outer(features, features)}
        d_features = g * ((model.matrix + model.matrix.T) @ features)
    else:
        grads = {"weights": g * features, "bias": np.array([g])}
        d_features = g * model.weights
    return loss, prob, grads, d_features


def grads_from_features(model: Model, features: np.ndarray, label: float):
    """Loss, probability, and head gradients for a precomputed feature
    vector. Only valid when the model has no adapter (features do not
    depend on any trainable parameter)."""
    loss, prob, grads, _ = _head_backward(model, features, label)
    return loss, prob, grads


def _channel_backward(trace: _ChannelTrace, d_blocks, config):
    """Backprop pooled-block grads through one channel.

    ``d_blocks`` maps op name (or pool name) to the gradient of the
    loss w.r.t. that pooled vector. Returns (dW, db) for the channel's
    adapter given its raw (pre-adapter) inputs, chaining through the
    attention softmax.
    """
    xq, xd = trace.xq, trace.xd
    attention, attended = trace.attention, trace.attended
    n = trace.n_rows
    d_xq = np.zeros_like(xq)
    d_att = np.zeros_like(attended)
    if config.ops:
        for op in config.active_ops:
            g = d_blocks[op] / n
            if op == "multiply":
                d_xq += g * attended
                d_att += g * xq
            elif op == "add":
                d_xq += np.broadcast_to(g, xq.shape)
                d_att += np.broadcast_to(g, attended.shape)
            else:
                d_xq += np.broadcast_to(g, xq.shape)
                d_att -= np.broadcast_to(g, attended.shape)
    else:
        d_xq += d_blocks["query_pool"] / n
        d_att += np.broadcast_to(d_blocks["doc_pool"] / n, attended.shape)

    # attended = A @ xd
    d_attention = d_att @ xd.T
    d_xd = attention.T @ d_att
    # softmax rows: dZ_ij = A_ij * (dA_ij - sum_k dA_ik A_ik)
    row_dot = (d_attention * attention).sum(axis=1, keepdims=True)
    d_logits = attention * (d_attention - row_dot)
    # logits = xq @ xd.T
    d_xq += d_logits @ xd
    d_xd += d_logits.T @ xq

    d_w = trace.raw_q.T @ d_xq + trace.raw_d.T @ d_xd
    d_b = d_xq.sum(axis=0) + d_xd.sum(axis=0)
    return d_w, d_b


def backward(
    model: Model,
    query: QueryRecord,
    doc: DocumentRecord,
    first_stage_score: float,
    label: float,
):
    """Loss, probability, and gradients for every trainable parameter.

    Without an adapter this reduces to the closed-form head gradient
    ((prob - label) h h^T for the bilinear head). With an adapter the
    chain runs back through pooling, the interactions, the attention
    softmax, and the affine transform of both query and document rows.
    """
    if model.adapter is None:
        feats = build_features(
            query, doc, model.config, first_stage_score, d_t=model.d_t, d_e=model.d_e
        )
        loss, prob, grads, _ = _head_backward(model, feats.vector, label)
        return loss, prob, grads

    config = model.config
    traces: dict[str, _ChannelTrace] = {}
    blocks: list[tuple[str, np.ndarray]] = []
    for channel in ("text", "entity"):
        if not (config.use_text if channel == "text" else config.use_entity):
            continue
        raw_q, raw_d = _channel_inputs(query, doc, channel)
        dim = _channel_dim(query, doc, channel, model.d_t, model.d_e)
        w, b = model.adapter.for_channel(channel)
        xq = None if raw_q is None else raw_q @ w + b
        xd = None if raw_d is None else raw_d @ w + b
        channel_blocks, trace = _channel_blocks(channel, xq, xd, config, dim)
        blocks.extend(channel_blocks)
        if trace is not None:
            trace.raw_q, trace.raw_d = raw_q, raw_d
            traces[channel] = trace

    vector = np.concatenate([b for _, b in blocks])
    s = float(first_stage_score) if config.score_scaling else 1.0
    features = vector * s
    if not np.all(np.isfinite(features)):
        raise NumericError("non-finite interaction features")

    loss, prob, grads, d_features = _head_backward(model, features, label)
    d_vector = d_features * s

    grads["adapter_w_text"] = np.zeros_like(model.adapter.w_text)
    grads["adapter_b_text"] = np.zeros_like(model.adapter.b_text)
    grads["adapter_w_entity"] = np.zeros_like(model.adapter.w_entity)
    grads["adapter_b_entity"] = np.zeros_like(model.adapter.b_entity)

    offset = 0
    per_channel: dict[str, dict[str, np.ndarray]] = {}
    for label_key, block in blocks:
        channel, name = label_key.split(".", 1)
        width = block.shape[0]
        per_channel.setdefault(channel, {})[name] = d_vector[offset : offset + width]
        offset += width

    for channel, trace in traces.items():
        d_w, d_b = _channel_backward(trace, per_channel[channel], config)
        grads[f"adapter_w_{channel}"] = d_w
        grads[f"adapter_b_{channel}"] = d_b
    return loss, prob, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _config_flags(config: AblationConfig, adapter: bool) -> int:
    values = {
        "add": "add" in config.ops,
        "multiply": "multiply" in config.ops,
        "subtract": "subtract" in config.ops,
        "use_text": config.use_text,
        "use_entity": config.use_entity,
        "score_scaling": config.score_scaling,
        "adapter": adapter,
    }
    flags = 0
    for name, bit in _FLAG_BITS:
        if values[name]:
            flags |= 1 << bit
    return flags


def _config_from_flags(flags: int) -> tuple[AblationConfig, bool]:
    values = {name: bool(flags & (1 << bit)) for name, bit in _FLAG_BITS}
    ops = frozenset(op for op in CANONICAL_OPS if values[op])
    config = AblationConfig(
        ops=ops,
        use_text=values["use_text"],
        use_entity=values["use_entity"],
        score_scaling=values["score_scaling"],
    )
    return config, values["adapter"]


def save_model(model: Model, path: str) -> None:
    """Serialize a bilinear model (little-endian, float64 row-major)."""
    if not isinstance(model, BilinearModel):
        raise ValueError("only bilinear models have a checkpoint format")
    version = _MODEL_VERSION_ADAPTER if model.adapter is not None else _MODEL_VERSION_PLAIN
    d = model.matrix.shape[0]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(_U32.pack(version))
        fh.write(_U32.pack(d))
        fh.write(_U32.pack(model.d_t))
        fh.write(_U32.pack(model.d_e))
        fh.write(_U32.pack(_config_flags(model.config, model.adapter is not None)))
        fh.write(model.matrix.astype("<f8").tobytes())
        if model.adapter is not None:
            fh.write(model.adapter.w_text.astype("<f8").tobytes())
            fh.write(model.adapter.b_text.astype("<f8").tobytes())
            fh.write(model.adapter.w_entity.astype("<f8").tobytes())
            fh.write(model.adapter.b_entity.astype("<f8").tobytes())


def load_model(path: str) -> BilinearModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model checkpoint (bad magic)")
    off = 5

    def u32():
        nonlocal off
        if off + 4 > len(data):
            raise DataFormatError(f"{path}: truncated header")
        (value,) = _U32.unpack_from(data, off)
        off += 4
        return value

    version = u32()
    if version not in (_MODEL_VERSION_PLAIN, _MODEL_VERSION_ADAPTER):
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    d, d_t, d_e = u32(), u32(), u32()
    config, has_adapter = _config_from_flags(u32())
    if has_adapter != (version == _MODEL_VERSION_ADAPTER):
        raise DataFormatError(f"{path}: adapter flag disagrees with version {version}")
    expected = config.feature_dim(d_t, d_e)
    if d != expected:
        raise DataFormatError(
            f"{path}: matrix dim {d} does not match config (expected {expected})"
        )

    def f64(count):
        nonlocal off
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise DataFormatError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += nbytes
        return arr

    matrix = f64(d * d).reshape(d, d)
    adapter = None
    if has_adapter:
        adapter = Adapter(
            w_text=f64(d_t * d_t).reshape(d_t, d_t),
            b_text=f64(d_t),
            w_entity=f64(d_e * d_e).reshape(d_e, d_e),
            b_entity=f64(d_e),
        )
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes after checkpoint")
    return BilinearModel(matrix, config, d_t, d_e, adapter)
