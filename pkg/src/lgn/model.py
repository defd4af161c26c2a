"""Language guided network over a 2-D temporal proposal map.

Pipeline per query/video pair::

    tokens -> LSTM -> f_s
    clips -> span pooling -> [FC -> modulate by W^M f_s -> dropout] x n_early
          -> fuse with f_s (Hadamard + per-cell L2)
          -> [conv -> relu -> channel attention from W^M' f_s -> L2] x n_conv
          -> 1x1 conv -> sigmoid score per cell

Public stage functions take ``[C, N, N]`` or ``[B, C, N, N]`` maps; the
composed forward pass runs channels-last. Invalid cells (start > end) are
re-zeroed after every stage. The two language projections W^M and W^M' are
single parameters shared by every unit that uses them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ConfigError, DimensionError, NoProposalError
from .grad import ops
from .grad.params import ParameterSet, glorot
from .grad.tensor import Parameter, Tensor
from .moments import (
    ClipFeatureSequence,
    MomentSpan,
    cell_to_span,
    pool_moment_features,
    resample_clips,
    temporal_iou,
    valid_mask,
)
from .text import (
    LstmParams,
    Vocabulary,
    encode_tokens,
    init_embeddings,
    lstm_forward_batch,
    pad_batch,
    sentence_embed,
)

ABLATIONS = {
    "baseline": (False, False),
    "early": (True, False),
    "late": (False, True),
    "full": (True, True),
}


@dataclass
class ModelConfig:
    N: int = 16
    d_v: int = 0  # filled from the data when 0
    d_w: int = 16
    d_h: int = 32
    d_s: int = 32
    n_early: int = 2
    n_conv: int = 6
    n_late: int = 6
    kernel_size: int = 3
    pooling: str = "max"
    drop_probability: float = 0.75
    dropout_ratio_is_keep: bool = False
    use_early: bool = True
    use_late: bool = True
    late_norm: str = "joint"
    max_query_len: int = 20
    l2_eps: float = 1e-12
    logit_clamp: float = 30.0
    seed: int = 0

    def __post_init__(self):
        self.validate(allow_missing_dv=True)

    def validate(self, allow_missing_dv: bool = False) -> None:
        widths = {"N": self.N, "d_w": self.d_w, "d_h": self.d_h, "d_s": self.d_s, "max_query_len": self.max_query_len}
        if not allow_missing_dv:
            widths["d_v"] = self.d_v
        for name, v in widths.items():
            if int(v) < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.n_early < 1 or self.n_conv < 1 or self.n_late < 0:
            raise ConfigError("need n_early >= 1, n_conv >= 1, n_late >= 0")
        if self.n_late > self.n_conv:
            raise ConfigError(f"n_late ({self.n_late}) cannot exceed n_conv ({self.n_conv})")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.pooling not in ("max", "mean"):
            raise ConfigError(f"pooling must be 'max' or 'mean', got {self.pooling!r}")
        if self.late_norm not in ("joint", "per_channel"):
            raise ConfigError(f"late_norm must be 'joint' or 'per_channel', got {self.late_norm!r}")
        if not 0.0 <= self.drop_probability < 1.0 and not self.dropout_ratio_is_keep:
            raise ConfigError(f"drop_probability must be in [0, 1), got {self.drop_probability}")
        if self.dropout_ratio_is_keep and not 0.0 < self.drop_probability <= 1.0:
            raise ConfigError(f"keep ratio must be in (0, 1], got {self.drop_probability}")

    @property
    def effective_drop(self) -> float:
        """Probability of zeroing an activation, whichever reading of the ratio is configured."""
        return 1.0 - self.drop_probability if self.dropout_ratio_is_keep else self.drop_probability

    @classmethod
    def paper_dims(cls, **overrides) -> "ModelConfig":
        base = dict(d_v=4096, d_w=300, d_h=512, d_s=512)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def ablation(self, name: str) -> "ModelConfig":
        try:
            early, late = ABLATIONS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}") from None
        return replace(self, use_early=early, use_late=late)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- parameter groups


@dataclass
class TextParams:
    embedding: Parameter
    lstm: LstmParams
    proj_W: Parameter
    proj_b: Parameter


@dataclass
class EarlyModulationParams:
    fc_W: list  # per unit, [d_h, in]
    fc_b: list
    lang_W: Parameter  # W^M, shared by all units
    lang_b: Parameter


@dataclass
class FusionParams:
    vis_W: Parameter
    vis_b: Parameter
    sent_W: Parameter
    sent_b: Parameter


@dataclass
class LateGuidanceParams:
    lang_W: Parameter  # W^M', shared by all modules
    lang_b: Parameter


@dataclass
class LocalizerParams:
    conv_W: list  # per layer, [d_h, d_h, k, k]
    conv_b: list
    head_W: Parameter  # [1, d_h, 1, 1]
    head_b: Parameter


# ---------------------------------------------------------------- stages


def _as_batch(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise DimensionError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


def _to_last(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


def _to_first(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))


def _cell_mask(n: int) -> np.ndarray:
    return valid_mask(n)[:, :, None]


# Internal stages work channels-last, [B, N, N, C], so every conv is one
# contiguous matmul. The public wrappers below take and return [C, N, N] or
# [B, C, N, N].


def _fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    kern = ops.reshape(weight, weight.shape + (1, 1))
    return ops.conv2d(x, kern, bias, channels_last=True, out_mask=valid_mask(x.shape[1]))


def _modulate(x: Tensor, f_s: Tensor, lang_W: Tensor, lang_b: Tensor, what: str) -> Tensor:
    if lang_W.shape[0] != x.shape[-1]:
        raise DimensionError(f"{what} outputs {lang_W.shape[0]} channels, feature map has {x.shape[-1]}")
    return ops.hadamard(x, ops.linear(f_s, lang_W, lang_b), over=(1, 2))


def _visual_head(x, f_s, params, config, training, rng, trace):
    valid = _cell_mask(x.shape[1])
    for w, b in zip(params.fc_W, params.fc_b):
        x = _fc(x, w, b)
        if config.use_early:
            x = _modulate(x, f_s, params.lang_W, params.lang_b, "W^M")
        x = ops.dropout(x, config.effective_drop, training, rng)
        x = ops.mask(x, valid)
        if trace is not None:
            trace.append(("visual_unit", x))
    return x


def _fuse(v, f_s, params, eps):
    x = ops.hadamard(_fc(v, params.vis_W, params.vis_b), ops.linear(f_s, params.sent_W, params.sent_b), over=(1, 2))
    x = ops.l2_normalize(x, axis=-1, eps=eps)
    return ops.mask(x, _cell_mask(v.shape[1]))


def _late_guide(C, f_s, params, norm, eps):
    x = _modulate(C, f_s, params.lang_W, params.lang_b, "W^M'")
    x = ops.l2_normalize(x, axis=-1 if norm == "joint" else (1, 2), eps=eps)
    return ops.mask(x, _cell_mask(C.shape[1]))


def _localize(x, f_s, params, late, config, trace):
    n = x.shape[1]
    valid = _cell_mask(n)
    for i, (w, b) in enumerate(zip(params.conv_W, params.conv_b)):
        x = ops.mask(ops.relu(ops.conv2d(x, w, b, channels_last=True, out_mask=valid_mask(n))), valid)
        if trace is not None:
            trace.append(("conv", x))
        if config.use_late and i < config.n_late:
            x = _late_guide(x, f_s, late, config.late_norm, config.l2_eps)
            if trace is not None:
                trace.append(("late_guide", x))
    logits = ops.conv2d(x, params.head_W, params.head_b, channels_last=True, out_mask=valid_mask(n))
    logits = ops.clamp(ops.reshape(logits, logits.shape[:3]), -config.logit_clamp, config.logit_clamp)
    p = ops.mask(ops.sigmoid(logits), valid_mask(n))
    if trace is not None:
        trace.append(("scores", p))
    return p


def pointwise_fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-cell fully connected layer on [B, C_in, N, N], as a 1x1 convolution."""
    kern = ops.reshape(weight, weight.shape + (1, 1))
    return ops.conv2d(x, kern, bias)


def early_modulate(f_v: Tensor, f_s: Tensor, params: EarlyModulationParams) -> Tensor:
    """Scale every cell of ``f_v`` channel-wise by ``W^M f_s + b``."""
    f_v, squeeze = _as_batch(f_v, 4)
    f_s, _ = _as_batch(f_s, 2)
    x = _modulate(_to_last(f_v), f_s, params.lang_W, params.lang_b, "W^M")
    return _unbatch(_to_first(x), squeeze)


def visual_head(
    cells: Tensor,
    f_s: Tensor,
    params: EarlyModulationParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> Tensor:
    """Stacked FC units over pooled cells [d_v, N, N]; trace entries are channels-last."""
    cells, squeeze = _as_batch(cells, 4)
    f_s, _ = _as_batch(f_s, 2)
    x = _visual_head(_to_last(cells), f_s, params, config, training, rng, trace)
    return _unbatch(_to_first(x), squeeze)


def fuse(v: Tensor, f_s: Tensor, params: FusionParams, eps: float = 1e-12) -> Tensor:
    """Project both modalities to d_h, multiply, and L2-normalize each cell."""
    v, squeeze = _as_batch(v, 4)
    f_s, _ = _as_batch(f_s, 2)
    return _unbatch(_to_first(_fuse(_to_last(v), f_s, params, eps)), squeeze)


def late_guide(
    C: Tensor, f_s: Tensor, params: LateGuidanceParams, norm: str = "joint", eps: float = 1e-12
) -> Tensor:
    """Channel attention ``alpha = W^M' f_s + b`` followed by L2 normalization.

    ``norm="joint"`` normalizes the attended channel vector of each cell;
    ``norm="per_channel"`` normalizes each attended channel map over its cells.
    """
    C, squeeze = _as_batch(C, 4)
    f_s, _ = _as_batch(f_s, 2)
    return _unbatch(_to_first(_late_guide(_to_last(C), f_s, params, norm, eps)), squeeze)


def localize(
    fused: Tensor,
    f_s: Tensor,
    params: LocalizerParams,
    late: LateGuidanceParams,
    config: ModelConfig,
    trace: list | None = None,
) -> Tensor:
    """Masked 2-D conv stack with late guidance; returns scores [N, N] or [B, N, N]."""
    fused, squeeze = _as_batch(fused, 4)
    f_s, _ = _as_batch(f_s, 2)
    p = _localize(_to_last(fused), f_s, params, late, config, trace)
    return _unbatch(p, squeeze)


# ---------------------------------------------------------------- model


class LGNModel:
    """Parameters plus the composed forward pass."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, embedding: Parameter | None = None):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.params = ParameterSet()
        rng = np.random.default_rng(config.seed)
        c = config
        P = self._add

        emb = embedding if embedding is not None else init_embeddings(len(vocab), c.d_w, rng)
        if emb.shape != (len(vocab), c.d_w):
            raise DimensionError(f"embedding table {emb.shape} does not match vocab {len(vocab)} x d_w {c.d_w}")
        self.params.add(emb)
        lstm = LstmParams.init(c.d_w, c.d_h, rng)
        for p in lstm.all():
            self.params.add(p)
        self.text = TextParams(
            emb,
            lstm,
            P("text.proj.W", glorot(rng, (c.d_s, c.d_h), c.d_h, c.d_s)),
            P("text.proj.b", np.zeros(c.d_s)),
        )

        fc_W, fc_b = [], []
        width = c.d_v
        for u in range(c.n_early):
            fc_W.append(P(f"early.fc{u}.W", glorot(rng, (c.d_h, width), width, c.d_h)))
            fc_b.append(P(f"early.fc{u}.b", np.zeros(c.d_h)))
            width = c.d_h
        # modulation starts near identity: bias 1, small weights
        self.early = EarlyModulationParams(
            fc_W,
            fc_b,
            P("early.lang.W", 0.1 * glorot(rng, (c.d_h, c.d_s), c.d_s, c.d_h)),
            P("early.lang.b", np.ones(c.d_h)),
        )
        self.fusion = FusionParams(
            P("fusion.vis.W", glorot(rng, (c.d_h, c.d_h), c.d_h, c.d_h)),
            P("fusion.vis.b", np.zeros(c.d_h)),
            P("fusion.sent.W", glorot(rng, (c.d_h, c.d_s), c.d_s, c.d_h)),
            P("fusion.sent.b", np.ones(c.d_h)),
        )
        k = c.kernel_size
        conv_W, conv_b = [], []
        for i in range(c.n_conv):
            fan = c.d_h * k * k
            conv_W.append(P(f"loc.conv{i}.W", glorot(rng, (c.d_h, c.d_h, k, k), fan, fan)))
            conv_b.append(P(f"loc.conv{i}.b", np.zeros(c.d_h)))
        self.localizer = LocalizerParams(
            conv_W,
            conv_b,
            P("loc.head.W", glorot(rng, (1, c.d_h, 1, 1), c.d_h, 1)),
            P("loc.head.b", np.zeros(1)),
        )
        self.late = LateGuidanceParams(
            P("late.lang.W", 0.1 * glorot(rng, (c.d_h, c.d_s), c.d_s, c.d_h)),
            P("late.lang.b", np.ones(c.d_h)),
        )
        # ablated branches keep their parameters (same init stream) but never train
        for on, group in ((c.use_early, self.early), (c.use_late, self.late)):
            if not on:
                group.lang_W.requires_grad = group.lang_b.requires_grad = False

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        return self.params.add(Parameter(name, data))

    # -- inputs

    def encode_query(self, tokens: list[str]) -> list[int]:
        return encode_tokens(tokens, self.vocab, self.config.max_query_len)

    def prepare_video(self, video: ClipFeatureSequence) -> np.ndarray:
        """Clip features -> pooled cell features [d_v, N, N]."""
        if video.d_v != self.config.d_v:
            raise DimensionError(f"{video.video_id}: feature width {video.d_v}, model expects {self.config.d_v}")
        seq = resample_clips(video, self.config.N)
        return pool_moment_features(seq, self.config.pooling).cell_features

    # -- forward

    def encode(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        h = lstm_forward_batch(ids, lengths, self.text.embedding, self.text.lstm)
        return sentence_embed(h, self.text.proj_W, self.text.proj_b)

    def forward_maps(
        self,
        cells: np.ndarray,
        ids: np.ndarray,
        lengths: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: list | None = None,
    ) -> Tensor:
        """Scores [B, N, N] for pooled maps [B, d_v, N, N] and padded queries.

        ``trace`` collects (stage, tensor) pairs; map tensors there are [B, N, N, C].
        """
        cells = np.asarray(cells, dtype=np.float64)
        if cells.ndim != 4 or cells.shape[0] != ids.shape[0]:
            raise DimensionError(f"cell features {cells.shape} do not match a batch of {ids.shape[0]} queries")
        f_s = self.encode(ids, lengths)
        x = Tensor(np.ascontiguousarray(cells.transpose(0, 2, 3, 1)))
        if trace is not None:
            trace.append(("pooled", x))
        v = _visual_head(x, f_s, self.early, self.config, training, rng, trace)
        fused = _fuse(v, f_s, self.fusion, self.config.l2_eps)
        if trace is not None:
            trace.append(("fused", fused))
        return _localize(fused, f_s, self.localizer, self.late, self.config, trace)

    def forward(self, video: ClipFeatureSequence, tokens: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation-mode scores [N, N] and validity mask for one pair."""
        cells = self.prepare_video(video)[None]
        ids, lengths = pad_batch([self.encode_query(tokens)])
        p = self.forward_maps(cells, ids, lengths)
        return p.data[0], valid_mask(self.config.N)


# ---------------------------------------------------------------- retrieval


def _ranked_cells(p: np.ndarray, valid: np.ndarray) -> list[tuple[int, int]]:
    a_idx, b_idx = np.nonzero(valid)
    if a_idx.size == 0:
        raise NoProposalError("no valid proposal cells")
    scores = p[a_idx, b_idx]
    order = np.lexsort((b_idx, a_idx, -scores))
    return [(int(a_idx[i]), int(b_idx[i])) for i in order]


def retrieve(p: np.ndarray, valid: np.ndarray, n: int, duration_s: float) -> MomentSpan:
    """Span of the best-scoring valid cell; ties go to smaller start, then smaller end."""
    a, b = _ranked_cells(np.asarray(p), np.asarray(valid, dtype=bool))[0]
    return cell_to_span(a, b, n, duration_s)


def rank_proposals(
    p: np.ndarray,
    valid: np.ndarray,
    count: int,
    nms_iou: float | None,
    n: int,
    duration_s: float,
) -> list[MomentSpan]:
    """Top ``count`` spans by score, optionally with greedy 1-D non-maximum suppression."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    kept: list[MomentSpan] = []
    for a, b in _ranked_cells(np.asarray(p), np.asarray(valid, dtype=bool)):
        span = cell_to_span(a, b, n, duration_s)
        if nms_iou is not None and any(temporal_iou(span, k) >= nms_iou for k in kept):
            continue
        kept.append(span)
        if len(kept) == count:
            break
    return kept
