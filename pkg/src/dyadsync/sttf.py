"""Dyadic spatial-temporal attention model over skeleton sequences.

Per frame, the 2 x J joints of the dyad become 2J tokens of (x, y)
coordinates; each token is projected to d_joint dims, tagged with a
learnable spatial position, and run through L pre-norm transformer
layers attending across the 2J tokens.  The per-frame token grid is then
flattened to a c_spa = 2J * d_joint frame vector, a learnable per-frame
offset is added, and a second stack of L layers attends across the f
frame tokens (c_temp dims, equal to c_spa here).  A mean-pool plus
linear head emits either 3 synchrony-class logits or one scalar score.

Attention is standard scaled dot-product over h heads: the per-head
weights are softmax(Q Kᵀ / sqrt(d_head)), row-stochastic by
construction, and can be captured for inspection (spatial maps slice
into per-person J x J blocks).  Dropout sits on the two token
embeddings, the attention weights, and the MLP outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ParameterError
from .pose_io import SkeletonSequence
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are the full-size reference settings."""

    f: int = 81
    num_joints: int = 17
    d_joint: int = 16
    layers: int = 4
    heads: int = 8
    dropout: float = 0.5
    head_kind: str = "classify"  # "classify" (3 logits) | "regress" (1 score)

    def __post_init__(self):
        if self.f < 1 or self.num_joints < 1 or self.d_joint < 1:
            raise ConfigError("f, num_joints and d_joint must be positive")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.d_joint % self.heads:
            raise ConfigError(
                f"heads ({self.heads}) must divide the joint embed dim ({self.d_joint})"
            )
        if self.c_temp % self.heads:
            raise ConfigError(
                f"heads ({self.heads}) must divide the temporal dim ({self.c_temp})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.head_kind not in ("classify", "regress"):
            raise ConfigError(f"head_kind must be 'classify' or 'regress', got {self.head_kind!r}")

    @property
    def tokens_spatial(self) -> int:
        return 2 * self.num_joints

    @property
    def c_spa(self) -> int:
        return self.tokens_spatial * self.d_joint

    @property
    def c_temp(self) -> int:
        # kept equal to c_spa: the frame vector feeds the temporal stack as-is
        return self.c_spa

    @property
    def d_head(self) -> int:
        return self.c_temp // self.heads

    @property
    def out_dim(self) -> int:
        return 3 if self.head_kind == "classify" else 1

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "num_joints": self.num_joints,
            "d_joint": self.d_joint,
            "layers": self.layers,
            "heads": self.heads,
            "dropout": self.dropout,
            "head_kind": self.head_kind,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass(frozen=True)
class MhsaParams:
    """Projection matrices of one attention block, all square d x d."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass(frozen=True)
class AttentionMaps:
    """Captured softmax weights: spatial (L, h, 2J, 2J), temporal (L, h, f, f).

    Raw maps are row-stochastic.  ``normalized()`` rescales each
    (layer, head) map to [0, 1] for image export; a person's J x J block
    of a spatial map is ``maps.spatial[l, h, a*J:(a+1)*J, b*J:(b+1)*J]``.
    """

    spatial: np.ndarray
    temporal: np.ndarray

    def normalized(self) -> "AttentionMaps":
        def per_map(stack):
            out = np.empty_like(stack)
            for l in range(stack.shape[0]):
                for h in range(stack.shape[1]):
                    m = stack[l, h]
                    lo, hi = m.min(), m.max()
                    out[l, h] = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
            return out

        return AttentionMaps(per_map(self.spatial), per_map(self.temporal))


def scaled_dot_product_attention(q, k, v, *, attn_dropout=0.0, training=False, rng=None):
    """softmax(Q Kᵀ / sqrt(d)) V over the trailing two axes.

    Returns (output, weights); ``weights`` are the pre-dropout softmax
    rows.  Leading axes broadcast, so stacked heads/batches ride along.
    """
    q, k, v = T._wrap(q), T._wrap(k), T._wrap(v)
    if q.shape != k.shape:
        raise DimensionError(f"Q {q.shape} and K {k.shape} must match")
    if q.data.ndim < 2:
        raise DimensionError("attention operands need ndim >= 2")
    if v.shape[:-1] != k.shape[:-1]:
        raise DimensionError(f"V {v.shape} does not align with K {k.shape}")
    d = q.shape[-1]
    axes = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = T.matmul(q, T.transpose(k, axes)) * (1.0 / math.sqrt(d))
    weights = T.softmax_rows(scores)
    applied = T.dropout_apply(weights, attn_dropout, training, rng)
    return T.matmul(applied, v), weights


def mhsa(x, params: MhsaParams, heads: int, *, attn_dropout=0.0, training=False,
         rng=None, capture: Optional[list] = None):
    """Multi-head self-attention: per-head attention, concat, W_out.

    ``x`` is (..., n, d); Q, K, V come from the three square projections,
    are split column-wise into ``heads`` blocks of d // heads, attended
    independently, re-concatenated, and mixed by ``wo``.  When ``capture``
    is a list, the (pre-dropout) weight stack (..., heads, n, n) is
    appended as a plain array.
    """
    x = T._wrap(x)
    n, d = x.shape[-2], x.shape[-1]
    if d % heads:
        raise ParameterError(f"heads ({heads}) must divide model dim ({d})")
    dh = d // heads
    lead = x.shape[:-2]
    nl = len(lead)
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)  # (..., n, h, dh) -> (..., h, n, dh)
    from_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)  # inverse is the same swap

    def split(t):
        return T.transpose(t.reshape(*lead, n, heads, dh), to_heads)

    qh = split(T.matmul(x, params.wq))
    kh = split(T.matmul(x, params.wk))
    vh = split(T.matmul(x, params.wv))
    out, weights = scaled_dot_product_attention(
        qh, kh, vh, attn_dropout=attn_dropout, training=training, rng=rng
    )
    if capture is not None:
        capture.append(weights.data.copy())
    merged = T.transpose(out, from_heads).reshape(*lead, n, d)
    return T.matmul(merged, params.wo)


class SttfModel:
    """Parameter container plus forward passes for the two-stage network.

    Construction is deterministic in ``seed``: parameters are created in
    a fixed order from the model's own init stream, so two models built
    from the same (config, seed) are bit-identical.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = ParamStore(seed, scope="sttf")
        cfg = config
        d, c, tokens = cfg.d_joint, cfg.c_temp, cfg.tokens_spatial
        p = self.params
        p.add_uniform("joint_proj.w", (2, d))
        p.add_zeros("joint_proj.b", (d,))
        p.add_uniform("spatial.pos", (tokens, d))
        for l in range(cfg.layers):
            self._add_layer(f"spatial.{l}", d)
        p.add_uniform("frame.pos", (cfg.f, cfg.c_spa))
        p.add_uniform("temporal.pos", (cfg.f, c))
        for l in range(cfg.layers):
            self._add_layer(f"temporal.{l}", c)
        p.add_uniform("head.w", (c, cfg.out_dim))
        p.add_zeros("head.b", (cfg.out_dim,))

    def _add_layer(self, prefix: str, d: int) -> None:
        p = self.params
        for name in ("wq", "wk", "wv", "wo"):
            p.add_uniform(f"{prefix}.attn.{name}", (d, d))
        p.add_ones(f"{prefix}.norm1.g", (d,))
        p.add_zeros(f"{prefix}.norm1.b", (d,))
        p.add_ones(f"{prefix}.norm2.g", (d,))
        p.add_zeros(f"{prefix}.norm2.b", (d,))
        p.add_uniform(f"{prefix}.mlp.w1", (d, 4 * d))
        p.add_zeros(f"{prefix}.mlp.b1", (4 * d,))
        p.add_uniform(f"{prefix}.mlp.w2", (4 * d, d))
        p.add_zeros(f"{prefix}.mlp.b2", (d,))

    # -- forward pieces ----------------------------------------------------

    def _layer(self, x, p, prefix, heads, training, rng, capture):
        cfg = self.config
        normed = T.layer_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
        attn = mhsa(
            normed,
            MhsaParams(
                p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.wk"],
                p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.wo"],
            ),
            heads,
            attn_dropout=cfg.dropout,
            training=training,
            rng=rng,
            capture=capture,
        )
        x = x + attn
        normed = T.layer_norm(x, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
        hidden = T.gelu(T.linear_apply(normed, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
        out = T.linear_apply(hidden, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])
        out = T.dropout_apply(out, cfg.dropout, training, rng)
        return x + out

    def _spatial_stack(self, frames: np.ndarray, tape, training, rng, capture):
        """(B, f, 2, J, 2) pose batch -> (B, f, c_spa) frame vectors."""
        cfg = self.config
        if frames.ndim != 5 or frames.shape[2:] != (2, cfg.num_joints, 2):
            raise DimensionError(f"expected (B, f, 2, {cfg.num_joints}, 2) poses, got {frames.shape}")
        if frames.shape[1] != cfg.f:
            raise ConfigError(f"sequence has {frames.shape[1]} frames, model expects {cfg.f}")
        batch = frames.shape[0]
        p = self.params.tracked(tape)
        tokens = Tensor(np.ascontiguousarray(frames).reshape(batch * cfg.f, cfg.tokens_spatial, 2))
        x = T.linear_apply(tokens, p["joint_proj.w"], p["joint_proj.b"])
        x = x + p["spatial.pos"]
        x = T.dropout_apply(x, cfg.dropout, training, rng)
        for l in range(cfg.layers):
            x = self._layer(x, p, f"spatial.{l}", cfg.heads, training, rng, capture)
        x = x.reshape(batch, cfg.f, cfg.c_spa)
        return x + p["frame.pos"]

    def _temporal_stack(self, z, tape, training, rng, capture):
        """(B, f, c_temp) -> (B, f, c_temp) after the frame-attention stack."""
        cfg = self.config
        if z.shape[-2:] != (cfg.f, cfg.c_temp):
            raise DimensionError(f"expected (..., {cfg.f}, {cfg.c_temp}), got {z.shape}")
        p = self.params.tracked(tape)
        y = z + p["temporal.pos"]
        y = T.dropout_apply(y, cfg.dropout, training, rng)
        for l in range(cfg.layers):
            y = self._layer(y, p, f"temporal.{l}", cfg.heads, training, rng, capture)
        return y

    def _head(self, y, tape):
        """(B, f, c_temp) -> (B, out_dim) via mean-pool + linear."""
        p = self.params.tracked(tape)
        pooled = y.mean(axis=-2)
        return T.linear_apply(pooled, p["head.w"], p["head.b"])

    def forward(self, frames: np.ndarray, tape=None, training=False, rng=None,
                capture_spatial: Optional[list] = None,
                capture_temporal: Optional[list] = None):
        """Full pass over a (B, f, 2, J, 2) batch -> (B, out_dim) tensor."""
        z = self._spatial_stack(frames, tape, training, rng, capture_spatial)
        y = self._temporal_stack(z, tape, training, rng, capture_temporal)
        return self._head(y, tape)

    def predict_batch(self, frames: np.ndarray) -> np.ndarray:
        """Gradient-free eval-mode forward; returns plain (B, out_dim) logits."""
        return self.forward(frames).data

    def prepare_inputs(self, sequences) -> np.ndarray:
        """Stack sequences into the (B, f, 2, J, 2) batch this model eats."""
        return np.stack([seq.frames for seq in sequences])

    def param_count(self) -> int:
        return self.params.total_size()


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must equal the store's actual size.

    With d = d_joint, c = c_temp, t = 2J tokens, one transformer layer at
    width w costs 4w^2 (attention) + 8w^2 + 5w (MLP) + 4w (norms).  Add
    the 2->d token projection, the three positional tables, and the head:

        (2d + d) + t*d + L*(12d^2 + 9d) + 2*f*c + L*(12c^2 + 9c)
            + c*out + out
    """
    d, c, t = cfg.d_joint, cfg.c_temp, cfg.tokens_spatial
    layer = lambda w: 12 * w * w + 9 * w
    return (
        3 * d
        + t * d
        + cfg.layers * layer(d)
        + 2 * cfg.f * c
        + cfg.layers * layer(c)
        + c * cfg.out_dim
        + cfg.out_dim
    )


# -- single-sequence surfaces ------------------------------------------------


def spatial_forward(seq: SkeletonSequence, model: SttfModel, training: bool = False,
                    tape=None, rng=None, capture: Optional[list] = None):
    """One sequence through the joint-token stack: (f, c_spa) frame vectors."""
    z = model._spatial_stack(seq.frames[None], tape, training, rng, capture)
    return z.reshape(model.config.f, model.config.c_spa)


def temporal_forward(z, model: SttfModel, training: bool = False,
                     tape=None, rng=None, capture: Optional[list] = None):
    """(f, c_temp) frame vectors through the frame-attention stack."""
    z = T._wrap(z)
    if z.data.ndim != 2:
        raise DimensionError(f"expected a 2-d (f, c_temp) input, got {z.shape}")
    cfg = model.config
    out = model._temporal_stack(z.reshape(1, *z.shape), tape, training, rng, capture)
    return out.reshape(cfg.f, cfg.c_temp)


def predict_head(y, model: SttfModel, tape=None):
    """Pool (f, c_temp) features and map to 3 logits or a scalar score."""
    y = T._wrap(y)
    cfg = model.config
    out = model._head(y.reshape(1, *y.shape), tape)
    return out.reshape((3,)) if cfg.head_kind == "classify" else out.reshape(())


def export_attention(model: SttfModel, seq: SkeletonSequence) -> AttentionMaps:
    """Eval-mode attention capture for one sequence.

    Spatial maps are averaged over the f frames (an average of
    row-stochastic matrices is row-stochastic), giving one 2J x 2J map
    per layer and head; temporal maps are the f x f weights as-is.
    """
    cap_s: list = []
    cap_t: list = []
    model.forward(seq.frames[None], capture_spatial=cap_s, capture_temporal=cap_t)
    spatial = np.stack([layer.mean(axis=0) for layer in cap_s]) if cap_s else np.zeros(
        (0, model.config.heads, model.config.tokens_spatial, model.config.tokens_spatial)
    )
    temporal = np.stack([layer[0] for layer in cap_t]) if cap_t else np.zeros(
        (0, model.config.heads, model.config.f, model.config.f)
    )
    return AttentionMaps(spatial=spatial, temporal=temporal)
