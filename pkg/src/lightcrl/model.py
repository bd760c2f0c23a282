"""The Deep Fusion Encoder: projection heads, context vectors, fusion, block.

One set of block and output weights serves both modalities; what tells the
block which modality it is looking at is the projected context vector fused
into the projected embedding.  The representation is read from token 0 of
the block output and L2-normalised.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .rng import STREAM_INIT, make_rng, standard_normal, uniform

FUSION_KINDS = ("add", "multiply", "concat", "attention")
N_HEADS = 4
FF_MULT = 4
LN_EPS = 1e-5
TAU_INIT = 0.1
TAU_MIN, TAU_MAX = 0.01, 100.0


@dataclass(frozen=True)
class DFEConfig:
    d1: int
    d2: int
    d_ctx: int = 16
    d_model: int = 64
    d_out: int = 64
    fusion: str = "add"

    def validate(self):
        for f in fields(self):
            if f.name != "fusion" and int(getattr(self, f.name)) < 1:
                raise ContractError(f"{f.name} must be >= 1")
        if self.d_model % N_HEADS:
            raise ContractError(f"d_model={self.d_model} is not divisible by {N_HEADS} heads")
        if self.fusion not in FUSION_KINDS:
            raise ContractError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ProjectionHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x):
        return project(self, x)


@dataclass
class ContextTable:
    c: Tensor

    def row(self, modality):
        return ag.reshape(ag.take(self.c, modality - 1, axis=0), (1, self.c.shape[1]))


@dataclass
class FusionStrategy:
    kind: str
    down_w: Tensor | None = None
    down_b: Tensor | None = None


@dataclass
class TransformerBlock:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor


@dataclass
class DFEParameters:
    config: DFEConfig
    g1: ProjectionHead
    g2: ProjectionHead
    g3: ProjectionHead
    contexts: ContextTable
    fusion: FusionStrategy
    block: TransformerBlock
    out_w: Tensor
    out_b: Tensor
    log_tau: Tensor

    def named_tensors(self):
        """All trainable tensors in a fixed order, keyed by dotted name."""
        out = {}
        for prefix in ("g1", "g2", "g3"):
            head = getattr(self, prefix)
            for f in fields(head):
                out[f"{prefix}.{f.name}"] = getattr(head, f.name)
        out["contexts.c"] = self.contexts.c
        if self.fusion.kind == "concat":
            out["fusion.down_w"] = self.fusion.down_w
            out["fusion.down_b"] = self.fusion.down_b
        for f in fields(self.block):
            out[f"block.{f.name}"] = getattr(self.block, f.name)
        out["out_w"] = self.out_w
        out["out_b"] = self.out_b
        out["log_tau"] = self.log_tau
        return out

    def tau(self):
        return float(np.exp(self.log_tau.data))

    def param_count(self):
        return param_count(self)

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.zero_grad()

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load_state_dict(self, state):
        named = self.named_tensors()
        if set(state) != set(named):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in named.items():
            src = np.asarray(state[k])
            if src.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {src.shape}")
            t.data[...] = src

    def copy(self):
        return self.astype(self.dtype)

    def astype(self, dtype):
        """Independent copy with every tensor cast to ``dtype``."""
        clone = init_parameters(**self.config.to_dict(), seed=0, dtype=dtype)
        clone.load_state_dict(self.state_dict())
        return clone

    @property
    def dtype(self):
        return self.log_tau.dtype


def _he_uniform(rng, fan_in, shape, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(uniform(rng, shape, -bound, bound), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def _head(rng, d_in, d_model, dtype):
    return ProjectionHead(
        _he_uniform(rng, d_in, (d_in, d_model), dtype),
        _zeros(d_model, dtype),
        _he_uniform(rng, d_model, (d_model, d_model), dtype),
        _zeros(d_model, dtype),
    )


def init_parameters(d1, d2, d_ctx=16, d_model=64, d_out=64, fusion="add", seed=0, dtype=np.float32, fusion_kind=None):
    """Fresh DFE parameters, deterministic in ``seed``.

    Weights are He-uniform on fan-in, biases and layer-norm shifts zero,
    layer-norm gains one, contexts ``N(0, 1/d_ctx)`` and ``tau = 0.1``.
    ``fusion_kind`` is accepted as an alias of ``fusion``.
    """
    if fusion_kind is not None:
        fusion = fusion_kind
    cfg = DFEConfig(d1, d2, d_ctx, d_model, d_out, fusion)
    cfg.validate()
    rng = make_rng(seed, STREAM_INIT)
    d, dt = d_model, dtype
    g1 = _head(rng, d1, d, dt)
    g2 = _head(rng, d2, d, dt)
    g3 = _head(rng, d_ctx, d, dt)
    ctx = ContextTable(Tensor(standard_normal(rng, (2, d_ctx)) / math.sqrt(d_ctx), requires_grad=True, dtype=dt))
    if fusion == "concat":
        fusion_s = FusionStrategy(fusion, _he_uniform(rng, 2 * d, (2 * d, d), dt), _zeros(d, dt))
    else:
        fusion_s = FusionStrategy(fusion)
    block = TransformerBlock(
        _ones(d, dt), _zeros(d, dt),
        _he_uniform(rng, d, (d, d), dt), _zeros(d, dt),
        _he_uniform(rng, d, (d, d), dt),
        _he_uniform(rng, d, (d, d), dt), _zeros(d, dt),
        _he_uniform(rng, d, (d, d), dt), _zeros(d, dt),
        _ones(d, dt), _zeros(d, dt),
        _he_uniform(rng, d, (d, FF_MULT * d), dt), _zeros(FF_MULT * d, dt),
        _he_uniform(rng, FF_MULT * d, (FF_MULT * d, d), dt), _zeros(d, dt),
    )  # fmt: skip
    out_w = _he_uniform(rng, d, (d, d_out), dt)
    log_tau = Tensor(np.asarray(math.log(TAU_INIT)), requires_grad=True, dtype=dt)
    return DFEParameters(cfg, g1, g2, g3, ctx, fusion_s, block, out_w, _zeros(d_out, dt), log_tau)


def analytic_param_count(config):
    """Closed-form trainable scalar count for ``config``."""
    d1, d2, dc, d, do = config.d1, config.d2, config.d_ctx, config.d_model, config.d_out

    def head(d_in):
        return d_in * d + d + d * d + d

    # q, v, o carry biases; a key bias only shifts each score row and cancels in softmax
    block = 4 * d * d + 3 * d + 4 * d + (d * FF_MULT * d + FF_MULT * d) + (FF_MULT * d * d + d)
    concat = (2 * d * d + d) if config.fusion == "concat" else 0
    return head(d1) + head(d2) + head(dc) + 2 * dc + concat + block + (d * do + do) + 1


def param_count(params):
    return int(sum(t.size for t in params.named_tensors().values()))


# ---------------------------------------------------------------- forward pieces


def project(head, x):
    """Two-layer MLP ``relu(x W1 + b1) W2 + b2`` applied row-wise."""
    if x.ndim != 2 or x.shape[1] != head.w1.shape[0]:
        raise ShapeError(f"project: input {x.shape} does not match head input width {head.w1.shape[0]}")
    return ag.linear(ag.relu(ag.linear(x, head.w1, head.b1)), head.w2, head.b2)


def fuse(strategy, e, ctx):
    """Combine projected embeddings ``[k, d]`` with one projected context row.

    Returns a token sequence ``[k, T, d]``: ``T = 1`` for add, multiply and
    concat; ``T = 2`` with tokens ``[e, ctx]`` for attention.
    """
    k, d = e.shape
    if ctx.shape not in ((d,), (1, d)):
        raise ShapeError(f"fuse: context {ctx.shape} does not match embedding width {d}")
    rows = ag.broadcast_rows(ctx, k)
    kind = strategy.kind
    if kind == "add":
        tokens = ag.add(e, rows)
    elif kind == "multiply":
        tokens = ag.mul(e, rows)
    elif kind == "concat":
        tokens = ag.linear(ag.concat([e, rows], axis=1), strategy.down_w, strategy.down_b)
    elif kind == "attention":
        return ag.stack([e, rows], axis=1)
    else:
        raise ContractError(f"unknown fusion kind {kind!r}")
    return ag.reshape(tokens, (k, 1, d))


def _linear3(x, w, b):
    k, t, d = x.shape
    return ag.reshape(ag.linear(ag.reshape(x, (k * t, d)), w, b), (k, t, w.shape[1]))


def _split_heads(x):
    k, t, d = x.shape
    h = N_HEADS
    x = ag.transpose(ag.reshape(x, (k, t, h, d // h)), (0, 2, 1, 3))
    return ag.reshape(x, (k * h, t, d // h))


def _merge_heads(x, k):
    kh, t, dh = x.shape
    x = ag.transpose(ag.reshape(x, (k, N_HEADS, t, dh)), (0, 2, 1, 3))
    return ag.reshape(x, (k, t, N_HEADS * dh))


def attention(block, x):
    """Multi-head scaled dot-product self-attention within each row's sequence."""
    k, t, d = x.shape
    q = _split_heads(_linear3(x, block.wq, block.bq))
    kk = _split_heads(_linear3(x, block.wk, None))
    v = _split_heads(_linear3(x, block.wv, block.bv))
    scores = ag.bmm(q, ag.transpose(kk, (0, 2, 1))) * (1.0 / math.sqrt(d // N_HEADS))
    weights = ag.softmax_rows(scores)
    return _linear3(_merge_heads(ag.bmm(weights, v), k), block.wo, block.bo)


def transformer_block(block, x):
    """Pre-norm block: ``h = x + MHA(LN(x))``, ``y = h + FF(LN(h))``."""
    h = ag.add(x, attention(block, ag.layer_norm(x, block.ln1_g, block.ln1_b, LN_EPS)))
    z = ag.layer_norm(h, block.ln2_g, block.ln2_b, LN_EPS)
    ff = _linear3(ag.relu(_linear3(z, block.ff_w1, block.ff_b1)), block.ff_w2, block.ff_b2)
    return ag.add(h, ff)


def encode_modality(params, x, modality):
    """Map frozen-encoder outputs ``[k, d_l]`` of modality 1 or 2 to unit rows ``[k, d_out]``."""
    if modality not in (1, 2):
        raise ContractError(f"modality must be 1 or 2, got {modality!r}")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=params.dtype)
    elif x.dtype != params.dtype:
        x = Tensor(x.data, dtype=params.dtype)
    head = params.g1 if modality == 1 else params.g2
    e = project(head, x)
    ctx = project(params.g3, params.contexts.row(modality))
    y = transformer_block(params.block, fuse(params.fusion, e, ctx))
    token0 = ag.take(y, 0, axis=1)
    return ag.l2_normalize(ag.linear(token0, params.out_w, params.out_b))
