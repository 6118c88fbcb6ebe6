"""Transformer encoder stack with the spatial<->sequence reshaper and the
three positional-embedding variants (none, learnable, sine).

Feature maps (B, C, H, W) are flattened to sequences (B, A, C) with
A = H * W; per-head projections are stored packed as (C, C) matrices whose
column blocks [h*c_k : (h+1)*c_k] belong to head h, which keeps the parameter
count independent of the head count.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def kaiming_uniform(rng, shape, fan_in):
    """He-style uniform init: bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


@dataclass
class EncoderConfig:
    d_model: int = 32
    n_heads: int = 8
    n_layers: int = 3
    d_ff: int = 64
    activation: str = "relu"  # relu | gelu
    embedding: str = "sine"  # none | learnable | sine

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}"
            )
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unsupported encoder activation {self.activation!r}")
        if self.embedding not in ("none", "learnable", "sine"):
            raise ValueError(f"unsupported embedding kind {self.embedding!r}")

    @property
    def c_k(self):
        return self.d_model // self.n_heads

    @property
    def c_v(self):
        return self.d_model // self.n_heads


def reshape_to_sequence(fmap):
    """(B, C, H, W) -> (B, A, C) with position index h * W + w."""
    b, c, h, w = fmap.data.shape
    return T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (b, h * w, c))


def reshape_to_spatial(seq, h, w):
    """Exact inverse of reshape_to_sequence."""
    b, a, c = seq.data.shape
    if a != h * w:
        raise ShapeError(f"sequence length {a} does not factor as {h}x{w}")
    return T.transpose(T.reshape(seq, (b, h, w, c)), (0, 3, 1, 2))


def sine_position_table(a, c):
    """Interleaved sin/cos table: even features sin, odd features cos, with
    per-pair frequency 10000^(-2i/c) over positions 0..a-1."""
    if c % 2 != 0:
        raise ShapeError(f"sine embedding needs an even feature count, got {c}")
    positions = np.arange(a, dtype=np.float64)[:, None]
    idx = np.arange(0, c, 2, dtype=np.float64)
    freq = np.power(10000.0, -idx / c)
    table = np.empty((a, c))
    table[:, 0::2] = np.sin(positions * freq)
    table[:, 1::2] = np.cos(positions * freq)
    return table


def position_embedding(kind, a, c, param=None, rng=None):
    """Additive (A, C) position signal for a sequence.

    kind='none' contributes zeros and no parameters; 'sine' is the fixed
    table; 'learnable' returns the trained parameter (or a freshly
    initialized one when only an rng is supplied).
    """
    if kind == "none":
        return Tensor(np.zeros((a, c)))
    if kind == "sine":
        return Tensor(sine_position_table(a, c))
    if kind == "learnable":
        if param is not None:
            return param
        if rng is None:
            raise ValueError("learnable embedding needs an existing param or an rng")
        return Tensor(rng.normal(0.0, 0.02, (a, c)), requires_grad=True)
    raise ValueError(f"unsupported embedding kind {kind!r}")


class MultiHeadSelfAttention:
    """Packed per-head Q/K/V projections, scaled dot-product attention,
    head concatenation, and the output projection."""

    def __init__(self, cfg, rng):
        c = cfg.d_model
        self.cfg = cfg
        self.wq = Tensor(xavier_uniform(rng, (c, c), c, cfg.c_k), requires_grad=True)
        self.wk = Tensor(xavier_uniform(rng, (c, c), c, cfg.c_k), requires_grad=True)
        self.wv = Tensor(xavier_uniform(rng, (c, c), c, cfg.c_v), requires_grad=True)
        self.wo = Tensor(xavier_uniform(rng, (c, c), c, c), requires_grad=True)
        self.bo = Tensor(np.zeros(c), requires_grad=True)

    def qkv_project(self, seq, head):
        """Per-head projections (Q_h, K_h, V_h) of a (B, A, C) sequence."""
        cfg = self.cfg
        cols = slice(head * cfg.c_k, (head + 1) * cfg.c_k)
        q = T.matmul(seq, T.narrow(self.wq, 1, cols.start, cfg.c_k))
        k = T.matmul(seq, T.narrow(self.wk, 1, cols.start, cfg.c_k))
        v = T.matmul(seq, T.narrow(self.wv, 1, cols.start, cfg.c_v))
        return q, k, v

    def forward(self, seq):
        b, a, c = seq.data.shape
        if c != self.cfg.d_model:
            raise ShapeError(f"attention expects {self.cfg.d_model} features, got {c}")
        heads = self.cfg.n_heads
        q = T.pack_heads(T.matmul(seq, self.wq), heads)
        k = T.pack_heads(T.matmul(seq, self.wk), heads)
        v = T.pack_heads(T.matmul(seq, self.wv), heads)
        z = T.attention(q, k, v, 1.0 / np.sqrt(self.cfg.c_k))
        merged = T.unpack_heads(z, heads)
        return T.add(T.matmul(merged, self.wo), self.bo)

    def named_params(self):
        return [
            ("attn/wq", self.wq),
            ("attn/wk", self.wk),
            ("attn/wv", self.wv),
            ("attn/wo", self.wo),
            ("attn/bo", self.bo),
        ]


def scaled_dot_attention(q_h, k_h, v_h):
    """Single-head attention: softmax(q k^T / sqrt(c_k)) applied to values.

    Accepts (A, C) tensors or (B, A, C) batched stacks.
    """
    squeeze = q_h.data.ndim == 2
    if squeeze:
        q_h = T.reshape(q_h, (1,) + q_h.data.shape)
        k_h = T.reshape(k_h, (1,) + k_h.data.shape)
        v_h = T.reshape(v_h, (1,) + v_h.data.shape)
    c_k = q_h.data.shape[-1]
    out = T.attention(q_h, k_h, v_h, 1.0 / np.sqrt(c_k))
    if squeeze:
        out = T.reshape(out, out.data.shape[1:])
    return out


def multi_head_concat(heads, wo, bo):
    """Concatenate per-head outputs in head order along the feature axis and
    apply the learned output projection."""
    joined = T.concat(list(heads), axis=-1)
    if joined.data.shape[-1] != wo.data.shape[0]:
        raise ShapeError(
            f"concatenated head width {joined.data.shape[-1]} does not match "
            f"projection input {wo.data.shape[0]}"
        )
    return T.add(T.matmul(joined, wo), bo)


class EncoderLayer:
    """Post-norm block: LayerNorm(x + MHA(x)) then LayerNorm(x + FF(x))."""

    def __init__(self, cfg, rng):
        c, d_ff = cfg.d_model, cfg.d_ff
        self.cfg = cfg
        self.mha = MultiHeadSelfAttention(cfg, rng)
        self.w1 = Tensor(kaiming_uniform(rng, (d_ff, c), c), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2 = Tensor(kaiming_uniform(rng, (c, d_ff), d_ff), requires_grad=True)
        self.b2 = Tensor(np.zeros(c), requires_grad=True)
        self.ln1_gamma = Tensor(np.ones(c), requires_grad=True)
        self.ln1_beta = Tensor(np.zeros(c), requires_grad=True)
        self.ln2_gamma = Tensor(np.ones(c), requires_grad=True)
        self.ln2_beta = Tensor(np.zeros(c), requires_grad=True)

    def forward(self, seq):
        attended = T.add(seq, self.mha.forward(seq))
        x1 = T.layer_norm(attended, self.ln1_gamma, self.ln1_beta)
        act = T.ACTIVATIONS[self.cfg.activation]
        hidden = act(T.linear(x1, self.w1, self.b1))
        ff = T.linear(hidden, self.w2, self.b2)
        return T.layer_norm(T.add(x1, ff), self.ln2_gamma, self.ln2_beta)

    def named_params(self):
        own = [
            ("ff/w1", self.w1),
            ("ff/b1", self.b1),
            ("ff/w2", self.w2),
            ("ff/b2", self.b2),
            ("norm1/gamma", self.ln1_gamma),
            ("norm1/beta", self.ln1_beta),
            ("norm2/gamma", self.ln2_gamma),
            ("norm2/beta", self.ln2_beta),
        ]
        return self.mha.named_params() + own


class TransformerEncoder:
    """Reshaper -> positional embedding -> encoder layers -> inverse reshaper.

    Built for a fixed spatial extent so learnable embeddings have a shape.
    """

    def __init__(self, cfg, height, width, rng):
        self.cfg = cfg
        self.height = height
        self.width = width
        self.seq_len = height * width
        self.pos_param = None
        self.pos_table = None
        if cfg.embedding == "learnable":
            self.pos_param = position_embedding(
                "learnable", self.seq_len, cfg.d_model, rng=rng
            )
        elif cfg.embedding == "sine":
            self.pos_table = sine_position_table(self.seq_len, cfg.d_model)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def forward(self, fmap, mode="train"):
        b, c, h, w = fmap.data.shape
        if c != self.cfg.d_model:
            raise ShapeError(
                f"encoder expects {self.cfg.d_model} channels, got {c}"
            )
        if (h, w) != (self.height, self.width):
            raise ShapeError(
                f"encoder was built for {self.height}x{self.width}, got {h}x{w}"
            )
        seq = reshape_to_sequence(fmap)
        if self.pos_param is not None:
            seq = T.add(seq, self.pos_param)
        elif self.pos_table is not None:
            seq = T.add(seq, Tensor(self.pos_table))
        for layer in self.layers:
            seq = layer.forward(seq)
        return reshape_to_spatial(seq, h, w)

    def named_params(self):
        out = []
        if self.pos_param is not None:
            out.append(("pos_embedding", self.pos_param))
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}/{n}", t) for n, t in layer.named_params())
        return out

    def named_buffers(self):
        if self.pos_table is not None:
            return [("pos_sine", self.pos_table)]
        return []
