"""Two-stream, multi-stage pose regression network.

Each stream stacks depthwise-separable conv blocks (depthwise 3x3 ->
pointwise -> batch norm -> activation) with pooling and transformer
encoders; stream 1 uses relu/avg-pool, stream 2 tanh/max-pool.  At every
stage the two streams are fused by element-wise multiplication, squeezed by
a 1x1 conv, flattened, and regressed to (yaw, pitch, roll); the final output
is the weighted mean of the per-stage predictions.
"""

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, TransformerEncoder, kaiming_uniform
from .tensor import (
    BatchNormState,
    LwposrError,
    ParamTensor,
    ShapeError,
    Tensor,
)


class CheckpointError(LwposrError):
    """Corrupt, truncated, or otherwise unreadable checkpoint file."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint config does not match the expected model config."""


@dataclass(frozen=True)
class PoseTriple:
    """Yaw, pitch, roll in degrees."""

    yaw: float
    pitch: float
    roll: float

    def as_array(self):
        return np.array([self.yaw, self.pitch, self.roll])

    @classmethod
    def from_array(cls, arr):
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))


DEFAULT_FUSION = (0.5 / 3.0, 0.5 / 3.0, 2.0 / 3.0)


@dataclass
class LwPosrConfig:
    """Every architecture and ablation knob of the pose network."""

    input_size: int = 64
    n_stages: int = 3
    # per-stage conv widths; the first stage lists (stem, trunk) widths
    stage_channels: tuple = ((16, 32), (32,), (32,))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion_weights: object = DEFAULT_FUSION  # tuple of floats or "learnable"
    head_channels: int = 16
    stream1_activation: str = "relu"
    stream2_activation: str = "tanh"
    stream1_pool: str = "avg"
    stream2_pool: str = "max"

    def __post_init__(self):
        if self.n_stages not in (3, 4):
            raise ValueError(f"n_stages must be 3 or 4, got {self.n_stages}")
        if self.input_size % 8 != 0:
            raise ValueError(
                f"input_size must be divisible by 8, got {self.input_size}"
            )
        self.stage_channels = tuple(tuple(c) for c in self.stage_channels)
        if len(self.stage_channels) != self.n_stages:
            raise ValueError(
                f"stage_channels lists {len(self.stage_channels)} stages, "
                f"config says {self.n_stages}"
            )
        if len(self.stage_channels[0]) != 2:
            raise ValueError("the first stage needs (stem, trunk) widths")
        if any(len(c) != 1 for c in self.stage_channels[1:]):
            raise ValueError("stages after the first take a single width")
        widths = {c[-1] for c in self.stage_channels}
        if len(widths) != 1:
            raise ValueError(
                "all stage output widths must match so stage fusions share shapes"
            )
        trunk = self.stage_channels[0][-1]
        if self.encoder.d_model != trunk:
            raise ValueError(
                f"encoder d_model {self.encoder.d_model} must equal the stage "
                f"channel width {trunk}"
            )
        if self.fusion_weights != "learnable":
            self.fusion_weights = tuple(float(a) for a in self.fusion_weights)
            if len(self.fusion_weights) != self.n_stages:
                raise ValueError(
                    f"{len(self.fusion_weights)} fusion weights for "
                    f"{self.n_stages} stages"
                )
            if abs(sum(self.fusion_weights) - 1.0) > 1e-9:
                raise ValueError("fixed fusion weights must sum to 1")
        for act in (self.stream1_activation, self.stream2_activation):
            if act not in T.ACTIVATIONS:
                raise ValueError(f"unknown stream activation {act!r}")
        for pool in (self.stream1_pool, self.stream2_pool):
            if pool not in ("avg", "max"):
                raise ValueError(f"unknown pooling kind {pool!r}")

    def to_dict(self):
        d = {
            "input_size": self.input_size,
            "n_stages": self.n_stages,
            "stage_channels": [list(c) for c in self.stage_channels],
            "encoder": {
                "d_model": self.encoder.d_model,
                "n_heads": self.encoder.n_heads,
                "n_layers": self.encoder.n_layers,
                "d_ff": self.encoder.d_ff,
                "activation": self.encoder.activation,
                "embedding": self.encoder.embedding,
            },
            "fusion_weights": (
                "learnable"
                if self.fusion_weights == "learnable"
                else list(self.fusion_weights)
            ),
            "head_channels": self.head_channels,
            "stream1_activation": self.stream1_activation,
            "stream2_activation": self.stream2_activation,
            "stream1_pool": self.stream1_pool,
            "stream2_pool": self.stream2_pool,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["stage_channels"] = tuple(tuple(c) for c in d["stage_channels"])
        if d["fusion_weights"] != "learnable":
            d["fusion_weights"] = tuple(d["fusion_weights"])
        return cls(**d)


class _DscBlock:
    """depthwise(3x3) -> pointwise -> batch norm -> activation, no conv biases."""

    def __init__(self, c_in, c_out, activation, rng):
        self.c_in = c_in
        self.c_out = c_out
        self.activation = activation
        self.dw = Tensor(kaiming_uniform(rng, (c_in, 3, 3), 9), requires_grad=True)
        self.pw = Tensor(kaiming_uniform(rng, (c_out, c_in), c_in), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out), requires_grad=True)
        self.state = BatchNormState(c_out, initialized=True)

    def forward(self, x, mode):
        t = T.conv2d_depthwise(x, self.dw, stride=1, padding=1)
        t = T.conv2d_pointwise(t, self.pw)
        t = T.batch_norm(t, self.gamma, self.beta, self.state, mode)
        return T.ACTIVATIONS[self.activation](t)

    def named_params(self):
        return [
            ("depthwise/weight", self.dw),
            ("pointwise/weight", self.pw),
            ("bn/gamma", self.gamma),
            ("bn/beta", self.beta),
        ]

    def named_buffers(self):
        return [
            ("bn/running_mean", self.state.running_mean),
            ("bn/running_var", self.state.running_var),
            ("bn/initialized", np.array([1.0 if self.state.initialized else 0.0])),
        ]

    def load_buffers(self, values):
        self.state.running_mean = values["bn/running_mean"].copy()
        self.state.running_var = values["bn/running_var"].copy()
        self.state.initialized = bool(values["bn/initialized"][0])


class _PoolLayer:
    def __init__(self, kind):
        self.kind = kind

    def forward(self, x, mode):
        return T.pool2d(x, self.kind)

    def named_params(self):
        return []

    def named_buffers(self):
        return []

    def load_buffers(self, values):
        pass


class _EncoderLayerWrap:
    def __init__(self, cfg, height, width, rng):
        self.encoder = TransformerEncoder(cfg, height, width, rng)

    def forward(self, x, mode):
        return self.encoder.forward(x, mode)

    def named_params(self):
        return self.encoder.named_params()

    def named_buffers(self):
        return self.encoder.named_buffers()

    def load_buffers(self, values):
        if "pos_sine" in values and self.encoder.pos_table is not None:
            self.encoder.pos_table = values["pos_sine"].copy()


class _PredictionHead:
    """1x1 conv (with bias) -> optional avg pool -> flatten -> linear(3)."""

    def __init__(self, c_in, c_mid, flat_len, pool_after, rng):
        self.c_in = c_in
        self.c_mid = c_mid
        self.flat_len = flat_len
        self.pool_after = pool_after
        self.conv_w = Tensor(kaiming_uniform(rng, (c_mid, c_in), c_in), requires_grad=True)
        self.conv_b = Tensor(np.zeros(c_mid), requires_grad=True)
        self.fc_w = Tensor(kaiming_uniform(rng, (3, flat_len), flat_len), requires_grad=True)
        self.fc_b = Tensor(np.zeros(3), requires_grad=True)

    def forward(self, mixed):
        t = T.bias_channels(T.conv2d_pointwise(mixed, self.conv_w), self.conv_b)
        if self.pool_after:
            t = T.pool2d(t, "avg")
        flat = T.reshape(t, (t.data.shape[0], self.flat_len))
        return T.linear(flat, self.fc_w, self.fc_b)

    def named_params(self):
        return [
            ("conv/weight", self.conv_w),
            ("conv/bias", self.conv_b),
            ("fc/weight", self.fc_w),
            ("fc/bias", self.fc_b),
        ]

    def named_buffers(self):
        return []

    def load_buffers(self, values):
        pass


def fuse_predictions(preds, weights):
    """Weighted sum of per-stage predictions.

    preds: list of (B, 3) tensors (or PoseTriple instances); weights: floats
    or scalar tensors of matching length.
    """
    if len(preds) != len(weights):
        raise ShapeError(
            f"{len(preds)} predictions but {len(weights)} fusion weights"
        )
    triples = all(isinstance(p, PoseTriple) for p in preds)
    if triples:
        preds = [Tensor(p.as_array().reshape(1, 3)) for p in preds]
    total = None
    for p, a in zip(preds, weights):
        a_t = a if isinstance(a, Tensor) else Tensor(np.asarray(float(a)))
        term = T.mul(p, a_t)
        total = term if total is None else T.add(total, term)
    if triples:
        return PoseTriple.from_array(total.data[0])
    return total


class LwPosr:
    """The assembled network; build with build_lwposr."""

    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.streams = []
        self.layout_entries = []
        stream_specs = [
            (cfg.stream1_activation, cfg.stream1_pool),
            (cfg.stream2_activation, cfg.stream2_pool),
        ]
        stage_extents = None
        for s_idx, (act, pool) in enumerate(stream_specs, start=1):
            stages, extents = self._build_stream(s_idx, act, pool, rng)
            self.streams.append(stages)
            if stage_extents is None:
                stage_extents = extents
        self.stage_extents = stage_extents  # (h, w) of each stage output

        trunk = cfg.stage_channels[0][-1]
        self.heads = []
        flat_lens = set()
        for q, (h, w) in enumerate(stage_extents, start=1):
            pool_after = q == 1
            hh, ww = (h // 2, w // 2) if pool_after else (h, w)
            flat_len = cfg.head_channels * hh * ww
            flat_lens.add(flat_len)
            head = _PredictionHead(trunk, cfg.head_channels, flat_len, pool_after, rng)
            self.heads.append(head)
            self.layout_entries.append(
                {
                    "path": f"tap{q}/conv",
                    "kind": "pointwise",
                    "c_in": trunk,
                    "c_out": cfg.head_channels,
                    "f_m": h,
                    "f_n": w,
                    "has_bias": True,
                }
            )
            if pool_after:
                self.layout_entries.append(
                    {
                        "path": f"tap{q}/pool",
                        "kind": "pool",
                        "c_in": cfg.head_channels,
                        "f_m": h,
                        "f_n": w,
                    }
                )
            self.layout_entries.append(
                {
                    "path": f"tap{q}/fc",
                    "kind": "linear",
                    "d_in": flat_len,
                    "d_out": 3,
                    "has_bias": True,
                }
            )
        if len(flat_lens) != 1:
            raise LwposrError(
                f"stage head inputs disagree in length: {sorted(flat_lens)}"
            )
        self.head_flat_len = flat_lens.pop()

        if cfg.fusion_weights == "learnable":
            init = 1.0 / cfg.n_stages
            self.fusion_alphas = [
                Tensor(np.asarray(init), requires_grad=True)
                for _ in range(cfg.n_stages)
            ]
            self.layout_entries.append(
                {
                    "path": "fusion",
                    "kind": "linear",
                    "d_in": cfg.n_stages,
                    "d_out": 3,
                    "fusion_scalars": cfg.n_stages,
                }
            )
        else:
            self.fusion_alphas = None

        self._params = self.named_params()
        names = [n for n, _ in self._params]
        if len(names) != len(set(names)):
            raise LwposrError("duplicate parameter names in model")

    # -- construction ------------------------------------------------------

    def _build_stream(self, s_idx, activation, pool, rng):
        cfg = self.cfg
        h = w = cfg.input_size
        c_prev = 3
        stages = []
        extents = []
        for q in range(1, cfg.n_stages + 1):
            layers = []
            prefix = f"stream{s_idx}/stage{q}"

            def add_dsc(tag, c_in, c_out):
                layers.append((tag, _DscBlock(c_in, c_out, activation, rng)))
                self.layout_entries.append(
                    {
                        "path": f"{prefix}/{tag}",
                        "kind": "dsc",
                        "f_k": 3,
                        "c_in": c_in,
                        "c_out": c_out,
                        "f_m": h,
                        "f_n": w,
                        "activation": activation,
                    }
                )
                self.layout_entries.append(
                    {
                        "path": f"{prefix}/{tag}/bn",
                        "kind": "norm",
                        "channels": c_out,
                        "elems": c_out * h * w,
                    }
                )

            def add_pool(tag):
                nonlocal h, w
                layers.append((tag, _PoolLayer(pool)))
                self.layout_entries.append(
                    {
                        "path": f"{prefix}/{tag}",
                        "kind": "pool",
                        "c_in": layers[-2][1].c_out if hasattr(layers[-2][1], "c_out") else 0,
                        "f_m": h,
                        "f_n": w,
                    }
                )
                h //= 2
                w //= 2

            if q == 1:
                stem, trunk = cfg.stage_channels[0]
                add_dsc("dsc1", c_prev, stem)
                add_pool("pool1")
                add_dsc("dsc2", stem, trunk)
                add_dsc("dsc3", trunk, trunk)
                add_pool("pool2")
                c_prev = trunk
            else:
                width = cfg.stage_channels[q - 1][0]
                add_dsc("dsc1", c_prev, width)
                add_dsc("dsc2", width, width)
                layers.append(("enc", _EncoderLayerWrap(cfg.encoder, h, w, rng)))
                self._add_encoder_layout(prefix, h, w)
                c_prev = width
                if q == 2:
                    add_pool("pool1")
            stages.append(layers)
            extents.append((h, w))
        return stages, extents

    def _add_encoder_layout(self, prefix, h, w):
        enc = self.cfg.encoder
        a = h * w
        if enc.embedding == "learnable":
            self.layout_entries.append(
                {
                    "path": f"{prefix}/enc/pos_embedding",
                    "kind": "embedding",
                    "a": a,
                    "c_out": enc.d_model,
                }
            )
        for i in range(enc.n_layers):
            base = f"{prefix}/enc/layer{i}"
            self.layout_entries.append(
                {
                    "path": f"{base}/attn",
                    "kind": "attention",
                    "a": a,
                    "c_in": enc.d_model,
                    "heads": enc.n_heads,
                    "c_k": enc.c_k,
                    "c_v": enc.c_v,
                }
            )
            self.layout_entries.append(
                {
                    "path": f"{base}/norm1",
                    "kind": "norm",
                    "channels": enc.d_model,
                    "elems": a * enc.d_model,
                }
            )
            self.layout_entries.append(
                {
                    "path": f"{base}/ff/w1",
                    "kind": "linear",
                    "d_in": enc.d_model,
                    "d_out": enc.d_ff,
                    "rows": a,
                    "has_bias": True,
                }
            )
            self.layout_entries.append(
                {
                    "path": f"{base}/ff/w2",
                    "kind": "linear",
                    "d_in": enc.d_ff,
                    "d_out": enc.d_model,
                    "rows": a,
                    "has_bias": True,
                }
            )
            self.layout_entries.append(
                {
                    "path": f"{base}/norm2",
                    "kind": "norm",
                    "channels": enc.d_model,
                    "elems": a * enc.d_model,
                }
            )

    # -- inference -----------------------------------------------------------

    def forward(self, images, mode="train"):
        """Run the network; returns (per-stage predictions, fused prediction).

        images: (B, 3, S, S) tensor with values in [0, 1].
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        b, c, h, w = images.data.shape
        if c != 3 or h != self.cfg.input_size or w != self.cfg.input_size:
            raise ShapeError(
                f"expected (B, 3, {self.cfg.input_size}, {self.cfg.input_size}) "
                f"input, got {images.data.shape}"
            )
        s1 = s2 = images
        preds = []
        for q in range(self.cfg.n_stages):
            for tag, layer in self.streams[0][q]:
                s1 = layer.forward(s1, mode)
                s1.assert_finite(f"stream1/stage{q + 1}/{tag}")
            for tag, layer in self.streams[1][q]:
                s2 = layer.forward(s2, mode)
                s2.assert_finite(f"stream2/stage{q + 1}/{tag}")
            mixed = T.mul(s1, s2)
            pred = self.heads[q].forward(mixed)
            pred.assert_finite(f"tap{q + 1}")
            preds.append(pred)
        weights = (
            self.fusion_alphas
            if self.fusion_alphas is not None
            else self.cfg.fusion_weights
        )
        fused = fuse_predictions(preds, weights)
        return preds, fused

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self):
        out = []
        for s_idx, stages in enumerate(self.streams, start=1):
            for q, layers in enumerate(stages, start=1):
                for tag, layer in layers:
                    prefix = f"stream{s_idx}/stage{q}/{tag}"
                    out.extend((f"{prefix}/{n}", t) for n, t in layer.named_params())
        for q, head in enumerate(self.heads, start=1):
            out.extend((f"tap{q}/{n}", t) for n, t in head.named_params())
        if self.fusion_alphas is not None:
            out.extend(
                (f"fusion/alpha{q + 1}", t)
                for q, t in enumerate(self.fusion_alphas)
            )
        return out

    def parameters(self):
        return [ParamTensor(n, t) for n, t in self._params]

    def zero_grad(self):
        for _, t in self._params:
            t.zero_grad()

    def named_buffers(self):
        out = []
        for s_idx, stages in enumerate(self.streams, start=1):
            for q, layers in enumerate(stages, start=1):
                for tag, layer in layers:
                    prefix = f"stream{s_idx}/stage{q}/{tag}"
                    out.extend((f"{prefix}/{n}", a) for n, a in layer.named_buffers())
        return out

    def _walk_layers(self):
        for s_idx, stages in enumerate(self.streams, start=1):
            for q, layers in enumerate(stages, start=1):
                for tag, layer in layers:
                    yield f"stream{s_idx}/stage{q}/{tag}", layer

    def load_buffers(self, values):
        for prefix, layer in self._walk_layers():
            local = {
                name[len(prefix) + 1 :]: arr
                for name, arr in values.items()
                if name.startswith(prefix + "/")
            }
            if local:
                layer.load_buffers(local)

    def layout(self):
        return list(self.layout_entries)


def build_lwposr(cfg, seed):
    """Deterministically initialize the network from a seed."""
    return LwPosr(cfg, seed)


def forward(model, images, mode="train"):
    return model.forward(images, mode)


# -- parameter audit ---------------------------------------------------------


_STAGE_RE = re.compile(r"(?:stage|tap)(\d+)")


@dataclass
class ParamAudit:
    rows: list  # (name, count)
    per_stream: dict
    per_stage: dict
    total_trainable: int
    non_trainable_rows: list  # (name, count)
    total_non_trainable: int

    def format_lines(self):
        lines = [f"{'parameter':<56s} {'count':>10s}"]
        for name, count in self.rows:
            lines.append(f"{name:<56s} {count:>10d}")
        lines.append("-" * 67)
        for key in sorted(self.per_stream):
            lines.append(f"{'[stream] ' + key:<56s} {self.per_stream[key]:>10d}")
        for key in sorted(self.per_stage):
            lines.append(f"{'[stage] ' + key:<56s} {self.per_stage[key]:>10d}")
        lines.append(f"{'total trainable':<56s} {self.total_trainable:>10d}")
        lines.append(
            f"{'total non-trainable (norm state, fixed tables)':<56s} "
            f"{self.total_non_trainable:>10d}"
        )
        return lines


def count_parameters(model):
    """Audit of trainable parameter counts grouped by path components."""
    rows = []
    per_stream = {}
    per_stage = {}
    for name, t in model.named_params():
        count = t.data.size
        rows.append((name, count))
        top = name.split("/", 1)[0]
        stream_key = top if top.startswith("stream") else (
            "taps" if top.startswith("tap") else top
        )
        per_stream[stream_key] = per_stream.get(stream_key, 0) + count
        m = _STAGE_RE.search(name)
        if m:
            key = f"stage{m.group(1)}"
            per_stage[key] = per_stage.get(key, 0) + count
    non_trainable = [(n, a.size) for n, a in model.named_buffers()]
    return ParamAudit(
        rows=rows,
        per_stream=per_stream,
        per_stage=per_stage,
        total_trainable=sum(c for _, c in rows),
        non_trainable_rows=non_trainable,
        total_non_trainable=sum(c for _, c in non_trainable),
    )


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"LWPOSR\x00\x01"
_VERSION = 1


def save_checkpoint(model, path):
    """Binary checkpoint: magic, version, config JSON, manifest, float64
    payload, trailing sha256 of everything before it."""
    config_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    entries = []
    payload = bytearray()
    for name, t in model.named_params():
        arr = np.ascontiguousarray(t.data)
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": len(payload), "kind": "param"}
        )
        payload.extend(arr.astype("<f8").tobytes())
    for name, arr in model.named_buffers():
        arr = np.ascontiguousarray(arr)
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": len(payload), "kind": "buffer"}
        )
        payload.extend(arr.astype("<f8").tobytes())
    manifest_json = json.dumps(entries, sort_keys=True).encode()

    blob = bytearray()
    blob.extend(_MAGIC)
    blob.extend(struct.pack("<I", _VERSION))
    blob.extend(struct.pack("<I", len(config_json)))
    blob.extend(config_json)
    blob.extend(struct.pack("<I", len(manifest_json)))
    blob.extend(manifest_json)
    blob.extend(struct.pack("<Q", len(payload)))
    blob.extend(payload)
    blob.extend(hashlib.sha256(bytes(blob)).digest())
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path, expected_config=None):
    """Rebuild a model from a checkpoint; verifies the whole-file checksum
    and (optionally) that the stored config matches expected_config."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(_MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint file is truncated")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("bad checkpoint magic bytes")
    digest = blob[-32:]
    if hashlib.sha256(blob[:-32]).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    config_dict = json.loads(blob[off : off + clen].decode())
    off += clen
    (mlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    manifest = json.loads(blob[off : off + mlen].decode())
    off += mlen
    (plen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    payload = blob[off : off + plen]
    if len(payload) != plen:
        raise CheckpointError("checkpoint payload is truncated")

    cfg = LwPosrConfig.from_dict(config_dict)
    if expected_config is not None and expected_config.to_dict() != config_dict:
        raise ConfigMismatchError(
            "checkpoint config does not match the requested config"
        )

    model = build_lwposr(cfg, seed=0)
    params = dict(model.named_params())
    arrays = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(shape)
        arrays[(entry["kind"], entry["name"])] = arr.astype(np.float64)

    expected_names = {("param", n) for n, _ in model.named_params()} | {
        ("buffer", n) for n, _ in model.named_buffers()
    }
    if expected_names != set(arrays):
        raise CheckpointError("checkpoint manifest does not match the model layout")

    for (kind, name), arr in arrays.items():
        if kind == "param":
            t = params[name]
            if t.data.shape != arr.shape:
                raise CheckpointError(f"shape mismatch for parameter {name}")
            t.data = arr.copy()
    model.load_buffers(
        {name: arr for (kind, name), arr in arrays.items() if kind == "buffer"}
    )
    return model
