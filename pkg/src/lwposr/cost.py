"""Analytical parameter and multiply-accumulate accounting.

MAC counts are per input image (batch of one) with the stride-1,
same-padding convention, so a convolution's output map equals its input
map F_m x F_n.  Multiplies only: biases and normalizations contribute no
MACs and are reported as element-operation counts instead, which keeps the
depthwise-separable versus dense-convolution ratio exactly
1/C_o + 1/F_k^2 in rational arithmetic.

Attention MACs decompose into the Q/K/V projections, the query-key
products, the application of the attention weights to the values, and the
output projection.
"""

from dataclasses import dataclass, field, fields
from fractions import Fraction


@dataclass
class LayerSpec:
    """Dimensions of one layer, as needed by its kind.

    kinds: conv | depthwise | pointwise | dsc | linear | attention | norm |
    pool | embedding ('embedding' covers the learnable positional table,
    which carries parameters but no MACs).
    """

    path: str
    kind: str
    f_k: int = 0
    c_in: int = 0
    c_out: int = 0
    f_m: int = 0
    f_n: int = 0
    d_in: int = 0
    d_out: int = 0
    rows: int = 1  # row count a linear layer is applied to (sequence length)
    a: int = 0
    heads: int = 0
    c_k: int = 0
    c_v: int = 0
    channels: int = 0
    has_bias: bool = False
    elems: int = 0
    fusion_scalars: int = 0

    def _need(self, *names):
        missing = [n for n in names if getattr(self, n) <= 0]
        if missing:
            raise ValueError(
                f"layer {self.path!r} of kind {self.kind!r} is missing "
                f"{', '.join(missing)}"
            )


def cost_conv(spec):
    """Dense convolution MACs: F_k^2 * C_in * C_o * F_m * F_n."""
    spec._need("f_k", "c_in", "c_out", "f_m", "f_n")
    return spec.f_k * spec.f_k * spec.c_in * spec.c_out * spec.f_m * spec.f_n


def cost_depthwise(spec):
    """Depthwise convolution MACs: F_k^2 * C_in * F_m * F_n."""
    spec._need("f_k", "c_in", "f_m", "f_n")
    return spec.f_k * spec.f_k * spec.c_in * spec.f_m * spec.f_n


def cost_pointwise(spec):
    spec._need("c_in", "c_out", "f_m", "f_n")
    return spec.c_in * spec.c_out * spec.f_m * spec.f_n


def cost_dsc(spec):
    """Depthwise + pointwise MACs for one separable block."""
    spec._need("f_k", "c_in", "c_out", "f_m", "f_n")
    return cost_depthwise(spec) + cost_pointwise(spec)


def cost_ratio(f_k, c_out):
    """Exact separable/dense cost ratio: 1/C_o + 1/F_k^2."""
    if f_k <= 0 or c_out <= 0:
        raise ValueError("cost_ratio needs positive kernel size and channel count")
    return Fraction(1, c_out) + Fraction(1, f_k * f_k)


def cost_linear(spec):
    spec._need("d_in", "d_out")
    return spec.rows * spec.d_in * spec.d_out


def cost_attention(spec):
    """QKV projections + q k^T + weights*v + output projection."""
    spec._need("a", "c_in", "heads", "c_k", "c_v")
    a, c = spec.a, spec.c_in
    qkv = a * c * spec.heads * (2 * spec.c_k + spec.c_v)
    scores = spec.heads * a * a * spec.c_k
    apply_v = spec.heads * a * a * spec.c_v
    out_proj = a * c * c
    return qkv + scores + apply_v + out_proj


def macs_of(spec):
    kind = spec.kind
    if kind == "conv":
        return cost_conv(spec)
    if kind == "depthwise":
        return cost_depthwise(spec)
    if kind == "pointwise":
        return cost_pointwise(spec)
    if kind == "dsc":
        return cost_dsc(spec)
    if kind == "linear":
        if spec.fusion_scalars:
            return 3 * spec.fusion_scalars
        return cost_linear(spec)
    if kind == "attention":
        return cost_attention(spec)
    if kind in ("norm", "pool", "embedding"):
        return 0
    raise ValueError(f"unrecognized layer kind {kind!r}")


def params_of(spec):
    kind = spec.kind
    bias = 0
    if kind == "conv":
        base = spec.f_k * spec.f_k * spec.c_in * spec.c_out
        bias = spec.c_out if spec.has_bias else 0
    elif kind == "depthwise":
        base = spec.f_k * spec.f_k * spec.c_in
    elif kind == "pointwise":
        base = spec.c_in * spec.c_out
        bias = spec.c_out if spec.has_bias else 0
    elif kind == "dsc":
        base = spec.f_k * spec.f_k * spec.c_in + spec.c_in * spec.c_out
    elif kind == "linear":
        if spec.fusion_scalars:
            return spec.fusion_scalars
        base = spec.d_in * spec.d_out
        bias = spec.d_out if spec.has_bias else 0
    elif kind == "attention":
        c = spec.c_in
        base = spec.heads * c * (2 * spec.c_k + spec.c_v) + c * c
        bias = c  # output projection bias
    elif kind == "norm":
        base = 2 * spec.channels
    elif kind == "pool":
        base = 0
    elif kind == "embedding":
        base = spec.a * spec.c_out
    else:
        raise ValueError(f"unrecognized layer kind {kind!r}")
    return base + bias


def elem_ops_of(spec):
    """Element operations for zero-MAC layers (normalizations, pooling,
    softmax inside attention); activations are folded into their block."""
    if spec.kind == "pool":
        return spec.c_in * spec.f_m * spec.f_n
    if spec.kind == "norm":
        return spec.elems
    if spec.kind == "attention":
        return spec.heads * spec.a * spec.a  # softmax entries
    if spec.kind == "dsc":
        return spec.c_out * spec.f_m * spec.f_n  # activation elements
    return spec.elems


@dataclass
class CostRow:
    path: str
    kind: str
    params: int
    macs: int
    elem_ops: int
    savings_ratio: Fraction = None  # dsc cost over hypothetical dense conv


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    per_stream: dict = field(default_factory=dict)
    per_stage: dict = field(default_factory=dict)

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def total_elem_ops(self):
        return sum(r.elem_ops for r in self.rows)

    def format_text(self):
        lines = [
            f"{'path':<44s} {'kind':<10s} {'params':>9s} {'macs':>12s} "
            f"{'elem_ops':>9s} {'dsc/conv':>9s}"
        ]
        for r in self.rows:
            ratio = f"{float(r.savings_ratio):.4f}" if r.savings_ratio else ""
            lines.append(
                f"{r.path:<44s} {r.kind:<10s} {r.params:>9d} {r.macs:>12d} "
                f"{r.elem_ops:>9d} {ratio:>9s}"
            )
        lines.append("-" * 98)
        for key in sorted(self.per_stream):
            p, m = self.per_stream[key]
            lines.append(f"[group] {key:<36s} {'':<10s} {p:>9d} {m:>12d}")
        for key in sorted(self.per_stage):
            p, m = self.per_stage[key]
            lines.append(f"[stage] {key:<36s} {'':<10s} {p:>9d} {m:>12d}")
        lines.append(
            f"{'total':<44s} {'':<10s} {self.total_params:>9d} "
            f"{self.total_macs:>12d} {self.total_elem_ops:>9d}"
        )
        return lines

    def format_csv(self):
        lines = ["path,kind,params,macs,elem_ops"]
        for r in self.rows:
            lines.append(f"{r.path},{r.kind},{r.params},{r.macs},{r.elem_ops}")
        return lines


_SPEC_FIELDS = {f.name for f in fields(LayerSpec)}


def specs_from_layout(layout):
    specs = []
    for entry in layout:
        known = {k: v for k, v in entry.items() if k in _SPEC_FIELDS}
        specs.append(LayerSpec(**known))
    return specs


def audit_model(model):
    """Cost report over every layer of a built model, grouped by path."""
    report = CostReport()
    for spec in specs_from_layout(model.layout()):
        ratio = None
        if spec.kind == "dsc":
            ratio = cost_ratio(spec.f_k, spec.c_out)
        row = CostRow(
            path=spec.path,
            kind=spec.kind,
            params=params_of(spec),
            macs=macs_of(spec),
            elem_ops=elem_ops_of(spec),
            savings_ratio=ratio,
        )
        report.rows.append(row)
        top = spec.path.split("/", 1)[0]
        group = top if top.startswith("stream") else (
            "taps" if top.startswith("tap") else top
        )
        p, m = report.per_stream.get(group, (0, 0))
        report.per_stream[group] = (p + row.params, m + row.macs)
        for part in spec.path.split("/"):
            if part.startswith("stage") or part.startswith("tap"):
                key = part if part.startswith("stage") else f"stage{part[3:]}"
                p, m = report.per_stage.get(key, (0, 0))
                report.per_stage[key] = (p + row.params, m + row.macs)
                break
    return report
