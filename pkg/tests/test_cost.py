"""Analytical cost formulas, instrumented kernel cross-checks, model audit."""

from fractions import Fraction

import numpy as np
import pytest

from lwposr import tensor as T
from lwposr.cost import (
    LayerSpec,
    audit_model,
    cost_attention,
    cost_conv,
    cost_depthwise,
    cost_dsc,
    cost_linear,
    cost_pointwise,
    cost_ratio,
    macs_of,
    params_of,
)
from lwposr.encoder import EncoderConfig, MultiHeadSelfAttention
from lwposr.model import LwPosrConfig, build_lwposr, count_parameters
from lwposr.tensor import Tensor, count_macs


def conv_spec(f_k=3, c_in=16, c_out=32, f_m=32, f_n=32, kind="conv"):
    return LayerSpec(path="t", kind=kind, f_k=f_k, c_in=c_in, c_out=c_out, f_m=f_m, f_n=f_n)


class TestCostFormulas:
    def test_conv_product(self):
        assert cost_conv(conv_spec()) == 4_718_592

    def test_conv_1x1_reduces_to_pointwise(self):
        s = conv_spec(f_k=1)
        assert cost_conv(s) == 16 * 32 * 32 * 32 == cost_pointwise(s)

    def test_depthwise_product(self):
        assert cost_depthwise(conv_spec()) == 147_456

    def test_depthwise_1x1(self):
        assert cost_depthwise(conv_spec(f_k=1)) == 16 * 32 * 32

    def test_dsc_sum(self):
        assert cost_dsc(conv_spec()) == 147_456 + 524_288 == 671_744

    def test_dsc_is_depthwise_plus_pointwise(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            s = conv_spec(
                f_k=int(rng.choice([1, 3, 5])),
                c_in=int(rng.integers(1, 64)),
                c_out=int(rng.integers(1, 64)),
                f_m=int(rng.integers(1, 40)),
                f_n=int(rng.integers(1, 40)),
            )
            assert cost_dsc(s) == cost_depthwise(s) + cost_pointwise(s)

    def test_missing_field_rejected(self):
        with pytest.raises(ValueError):
            cost_conv(LayerSpec(path="t", kind="conv", f_k=3, c_in=4))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            macs_of(LayerSpec(path="t", kind="bogus"))
        with pytest.raises(ValueError):
            params_of(LayerSpec(path="t", kind="bogus"))


class TestCostRatio:
    def test_default_block_value(self):
        r = cost_ratio(3, 32)
        assert r == Fraction(1, 32) + Fraction(1, 9)
        assert abs(float(r) - 0.1423611) < 1e-7

    def test_degenerate_case(self):
        assert float(cost_ratio(1, 1)) == 2.0

    def test_zero_arguments_rejected(self):
        with pytest.raises(ValueError):
            cost_ratio(0, 32)
        with pytest.raises(ValueError):
            cost_ratio(3, 0)

    def test_ratio_equals_cost_quotient_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            f_k = int(rng.choice([1, 3, 5, 7]))
            c_out = int(rng.integers(1, 512))
            s = conv_spec(
                f_k=f_k,
                c_in=int(rng.integers(1, 128)),
                c_out=c_out,
                f_m=int(rng.integers(1, 64)),
                f_n=int(rng.integers(1, 64)),
            )
            assert Fraction(cost_dsc(s), cost_conv(s)) == cost_ratio(f_k, c_out)


class TestInstrumentedKernels:
    def test_conv_standard_multiply_count(self):
        rng = np.random.default_rng(2)
        for f_k, c_in, c_out, size in [(3, 4, 8, 10), (1, 3, 5, 7), (5, 2, 3, 9)]:
            x = Tensor(rng.standard_normal((1, c_in, size, size)))
            w = Tensor(rng.standard_normal((c_out, c_in, f_k, f_k)))
            with count_macs() as mc:
                T.conv2d_standard(x, w, stride=1, padding=(f_k - 1) // 2)
            assert mc.macs == cost_conv(conv_spec(f_k, c_in, c_out, size, size))

    def test_depthwise_multiply_count(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 6, 12, 12)))
        w = Tensor(rng.standard_normal((6, 3, 3)))
        with count_macs() as mc:
            T.conv2d_depthwise(x, w, stride=1, padding=1)
        assert mc.macs == cost_depthwise(conv_spec(3, 6, 0, 12, 12, kind="depthwise"))

    def test_pointwise_multiply_count(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 5, 9, 9)))
        w = Tensor(rng.standard_normal((7, 5)))
        with count_macs() as mc:
            T.conv2d_pointwise(x, w)
        s = conv_spec(1, 5, 7, 9, 9, kind="pointwise")
        assert mc.macs == cost_pointwise(s)

    def test_linear_multiply_count(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((11, 13)))
        w = Tensor(rng.standard_normal((3, 13)))
        with count_macs() as mc:
            T.linear(x, w, Tensor(np.zeros(3)))
        assert mc.macs == cost_linear(
            LayerSpec(path="t", kind="linear", d_in=13, d_out=3, rows=11)
        )

    def test_attention_block_multiply_count(self):
        cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, embedding="none")
        mha = MultiHeadSelfAttention(cfg, np.random.default_rng(6))
        seq = Tensor(np.random.default_rng(7).standard_normal((1, 10, 8)))
        with count_macs() as mc:
            mha.forward(seq)
        spec = LayerSpec(
            path="t", kind="attention", a=10, c_in=8, heads=2, c_k=4, c_v=4
        )
        assert mc.macs == cost_attention(spec)

    def test_batched_convolutions_scale_counter_by_batch(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)))
        w = Tensor(rng.standard_normal((3, 3, 3)))
        with count_macs() as mc:
            T.conv2d_depthwise(x, w, stride=1, padding=1)
        assert mc.macs == 4 * cost_depthwise(conv_spec(3, 3, 0, 8, 8))


class TestAuditModel:
    def test_params_match_counted_parameters(self):
        for cfg in (
            LwPosrConfig(),
            LwPosrConfig(encoder=EncoderConfig(embedding="learnable")),
            LwPosrConfig(fusion_weights="learnable"),
            LwPosrConfig(
                n_stages=4,
                stage_channels=((16, 32), (32,), (32,), (32,)),
                fusion_weights=(0.25,) * 4,
            ),
        ):
            model = build_lwposr(cfg, seed=0)
            assert audit_model(model).total_params == count_parameters(model).total_trainable

    def test_full_forward_instrumented_macs_match_report(self):
        model = build_lwposr(LwPosrConfig(), seed=1)
        report = audit_model(model)
        x = Tensor(np.random.default_rng(9).uniform(0, 1, (1, 3, 64, 64)))
        with count_macs() as mc:
            model.forward(x, mode="eval")
        assert mc.macs == report.total_macs

    def test_dsc_rows_report_exact_ratio(self):
        report = audit_model(build_lwposr(LwPosrConfig(), seed=2))
        dsc_rows = [r for r in report.rows if r.kind == "dsc"]
        assert len(dsc_rows) == 14
        for r in dsc_rows:
            assert r.savings_ratio is not None
            c_out = r.path  # ratio checked against the row's own dimensions
        trunk_rows = [r for r in dsc_rows if "stage1/dsc1" not in r.path]
        for r in trunk_rows:
            assert r.savings_ratio == cost_ratio(3, 32)

    def test_doubling_input_size_quadruples_conv_macs_only_head_params_change(self):
        small = audit_model(build_lwposr(LwPosrConfig(input_size=64), seed=3))
        big = audit_model(build_lwposr(LwPosrConfig(input_size=128), seed=3))
        small_rows = {r.path: r for r in small.rows}
        big_rows = {r.path: r for r in big.rows}
        assert set(small_rows) == set(big_rows)
        for path, s_row in small_rows.items():
            b_row = big_rows[path]
            if s_row.kind in ("conv", "depthwise", "pointwise", "dsc"):
                assert b_row.macs == 4 * s_row.macs, path
            if "tap" in path and s_row.kind == "linear":
                assert b_row.params != s_row.params
            else:
                assert b_row.params == s_row.params, path

    def test_grouped_totals_are_additive(self):
        report = audit_model(build_lwposr(LwPosrConfig(), seed=4))
        assert sum(p for p, _ in report.per_stream.values()) == report.total_params
        assert sum(m for _, m in report.per_stream.values()) == report.total_macs

    def test_formats(self):
        report = audit_model(build_lwposr(LwPosrConfig(), seed=5))
        text = report.format_text()
        assert any("total" in line for line in text)
        csv = report.format_csv()
        assert csv[0] == "path,kind,params,macs,elem_ops"
        assert len(csv) == len(report.rows) + 1
