from fractions import Fraction

import math

import pytest
from hypothesis import given, settings, strategies as st

from wideformer.arch_plan import (
    ArchSpec,
    Constants,
    Scale,
    ScalingPlan,
    ScalingStrategy,
    build_plan,
    output_rescale,
    plan_table,
    table_literals,
)


def vit(n=768):
    return ArchSpec("vision", n=n, H=4 if n % 12 else 12, T=4, n_in=768, n_out=1000)


def lm(n=1024, tied=True):
    return ArchSpec("language", n=n, H=16, T=4, n_in=64, n_out=64, weight_tying=tied)


# -- architecture validation ------------------------------------------------

@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n=30, H=4),
        dict(n=0),
        dict(T=0),
        dict(blocks=("conv",)),
        dict(activation="swish"),
    ],
)
def test_arch_rejects_bad_dimensions(kwargs):
    base = dict(modality="vision", n=32, H=4, T=3, n_in=6, n_out=3)
    base.update(kwargs)
    with pytest.raises(ValueError):
        ArchSpec(**base)


def test_weight_tying_only_for_language():
    with pytest.raises(ValueError, match="weight_tying"):
        ArchSpec("vision", n=8, H=2, T=2, n_in=4, n_out=4, weight_tying=True)


def test_depth_and_pattern_expand():
    a = ArchSpec.from_dict(dict(modality="vision", n=8, H=2, T=2, n_in=4, n_out=3, depth=3, block_pattern=["mhsa", "mlp"]))
    assert a.blocks == ("mhsa", "mlp", "mhsa")


# -- initialization -----------------------------------------------------------

def test_vit_ntk_patch_and_head_std():
    p = build_plan(vit(), "neural-tangent", Constants(C={"Patch": 1.0, "HeadW": 1.0}))
    assert math.isclose(math.sqrt(p.init_var["Patch"]), 768 ** -0.5)
    assert math.isclose(math.sqrt(p.init_var["HeadW"]), 768 ** -0.5)
    assert p.init_var["HeadB"] == 0.0


def test_maximal_update_head_std_is_inverse_width():
    p = build_plan(vit(), "maximal-update")
    assert math.isclose(math.sqrt(p.init_var["HeadW"]), 1 / 768)


def test_language_embedding_variance_by_preset():
    assert build_plan(lm(), "neural-tangent").init_var["WordEmb"] == 1.0
    assert math.isclose(build_plan(lm(), "standard").init_var["WordEmb"], 0.02 ** 2)


def test_unit_fans_give_unit_variances():
    a = ArchSpec("vision", n=1, H=1, T=1, n_in=1, n_out=1, M=1)
    ones = {g: 1.0 for g in ("Patch", "PosEmb", "Q", "K", "V", "U", "W", "X", "HeadW")}
    p = build_plan(a, "neural-tangent", Constants(C=ones))
    assert all(v == 1.0 for g, v in p.init_var.items() if g != "HeadB")


# -- learning-rate factors ----------------------------------------------------

def test_adamw_ntk_head_and_posemb_factors():
    p = build_plan(vit(), "neural-tangent")
    assert math.isclose(p.adamw_factor["HeadW"], 768 ** -1 * 1000 ** -0.5)
    assert math.isclose(p.adamw_factor["PosEmb"], 768 ** -0.5)


def test_hybrid_bulk_factor_power():
    p = build_plan(vit(), ScalingStrategy("hybrid", ignore_mlp_multiplier=True))
    assert p.symbolic["Q"]["adamw_factor"].power("n") == Fraction(-5, 4)


def test_sgd_ntk_query_factor():
    p = build_plan(vit(256), "neural-tangent", Constants(Lam={"Q": 3.0}))
    assert math.isclose(p.sgd_factor["Q"], 3.0 / 256)


@pytest.mark.parametrize("arch", [vit(), lm()])
def test_standard_preset_factors_are_one(arch):
    p = build_plan(arch, "standard")
    assert set(p.sgd_factor.values()) == {1.0}
    assert set(p.adamw_factor.values()) == {1.0}


@pytest.mark.parametrize(
    "strategy,n,expected",
    [("neural-tangent", 1024, 1024 ** -0.5), ("maximal-update", 1024, 1 / 1024), ("standard", 1024, 1.0)],
)
def test_output_rescale(strategy, n, expected):
    assert math.isclose(output_rescale(lm(n), ScalingStrategy(strategy)), expected)


def test_effective_constants_are_width_free():
    e1 = build_plan(vit(128), "neural-tangent").effective()
    e2 = build_plan(vit(512), "neural-tangent").effective()
    for f in ("C_emb", "C_PE", "C_Q", "C_K", "C_V", "C_U", "C_W", "C_X", "C_head"):
        assert math.isclose(getattr(e1, f), getattr(e2, f))
    for g in e1.Lam:
        assert math.isclose(e1.Lam[g], e2.Lam[g])


# -- tables ----------------------------------------------------------------------

def test_table_row_positional_embedding():
    p = build_plan(vit(), "neural-tangent")
    rows = {r.group: r.render(table_literals(p.arch)) for r in plan_table(p, "adamw")}
    assert rows["PosEmb"] == "positional embedding: std 0.02, lr factor n^{-1/2}"


def test_table_renders_head_with_literal_out_width():
    p = build_plan(vit(), "neural-tangent")
    rows = {r.group: r.render(table_literals(p.arch)) for r in plan_table(p, "adamw")}
    assert rows["HeadW"] == "head weights: std n^{-1/2}, lr factor n^{-1}·1000^{-1/2}"


def test_scale_algebra():
    a = Scale.of(4.0, n=-1)
    assert a.sqrt().coef == 2.0 and a.sqrt().power("n") == Fraction(-1, 2)
    assert (a * Scale.of(0.5, n=1)).power("n") == 0
    assert math.isclose(a.evaluate({"n": 16}), 0.25)


# -- properties -------------------------------------------------------------------

widths = st.sampled_from([4, 8, 16, 32, 64, 128])
presets = st.sampled_from(["standard", "neural-tangent", "hybrid", "maximal-update"])


@settings(max_examples=40, deadline=None)
@given(n=widths, preset=presets, modality=st.sampled_from(["vision", "language"]), tied=st.booleans())
def test_plan_json_round_trip(n, preset, modality, tied):
    if modality == "vision":
        a = ArchSpec("vision", n=n, H=2, T=2, n_in=5, n_out=3)
    else:
        a = ArchSpec("language", n=n, H=2, T=2, n_in=7, n_out=7, weight_tying=tied)
    p = build_plan(a, preset)
    q = ScalingPlan.from_json(p.to_json())
    assert q == p
    assert q.to_json() == p.to_json()


@settings(max_examples=40, deadline=None)
@given(n=widths, s=st.fractions(min_value=0, max_value=1, max_denominator=8))
def test_variances_non_negative_and_head_bias_zero(n, s):
    a = ArchSpec("vision", n=n, H=2, T=2, n_in=5, n_out=3)
    p = build_plan(a, ScalingStrategy(None, s=s))
    assert all(v >= 0 for v in p.init_var.values())
    assert p.init_var["HeadB"] == 0.0


@settings(max_examples=30, deadline=None)
@given(s=st.fractions(min_value=0, max_value=1, max_denominator=8))
def test_non_head_adamw_factors_gain_half_s(s):
    a = vit()
    base = build_plan(a, ScalingStrategy(None, s=0)).symbolic
    moved = build_plan(a, ScalingStrategy(None, s=s)).symbolic
    for g in ("Patch", "PosEmb", "Q", "X"):
        assert moved[g]["adamw_factor"].power("n") - base[g]["adamw_factor"].power("n") == s / 2
    assert moved["HeadW"]["adamw_factor"].power("n") == base["HeadW"]["adamw_factor"].power("n")
