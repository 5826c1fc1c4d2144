import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wideformer.arch_plan import ArchSpec, Constants, build_plan
from wideformer.config import InputSpec
from wideformer.lab.estimators import (
    empirical_kernel,
    empirical_ntk,
    grad_magnitude_stats,
    ln_backward_stats,
    one_step_probe,
    one_step_update,
    stem_only_ntk,
)
from wideformer.lab.model import backward, forward_pass, init_model, output_jacobian
from wideformer.verify import finite_difference_errors


def test_patch_variance_law_of_large_numbers():
    a = ArchSpec("vision", n=400, H=4, T=2, n_in=250, n_out=2)
    plan = build_plan(a, "neural-tangent", Constants(C={"Patch": 2.0}))
    w = init_model(a, plan, seed=3)["stem.emb"]
    var = w.var()
    se = np.sqrt(2.0) * (2.0 / 250) / np.sqrt(w.size)
    assert abs(var - 2.0 / 250) < 4 * se
    assert np.all(init_model(a, plan, seed=3)["head.b"] == 0)


def test_same_seed_same_bits(vision_arch):
    plan = build_plan(vision_arch)
    p1, p2 = init_model(vision_arch, plan, 5), init_model(vision_arch, plan, 5)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1.names)
    p3 = init_model(vision_arch, plan, 5, replica=1)
    assert not np.array_equal(p1["block1.Q"], p3["block1.Q"])


def test_layer_norm_is_exact_without_eps(vision_arch):
    from dataclasses import replace

    a = replace(vision_arch, eps_ln=0.0, n=64)
    tr = forward_pass(init_model(a, build_plan(a)), InputSpec(batch=3).make(a))
    for c in tr.ln:
        assert np.max(np.abs((c.s ** 2).mean(-1) - 1)) < 1e-12


def test_masked_attention_rows(language_arch):
    tr = forward_pass(init_model(language_arch, build_plan(language_arch)), InputSpec().make(language_arch))
    om = tr.blocks[0].omega
    T = om.shape[-1]
    assert np.all(om[..., np.triu_indices(T, 1)[0], np.triu_indices(T, 1)[1]] == 0)
    assert np.allclose(om.sum(-1), 1.0)


def test_single_token_attention_is_one():
    a = ArchSpec("vision", n=16, H=4, T=1, n_in=3, n_out=2)
    tr = forward_pass(init_model(a, build_plan(a)), InputSpec().make(a))
    assert np.all(tr.blocks[0].omega == 1.0)


@pytest.mark.parametrize("tied", [True, False])
def test_gradients_match_finite_differences(tied):
    a = ArchSpec("language", n=8, H=2, T=3, n_in=6, n_out=6, blocks=("mhsa-masked", "mlp"), weight_tying=tied)
    errs = finite_difference_errors(a, build_plan(a), InputSpec().make(a))
    assert max(errs.values()) < 1e-6


def test_pooled_vision_gradients_match_finite_differences():
    a = ArchSpec("vision", n=8, H=2, T=3, n_in=4, n_out=2, blocks=("mhsa", "mlp"), pooling="token-mean")
    errs = finite_difference_errors(a, build_plan(a), InputSpec().make(a))
    assert set(errs) == {"Patch", "PosEmb", "Q", "K", "V", "U", "W", "X", "HeadW", "HeadB"}
    assert max(errs.values()) < 1e-6


def test_depth_zero_head_bias_gradient_is_kronecker():
    a = ArchSpec("vision", n=8, H=2, T=2, n_in=3, n_out=3, blocks=())
    params = init_model(a, build_plan(a))
    x = InputSpec().make(a)
    _, grads = output_jacobian(params, x, [(0, 1, j) for j in range(3)])
    assert np.array_equal(grads.full("head.b"), np.eye(3))


def test_zero_vision_input_kills_patch_gradient(vision_arch):
    params = init_model(vision_arch, build_plan(vision_arch))
    x = np.zeros((2, vision_arch.T, vision_arch.n_in))
    _, grads = output_jacobian(params, x)
    assert np.all(grads.full("stem.emb") == 0)
    assert np.any(grads.full("stem.pos") != 0)
    stats = grad_magnitude_stats(vision_arch, build_plan(vision_arch), x, 2)
    assert stats["Patch"].estimate == 0


def test_first_block_tangent_kernel_is_deterministic(vision_arch):
    plan = build_plan(vision_arch)
    x = InputSpec().make(vision_arch)
    a = stem_only_ntk(init_model(vision_arch, plan, 0), x, plan)
    b = stem_only_ntk(init_model(vision_arch, plan, 9), x, plan)
    assert np.array_equal(a, b)


def test_stem_kernel_estimate_converges_to_theory(vision_arch):
    from wideformer.kernel_engine import input_kernel, stem_kernel

    plan = build_plan(vision_arch)
    x = InputSpec().make(vision_arch)
    eff = plan.effective()
    G1 = stem_kernel(input_kernel(x, "vision"), eff.C_emb, eff.C_PE).matrix
    est = empirical_kernel(vision_arch, plan, x, 64)
    z = np.abs(est.stages[0].estimate - G1) / est.stages[0].stderr
    assert z.max() < 5


def test_adamw_first_step_is_signed_factor(vision_arch):
    plan = build_plan(vision_arch)
    params = init_model(vision_arch, plan)
    g = {k: np.random.default_rng(1).standard_normal(params[k].shape) for k in params.names}
    new = one_step_update(params, g, plan, "adamw", lr=1e-2)
    lam = plan.adamw_factor["Q"]
    step = new["block1.Q"] - params["block1.Q"]
    assert np.allclose(step, -1e-2 * lam * np.sign(g["block1.Q"]), rtol=1e-6)


def test_one_step_update_is_first_order(vision_arch):
    plan = build_plan(vision_arch)
    x = InputSpec().make(vision_arch)
    for opt in ("sgd", "adamw"):
        a = one_step_probe(vision_arch, plan, opt, 1e-3, x, 4).estimate
        b = one_step_probe(vision_arch, plan, opt, 5e-4, x, 4).estimate
        assert abs(a - b) / b < 0.01


def test_ln_backward_stats_shape(vision_arch):
    plan = build_plan(vision_arch)
    x = InputSpec().make(vision_arch)
    m = ln_backward_stats(vision_arch, plan, x, 3)
    P = x.shape[0] * x.shape[1]
    assert m.estimate.shape == (P, P)


def test_too_few_inits_rejected(vision_arch):
    with pytest.raises(ValueError, match="at least"):
        empirical_ntk(vision_arch, build_plan(vision_arch), InputSpec().make(vision_arch), 1)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 16), batch=st.integers(1, 3))
def test_simulation_is_bit_reproducible(seed, batch):
    a = ArchSpec("vision", n=16, H=2, T=2, n_in=3, n_out=2, blocks=("mhsa", "mlp"))
    plan = build_plan(a)
    x = InputSpec(batch=batch, seed=seed).make(a)
    e1 = empirical_kernel(a, plan, x, 16, seed=seed)
    e2 = empirical_kernel(a, plan, x, 16, seed=seed)
    assert all(np.array_equal(s.estimate, t.estimate) for s, t in zip(e1.stages, e2.stages))
