import numpy as np
import pytest

from wideformer.arch_plan import ArchSpec, Constants, build_plan
from wideformer.kernel_engine import input_kernel, layer_norm_kernel
from wideformer.ntk_engine import head_ntk, ln_backward_factor, mlp_ntk_step, propagate, stem_ntk
from wideformer.pair_kernel import PairKernel


def vision(n=64, blocks=("mhsa", "mlp"), **kw):
    return ArchSpec("vision", n=n, H=4, T=3, n_in=5, n_out=3, blocks=blocks, **kw)


def ones_eff(a, **overrides):
    C = {g: 1.0 for g in ("Patch", "PosEmb", "Q", "K", "V", "U", "W", "X", "HeadW")}
    Lam = {g: 1.0 for g in C} | {"HeadB": 1.0}
    C.update(overrides.get("C", {}))
    Lam.update(overrides.get("Lam", {}))
    return build_plan(a, "neural-tangent", Constants(C=C, Lam=Lam)).effective()


def test_vision_stem_ntk():
    a = ArchSpec("vision", n=1, H=1, T=2, n_in=3, n_out=1, M=1)
    x = np.random.default_rng(0).standard_normal((2, 2, 3))
    G0 = input_kernel(x, "vision")
    th = stem_ntk(G0, ones_eff(a), "vision")
    assert np.allclose(th["Patch"] + th["PosEmb"], G0.matrix + G0.token_delta())
    zero = ones_eff(a, Lam={"Patch": 0.0, "PosEmb": 0.0})
    assert all(np.all(m == 0) for m in stem_ntk(G0, zero, "vision").values())


def test_language_stem_ntk_same_token_is_one():
    a = ArchSpec("language", n=1, H=1, T=2, n_in=4, n_out=4, M=1)
    G0 = input_kernel(np.array([[2, 2]]), "language")
    eff = build_plan(a, "neural-tangent", Constants(Lam={"WordEmb": 1.0, "PosEmb": 1.0})).effective()
    th = stem_ntk(G0, eff, "language")
    assert th["WordEmb"][0, 1] + th["PosEmb"][0, 1] == 1.0


def test_ln_backward_factor_by_hand():
    G = PairKernel(np.array([[4.0, 3.0], [3.0, 9.0]]), 2, 1)
    assert np.isclose(ln_backward_factor(G, 0.0)[0, 1], 1 / 6)
    assert np.allclose(ln_backward_factor(PairKernel(np.eye(2), 2, 1), 0.0).diagonal(), 1.0)


def test_mlp_step_identity_hand_value():
    a = ArchSpec("vision", n=1, H=1, T=1, n_in=1, n_out=1, M=1, activation="identity", eps_ln=0.0)
    eff = ones_eff(a)
    G = PairKernel(np.ones((2, 2)), 2, 1)
    F = layer_norm_kernel(G, 0.0)
    out, add = mlp_ntk_step({"Patch": np.ones((2, 2))}, G, F, "identity", eff, 0.0)
    total = sum(out.values())
    assert np.allclose(total, 1 + 1 + 1 + 1)


def test_mlp_step_inert_without_readout():
    a = ArchSpec("vision", n=1, H=1, T=1, n_in=1, n_out=1, M=1, activation="relu")
    eff = ones_eff(a, C={"X": 0.0}, Lam={"X": 0.0, "W": 0.0})
    G = PairKernel(np.array([[2.0, 0.3], [0.3, 1.0]]), 2, 1)
    th = {"Patch": G.matrix.copy()}
    out, _ = mlp_ntk_step(th, G, layer_norm_kernel(G, 1e-5), "relu", eff, 1e-5)
    assert np.allclose(out["Patch"], th["Patch"]) and np.all(out["X"] == 0) and np.all(out["W"] == 0)


def test_vision_head_diagonal_hand_value():
    a = ArchSpec("vision", n=1, H=1, T=1, n_in=1, n_out=1, M=1, eps_ln=0.0)
    eff = ones_eff(a)
    G = PairKernel(np.array([[4.0, 1.0], [1.0, 9.0]]), 2, 1)
    F = layer_norm_kernel(G, 0.0)
    th = np.array([[2.0, 0.5], [0.5, 3.0]])
    out, _ = head_ntk({"Patch": th}, G, F, eff, "vision", 0.0)
    total = sum(out.values())
    assert np.allclose(np.diag(total), 2 + np.diag(th) / np.diag(G.matrix))


def test_tied_head_adds_embedding_term_to_word_embedding_group():
    a = ArchSpec("language", n=16, H=2, T=2, n_in=6, n_out=6, blocks=("mlp",), weight_tying=True)
    plan = build_plan(a, "neural-tangent")
    kt, nt = propagate(a, plan, np.array([[0, 1], [2, 0]]))
    F = kt[-2].F.matrix
    eff = plan.effective()
    assert np.allclose(nt.output.additive["WordEmb"], eff.Lam["WordEmbHead"] * F)


def test_groups_sum_to_total_and_theory_is_width_free():
    x = np.random.default_rng(4).standard_normal((2, 3, 5))
    th = []
    for n in (64, 256):
        a = vision(n)
        kt, nt = propagate(a, build_plan(a, "neural-tangent"), x, n_samples=512)
        assert np.allclose(sum(nt.output.groups.values()), nt.output.theta.matrix)
        assert np.linalg.eigvalsh(nt.output.theta.matrix).min() > -1e-10
        th.append(nt.output.theta.matrix)
    assert np.allclose(th[0], th[1], rtol=1e-12, atol=1e-12)


def test_single_token_mhsa_has_no_query_key_contribution():
    a = ArchSpec("vision", n=16, H=2, T=1, n_in=3, n_out=2, blocks=("mhsa",))
    x = np.random.default_rng(0).standard_normal((2, 1, 3))
    _, nt = propagate(a, build_plan(a), x, n_samples=64)
    blk = nt[1]
    assert np.all(blk.additive["Q"] == 0) and np.all(blk.additive["K"] == 0)
    assert np.any(blk.additive["V"] != 0)


def test_ntk_csv_has_one_row_per_group_pair():
    a = vision(16, blocks=("mlp",))
    x = np.random.default_rng(0).standard_normal((1, 3, 5))
    _, nt = propagate(a, build_plan(a), x)
    lines = nt.to_csv().splitlines()
    assert lines[0].startswith("block,label")
    assert len(lines) == 1 + sum(len(e.groups) * 9 for e in nt.entries)
