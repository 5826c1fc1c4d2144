"""Tangent kernel of a two-block language model: recursion vs finite-width average,
split by parameter group.

    python demos/ntk_theory_vs_lab.py
"""
import numpy as np

from wideformer import ArchSpec, build_plan, propagate
from wideformer.config import InputSpec
from wideformer.lab.estimators import empirical_ntk

arch = ArchSpec("language", n=128, H=4, T=3, n_in=12, n_out=12, blocks=("mhsa-masked", "mlp"), weight_tying=True)
x = InputSpec(batch=2).make(arch)
plan = build_plan(arch)

_, nt = propagate(arch, plan, x, n_samples=4096, seed=0, replicates=2)
theory = nt.output
lab = empirical_ntk(arch, plan, x, n_inits=48, seed=3)

print(f"{'group':<8s} {'theory':>9s} {'lab':>9s} {'± se':>8s}   (mean over the diagonal)")
for g in theory.groups:
    t = np.diag(theory.groups[g]).mean()
    e = np.diag(lab.total.groups[g]).mean()
    s = np.diag(lab.total.groups_se[g]).mean()
    print(f"{g:<8s} {t:9.4f} {e:9.4f} {s:8.4f}")
t = np.diag(theory.theta.matrix).mean()
e = np.diag(lab.total.estimate).mean()
print(f"{'total':<8s} {t:9.4f} {e:9.4f} {np.diag(lab.total.stderr).mean():8.4f}")
