"""One optimizer step at several widths: under the width-aware plans the change
in the network output per unit learning rate stays put, while the standard
uniform AdamW recipe lets it grow with n.

    python demos/update_scaling.py
"""
from wideformer import ArchSpec, build_plan
from wideformer.config import InputSpec
from wideformer.lab.estimators import grad_magnitude_stats, one_step_probe

base = ArchSpec("vision", n=64, H=4, T=3, n_in=8, n_out=4, blocks=("mhsa", "mlp"))
widths = (64, 128, 256)
x = InputSpec(batch=2).make(base)
standard = "standard"

print("mean |dL/dtheta| per group (neural-tangent plan)")
rows = {n: grad_magnitude_stats(base.widen(n), build_plan(base.widen(n)), x, n_inits=16, seed=0) for n in widths}
for g in sorted(rows[widths[0]]):
    vals = [float(rows[n][g].estimate) for n in widths]
    print(f"  {g:<7s}" + "".join(f"{v:10.4f}" for v in vals) + f"   ratio {vals[-1] / vals[0]:.2f}")

print("\n|df|/lr after one step")
for label, opt, strategy in (("sgd, width-aware", "sgd", None), ("adamw, width-aware", "adamw", None), ("adamw, standard", "adamw", standard)):
    vals = []
    for n in widths:
        a = base.widen(n)
        plan = build_plan(a, strategy) if strategy else build_plan(a)
        vals.append(float(one_step_probe(a, plan, opt, 1e-3, x, n_inits=16, seed=0).estimate))
    print(f"  {label:<20s}" + "".join(f"{v:11.3f}" for v in vals))
