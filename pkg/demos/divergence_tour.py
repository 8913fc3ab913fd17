"""Walk through the effective-update identities on random layers.

Run: python demos/divergence_tour.py
"""
import numpy as np

from affine_divergence import divergence as V
from affine_divergence.tensor import Rng

rng = Rng(0)
n, out = 8, 3

print("one sample, one plain gradient step, eta = 1e-6")
x, g = rng.normal((1, n)), rng.normal((1, out))
for kind in ("affine", "affine_like", "norm_like"):
    layer = V.random_layer(kind, n, out, rng)
    rep = V.measure_effective_update(layer, x, g)
    ratio = np.asarray(rep.ratio).ravel()
    print(f"  {kind:12s} effective / ideal = {ratio.round(6)}  residual {rep.residual:.1e}")
print(f"  |x|^2 + 1 = {float(np.sum(x * x)) + 1:.6f}")

print("\nbatch of 4: effective update = M g, with M mixing samples")
x, g = rng.normal((4, n)), rng.normal((4, out))
for kind in ("affine", "affine_like", "norm_like"):
    layer = V.random_layer(kind, n, out, rng)
    rep = V.measure_effective_update(layer, x, g)
    print(f"  {kind:12s} residual {rep.residual:.1e}  diagonal mean {rep.mixing.diagonal.mean():7.3f}"
          f"  off-diagonal weight {rep.mixing.interference:7.3f}")
    for row in rep.mixing.M:
        print("    " + " ".join(f"{v:7.3f}" for v in row))

print("\nresidual against eta: the map is linear in (W, b), so only round-off remains")
res, slope = V.eta_scaling("affine")
print(f"  residuals {res}  log-log slope {slope:+.2f}")
