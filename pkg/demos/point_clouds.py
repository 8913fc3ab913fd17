"""Push 1000 standard-normal 2-D points through each parameterless normaliser.

Writes one CSV per normaliser into demos/out/ and prints the output radii.
Run: python demos/point_clouds.py
"""
import os

import numpy as np

from affine_divergence import experiment as X

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

for name in X.CLOUD_NORMALISERS:
    pts_in, pts_out = X.cloud_points(name, 1000, seed=0)
    r = np.linalg.norm(pts_out, axis=1)
    distinct = len({tuple(p) for p in np.round(pts_out, 9)})
    print(f"{name:12s} radius mean {r.mean():.4f} std {r.std(ddof=1):.4f} "
          f"range [{r.min():.4f}, {r.max():.4f}]  distinct points {distinct}")
    with open(os.path.join(out_dir, f"cloud_{name}.csv"), "w", newline="") as fh:
        X.write_csv(X.cloud_rows(pts_in, pts_out), X.CLOUD_FIELDS, fh)
print(f"CSV files in {out_dir}")
