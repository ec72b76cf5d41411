"""Recover a velocity model from a wavefield known at every node.

Because the Helmholtz operator is linear in the squared slowness for a fixed
wavefield, a complete wavefield pins the model down node by node.  The script
builds a smooth random model, solves for one monochromatic field and inverts
that relation with both the complex and the magnitude-only formula.  It then
zeroes a few wavefield samples to show how such nodes are masked.

    python3 demos/01_bilinearity.py
"""

import numpy as np

from wipr import Grid2D, PmlProfile, assemble, bilinear_recovery, forward_solve, make_toy_model

grid = Grid2D(41, 31, 10.0)
model = make_toy_model("smooth", grid, vmin=1800, vmax=3200, seed=7)
omega = 2 * np.pi * 8.0

b = np.zeros(grid.n, complex)
b[grid.index(20, 15)] = 1.0
b += 0.05 * np.exp(1j * np.linspace(0.0, 9.0, grid.n))
u = forward_solve(assemble(model, omega, PmlProfile(0)), b)

interior = np.zeros(grid.shape, bool)
interior[1:-1, 1:-1] = True
interior = interior.ravel()


def rel_error(rec):
    keep = interior & ~np.ma.getmaskarray(rec)
    return np.linalg.norm(rec.data[keep] - model.values[keep]) / np.linalg.norm(model.values[keep])


print("complete wavefield")
for label, mag in (("complex", False), ("magnitude", True)):
    rec = bilinear_recovery(u, b, omega, grid, magnitude_only=mag)
    print(f"  {label:9s} relative error {rel_error(rec):.2e}, masked {rec.mask.sum()}")

holes = [(5, 5), (30, 20), (12, 25)]
u_holes = u.copy()
for ix, iz in holes:
    u_holes[grid.index(ix, iz)] = 0.0
rec = bilinear_recovery(u_holes, b, omega, grid)
print(f"with {len(holes)} zeroed samples: masked nodes {rec.mask.sum()}")
# a zeroed sample also corrupts its neighbours through the Laplacian
near = np.zeros(grid.shape, bool)
for ix, iz in holes:
    near[max(ix - 1, 0):ix + 2, max(iz - 1, 0):iz + 2] = True
far = interior & ~near.ravel()
err = np.abs(rec.data - model.values)[far] / model.values[far]
print(f"  error away from the holes {err.max():.2e}")
