# # Thin-plate spline warps
#
# A 3x3 grid of control points, each with an (x, y) offset, defines a smooth
# sampling grid. Zero offsets give the identity map, and the sampler then
# returns the input unchanged, bit for bit.

import torch

from _common import out_dir, save_row
from cvton_lab import data as D
from cvton_lab.tps import TpsError, control_points, identity_grid, solve_tps, warp

out = out_dir("01_warps")
sample = D.toy_split(D.ToySpec(n_train=1, n_test=0, seed=3), "train").samples[0]
garment = sample.garment[None]

# ## Identity

theta = torch.zeros(1, 18)
print("identity exact:", torch.equal(warp(garment, solve_tps(theta, 64, 48)), garment))
print("control points:\n", control_points(3))

# ## A few deformations
#
# Offsets are in normalized coordinates: the image spans [-1, 1] on both axes.
# The first nine entries move points along x, the last nine along y.

shift = torch.zeros(1, 18)
shift[0, :9] = 0.2                      # everything samples 10% further right
squeeze = torch.zeros(1, 18)
squeeze[0, :9] = torch.tensor(control_points(3)[:, 0]) * 0.3   # sample wider -> garment shrinks
bend = torch.zeros(1, 18)
bend[0, 9 + 4] = -0.25                  # pull the centre row upward

results = [garment[0]]
for name, t in (("shift", shift), ("squeeze", squeeze), ("bend", bend)):
    grid = solve_tps(t, 64, 48)
    moved = (grid - identity_grid(64, 48)).abs().max()
    print(f"{name:>8}: largest grid displacement {float(moved):.3f}")
    results.append(warp(garment, grid)[0])
save_row(results, out / "warps.png")

# ## Gradients flow to the offsets
#
# This is what lets the matcher learn: a loss on the warped image
# back-propagates into theta.

theta = torch.zeros(1, 18, requires_grad=True)
target = warp(garment, solve_tps(shift, 64, 48))
loss = (warp(garment, solve_tps(theta, 64, 48)) - target).abs().mean()
loss.backward()
print("d loss / d theta (x offsets):", theta.grad[0, :9].numpy().round(4))

# ## Invalid inputs are rejected

try:
    solve_tps(torch.zeros(17), 64, 48)
except TpsError as exc:
    print("rejected:", exc)
print("wrote", out / "warps.png")
