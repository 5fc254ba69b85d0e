"""
Recover three band moduli when the rest shape is known.

Synthesizes five rotated-gravity poses of the benchmark beam, then fits the
cluster moduli from a homogeneous 1 MPa start. Repeats with measurement noise
to compare one pose against five, averaged over noise draws.
"""

import numpy as np

from staticinv.inverse import optimize_materials
from staticinv.synth import banded_material, make_block, rotated_gravity, rotation_angles, synthesize_poses

mesh = make_block((2, 2, 10), 0.01, "x-")
truth = banded_material(mesh, [2e4, 2e5, 8e5])
gravities = [rotated_gravity(t, "yz") for t in rotation_angles(5, 30.0)]
start = truth.with_E(np.full(3, 1e6))

poses, states = synthesize_poses(mesh, truth, gravities)
res = optimize_materials(mesh, mesh.nodes, poses, start)
print("noiseless, 5 poses:", np.array2string(res.cluster_E, precision=1), f"({res.iterations} iterations)")

# noise at 1% of the neutral-pose sag; a single draw can favour either side,
# so average over seeds and over every choice of the single pose
sag = np.linalg.norm(states[2].positions - mesh.nodes, axis=1).max()
one, five = [], []
for seed in range(3):
    noisy, _ = synthesize_poses(mesh, truth, gravities, noise_std=0.01 * sag, rng=np.random.default_rng(seed))
    fit = [optimize_materials(mesh, mesh.nodes, s, start).cluster_E for s in [noisy] + [[p] for p in noisy]]
    err = [np.abs(E / truth.cluster_E - 1).max() for E in fit]
    five.append(err[0])
    one.extend(err[1:])
print(f"noise {0.01 * sag:.1e} m, mean max relative error: 1 pose {np.mean(one):.4f}, 5 poses {np.mean(five):.4f}")
