"""Walk through the library on one synthetic room, from scene to scores.

Run with ``python3 demos/walkthrough.py``; it takes a couple of minutes on
one core.  Each step prints what it produced.
"""

import numpy as np

from region_transformer.inference import (
    NetworkMaskModel,
    OracleMaskModel,
    SegmentParams,
    classic_region_grow,
    grow_region,
    segment,
)
from region_transformer.metrics import evaluate
from region_transformer.network import NetworkConfig
from region_transformer.pointcloud import featurize
from region_transformer.simulate import SceneSpec, generate_scene, simulate_growth_example
from region_transformer.train import TrainConfig, make_slots, train

R_GROW = 0.15
spec = SceneSpec(room=(2.0, 2.0, 1.5), objects=(2, 3), spacing=0.1)

# 1. A labelled room: a floor plus a few boxes, spheres and cylinders resting on it.
scene = featurize(generate_scene(spec, np.random.default_rng(0)))
print(f"scene: {len(scene)} points, instance sizes {np.bincount(scene.labels).tolist()}")

# 2. One corrupted growth state, the kind of example the network learns from.
ex = simulate_growth_example(scene, seed=10, step=5, theta=0.2, r_grow=R_GROW, rng=np.random.default_rng(1))
print(
    f"growth example: {len(ex.inliers)} inliers ({int(ex.remove_truth.sum())} to remove), "
    f"{len(ex.neighbors)} neighbours ({int(ex.add_truth.sum())} to add)"
)

# 3. Growth with perfect masks recovers an instance and stops when nothing is left to add.
res = grow_region(OracleMaskModel(), scene, seed=10, r_grow=R_GROW)
print(f"oracle growth from point 10: {len(res.inliers)} points after {res.iterations} rounds ({res.reason})")

# 4. The classic normal/curvature grower as a reference.
classic = classic_region_grow(scene, angle_thresh=20.0, curv_thresh=0.03, r_grow=R_GROW)
print("classic grower:", {k: round(v, 3) for k, v in evaluate(classic.labels, scene.labels).items()})

# 5. Train a small network on a handful of other rooms.
clouds = [featurize(generate_scene(spec, np.random.default_rng(100 + s))) for s in range(10)]
slots = make_slots(clouds, 60, 15, np.random.default_rng(0))
net_cfg = NetworkConfig(set_size=64, k_attn=8, d_attn=16, b2_attention=False).halved()
cfg = TrainConfig(epochs=12, batch_size=8, network=net_cfg)
net = train(cfg, clouds, slots, "/tmp/walkthrough.ckpt", progress=lambda e, row: print("  epoch", *row))

# 6. Segment the first room with the learned masks.
learned = segment(NetworkMaskModel(net), scene, SegmentParams(r_grow=R_GROW))
print("learned grower:", {k: round(v, 3) for k, v in evaluate(learned.labels, scene.labels).items()})
print("stop reasons:", learned.report()["reason_histogram"])
