import numpy as np

from region_transformer.network import NetworkConfig
from region_transformer.pointcloud import RawCloud, featurize
from region_transformer.simulate import SceneSpec, generate_scene


def make_cloud(positions, labels=None, colors=None):
    positions = np.asarray(positions, dtype=np.float64)
    if colors is None:
        colors = np.full_like(positions, 0.5)
    return RawCloud(positions, colors, labels)


def grid_plane(nx, ny, spacing=0.05, z=0.0, origin=(0.0, 0.0)):
    xs, ys = np.meshgrid(np.arange(nx) * spacing + origin[0], np.arange(ny) * spacing + origin[1])
    return np.column_stack([xs.ravel(), ys.ravel(), np.full(nx * ny, z)])


def tiny_network_config(**kw):
    base = dict(b1=(8, 8), b2=(8, 16), b3=(16, 8), set_size=12, k_attn=4, d_attn=6)
    base.update(kw)
    return NetworkConfig(**base)
