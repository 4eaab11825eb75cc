import numpy as np
import pytest

from pgpc.geometry import Mesh, PointCloud, sample_surface_uniform, voxelize
from pgpc.network import NetworkConfig, init_weights
from pgpc.prior import PriorParams, pose_mesh
from pgpc.template import build_toy_template


@pytest.fixture(scope="session")
def template():
    return build_toy_template()


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest legal network; keeps graph tests fast."""
    return NetworkConfig(
        levels=2,
        enc_channels=(4, 8),
        dec_channels=(8, 4),
        latent_channels=4,
        vrn_branch_a=(3, 3),
        vrn_branch_b=(1, 3, 1),
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return init_weights(tiny_config, seed=3)


@pytest.fixture(scope="session")
def full_weights():
    return init_weights(seed=0)


def posed_cloud(template, precision=6, seed=11, points=3000, margin=0.8):
    """A voxelized sampling of a randomly posed toy body, with true params."""
    rng = np.random.default_rng(seed)
    params = PriorParams(
        pose=rng.normal(0.0, 0.18, 69),
        shape=rng.normal(0.0, 0.45, 10),
        rotation=rng.normal(0.0, 0.25, 3),
        translation=np.zeros(3),
    )
    posed = pose_mesh(template, params)
    v = posed.vertices
    hi = 1 << precision
    s = margin * hi / float((v.max(axis=0) - v.min(axis=0)).max())
    delta = np.full(3, hi / 2.0) / s - 0.5 * (v.max(axis=0) + v.min(axis=0))
    from dataclasses import replace

    params = replace(params, translation=delta, scale=s)
    world = Mesh((v + delta) * s, posed.faces)
    pts = sample_surface_uniform(world, points, seed=seed + 1)
    from pgpc.geometry import VOXEL_EPS

    cloud = voxelize(pts, precision, box=(np.zeros(3), float(hi) - VOXEL_EPS))
    return cloud, params


@pytest.fixture(scope="session")
def body_cloud_6bit(template):
    cloud, params = posed_cloud(template, precision=6, seed=11)
    return cloud, params
