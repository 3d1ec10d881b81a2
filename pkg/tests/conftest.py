import numpy as np
import pytest

from magcalib.geometry import Dataset, Fingerprint, Pose
from magcalib.magmap import GpHyperparams, build_map
from magcalib.simulator import (
    Box,
    Dipole,
    PathSpec,
    WorldConfig,
    generate_path,
    survey_dataset,
    survey_positions,
)


@pytest.fixture(scope="session")
def gentle_world():
    """Small world with one weak, distant dipole: easy for the GP to map."""
    extent = Box(np.zeros(3), np.array([8.0, 8.0, 3.0]))
    dipoles = (Dipole(np.array([4.0, 4.0, 2.7]), np.array([8.0, 4.0, 25.0])),)
    return WorldConfig(extent=extent, ambient_field=np.array([20.0, 0.0, -45.0]),
                       dipoles=dipoles)


@pytest.fixture(scope="session")
def gentle_map(gentle_world):
    """Noise-free dense survey of the gentle world."""
    positions = survey_positions(gentle_world, 0.5, z_levels=(0.4, 0.9, 1.4),
                                 margin=1.0)
    data = survey_dataset(gentle_world, positions, noise_sigma=0.0, seed=0)
    hyper = GpHyperparams(length_scale=0.7, noise_variance=1e-6)
    return build_map(data, hyper, block_size=10.0)


@pytest.fixture(scope="session")
def calib_world():
    """Mid-size world with rack and beacon clutter for end-to-end tests."""
    extent = Box(np.zeros(3), np.array([18.0, 14.0, 3.0]))
    dipoles = (
        Dipole(np.array([6.0, 4.5, 2.6]), np.array([10.0, 4.0, 30.0])),
        Dipole(np.array([12.0, 9.5, 2.6]), np.array([-8.0, 12.0, 26.0])),
        Dipole(np.array([2.0, 2.0, 2.9]), np.array([150.0, 80.0, 260.0])),
        Dipole(np.array([16.0, 12.0, 2.9]), np.array([-120.0, 90.0, 280.0])),
    )
    return WorldConfig(extent=extent, ambient_field=np.array([38.0, 6.0, -14.0]),
                       dipoles=dipoles)


@pytest.fixture(scope="session")
def calib_map(calib_world):
    positions = survey_positions(calib_world, 0.6,
                                 z_levels=(0.15, 0.45, 0.75, 1.05, 1.5), margin=1.0)
    data = survey_dataset(calib_world, positions, noise_sigma=0.03, seed=1)
    hyper = GpHyperparams(length_scale=0.8, noise_variance=0.001)
    return build_map(data, hyper, block_size=8.0)


@pytest.fixture(scope="session")
def calib_path(calib_world):
    spec = PathSpec(kind="lawnmower", sample_spacing=1.5, z_height=0.6,
                    region_margin=4.0)
    return generate_path(spec, calib_world)


def lattice_dataset(values_fn, xs, ys, zs, sensor_id="lattice"):
    """Fingerprints on a regular lattice with identity orientation."""
    samples = []
    i = 0
    for x in xs:
        for y in ys:
            for z in zs:
                pos = np.array([x, y, z], float)
                pose = Pose(np.eye(3), pos, "mag", "map")
                samples.append(Fingerprint(float(i), pose, values_fn(pos)))
                i += 1
    return Dataset(sensor_id, samples)
