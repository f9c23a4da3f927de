import numpy as np
import pytest

from mcgs import synth


@pytest.fixture(scope="session")
def rig():
    return synth.make_rig()


@pytest.fixture(scope="session")
def scene():
    return synth.build_scene(synth.SceneConfig(seed=0))


@pytest.fixture(scope="session")
def frames(scene, rig):
    traj = synth.Trajectory.from_config(synth.TrajectoryConfig())
    return synth.generate_sequence(scene, rig, traj, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
