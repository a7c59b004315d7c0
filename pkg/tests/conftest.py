import numpy as np
import pytest

from turnreg.synth import SyntheticScene, generate, write_dataset

# (criterion, passed, detail) lines collected by test_acceptance and printed after the run
ACCEPTANCE = []

SMALL = dict(width=192, height=192, angular_step=10.0, spacing=1.0)


def small_scene(**kw) -> SyntheticScene:
    """Low-resolution ring (36 views, 192 px, coarse point spacing) for fast tests."""
    return SyntheticScene(**{**SMALL, **kw})


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Written small two-pose dataset: ``(root, scene)``."""
    scene = small_scene()
    root = tmp_path_factory.mktemp("small")
    write_dataset(generate(scene, 0), root)
    return root, scene


@pytest.fixture(scope="session")
def identity_dataset(tmp_path_factory):
    from turnreg.geom import RigidTransform

    scene = small_scene(pose_change=RigidTransform.identity(), point_noise=0.0, pixel_noise=0.0)
    root = tmp_path_factory.mktemp("identity")
    write_dataset(generate(scene, 3), root)
    return root, scene


@pytest.fixture(scope="session")
def hemisphere_dataset(tmp_path_factory):
    """Pose 2 is the object upside down and the cameras look steeply down, so the poses share no surface."""
    from turnreg.geom import RigidTransform, rot_x

    scene = small_scene(elevation_deg=70.0, max_obliquity_deg=60.0,
                        pose_change=RigidTransform(rot_x(180.0), [0.0, 0.0, 0.0]))
    ds = generate(scene, 0)
    root = tmp_path_factory.mktemp("hemisphere")
    write_dataset(ds, root)
    return root, ds


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
