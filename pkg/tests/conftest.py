import numpy as np
import pytest

from geohead import synthetic as syn


@pytest.fixture(scope="session")
def rig_scene():
    """Default 3-camera rig (baselines 9.35 m and 10.1 m) with a few static pedestrians."""
    cams = syn.default_rig()
    peds = [syn.Pedestrian(x=-1.0, y=11.0, height=172.0, seed=3), syn.Pedestrian(x=1.5, y=13.0, height=158.0, seed=4),
            syn.Pedestrian(x=0.3, y=9.0, height=188.0, seed=5)]
    return syn.SceneSpec(pedestrians=peds, cameras=cams, ground_seed=1)


@pytest.fixture(scope="session")
def truth01(rig_scene):
    return syn.derive_truth(rig_scene, 0, 1)


@pytest.fixture(scope="session")
def truth02(rig_scene):
    return syn.derive_truth(rig_scene, 0, 2)


@pytest.fixture(scope="session")
def crowd_views():
    """Crowd rig, three static pedestrians, rendered views, descriptor fields and true families."""
    from geohead.descriptor import compute_field
    peds = [syn.Pedestrian(x=-0.5, y=7.6, height=172.5, seed=11), syn.Pedestrian(x=0.6, y=7.9, height=160.0, seed=12),
            syn.Pedestrian(x=0.0, y=8.6, height=185.0, seed=13)]
    scene = syn.SceneSpec(pedestrians=peds, cameras=syn.crowd_rig(), ground_seed=4)
    views = [syn.render(scene, c) for c in range(3)]
    fields = [compute_field(v.image) for v in views]
    fams = [syn.derive_truth(scene, 0, j).family for j in (1, 2)]
    return scene, views, fields, fams


@pytest.fixture(scope="session")
def crowd_cost(crowd_views):
    from geohead.heightmap import build_data_cost
    _, _, fields, fams = crowd_views
    return build_data_cost(fields[0], fields[1:], fams)


def rot(axis, angle):
    from scipy.spatial.transform import Rotation
    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()


ACCEPTANCE: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; the lines are repeated in the terminal summary."""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(line)
    ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
