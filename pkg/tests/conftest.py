import numpy as np
import pytest

from voxlift.geometry import Camera, CameraRig, Intrinsics, look_at


def random_camera(rng, cam_id=1, width=16, height=12, radius=(4.0, 7.0), target_spread=0.5):
    """Camera on a random sphere shell looking near the origin."""
    while True:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if abs(d[2]) < 0.9:
            break
    eye = d * rng.uniform(*radius)
    target = rng.uniform(-target_spread, target_spread, 3)
    f = rng.uniform(0.8, 1.2) * width
    intr = Intrinsics(f, f * rng.uniform(0.9, 1.1), (width - 1) / 2 + rng.uniform(-1, 1),
                      (height - 1) / 2 + rng.uniform(-1, 1), width, height)
    return Camera(intr, look_at(eye, target), cam_id)


def random_rig(rng, n=3, **kw):
    return CameraRig(tuple(random_camera(rng, i + 1, **kw) for i in range(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
