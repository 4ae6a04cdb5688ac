import numpy as np
import pytest

from fuse4d.core import CameraIntrinsics, Sequence, SequenceFrame
from fuse4d.synth import NoiseSpec, add_noise, gen_falling_sphere, scaled_intrinsics

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"{crit} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def clean_sphere():
    return gen_falling_sphere()


@pytest.fixture(scope="session")
def noisy_sphere(clean_sphere):
    return add_noise(clean_sphere, NoiseSpec(0.2, 0.02, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sequence(rng, h=8, w=8, frames=3, k=None, depth=(400.0, 600.0), holes=0.0):
    """Small random sequence with optional masked pixels."""
    k = k or CameraIntrinsics(50.0, 55.0, (w - 1) / 2, (h - 1) / 2)
    out = []
    for t in range(frames):
        d = rng.uniform(*depth, size=(h, w))
        valid = rng.random((h, w)) >= holes
        out.append(SequenceFrame.from_arrays(t, rng.random((h, w)), np.where(valid, d, 0.0), k, valid))
    return Sequence(tuple(out), k)


def plane_sequence(size=32, depth=500.0, frames=1, k=None, tilt=(0.0, 0.0)):
    """Exact plane z = depth + tx*X + ty*Y seen through k (depths per pixel ray)."""
    k = k or scaled_intrinsics(size)
    rays = k.rays(size, size)
    tx, ty = tilt
    d = depth / (1.0 - tx * rays[..., 0] - ty * rays[..., 1])
    inten = np.full((size, size), 0.5)
    seq = [SequenceFrame.from_arrays(t, inten, d, k) for t in range(frames)]
    return Sequence(tuple(seq), k)
