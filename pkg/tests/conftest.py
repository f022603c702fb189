import os
import sys
import zlib

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from retide.model import WeightStore, build_retide_graph, build_unet_graph  # noqa: E402
from retide.quant import calibrate  # noqa: E402
from retide.tensor import TensorF32  # noqa: E402

NATURAL_IMAGES = (
    "astronaut", "camera", "coffee", "chelsea", "rocket",
    "brick", "grass", "gravel", "immunohistochemistry", "moon",
)


def random_image(rng, c, h, w, n=1):
    return TensorF32(rng.random((n, c, h, w), dtype=np.float32))


def random_qmodel(rng, cin=3, cout=3, widths=None, gain=None, calib_size=64):
    """Random weights, calibrated on one random image so exponents vary per draw."""
    g = build_unet_graph(cin, cout, widths) if widths else build_retide_graph(cin, cout)
    gain = rng.uniform(0.5, 2.0) if gain is None else gain
    ws = WeightStore.random(g, rng, gain)
    calib = random_image(rng, cin, calib_size, calib_size)
    return g, ws, calibrate(g, ws, [calib])


@pytest.fixture
def rng(request):
    # stable per-test seed
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


@pytest.fixture(scope="session")
def retide3():
    return build_retide_graph(3, 3)


@pytest.fixture(scope="session")
def small_qmodel():
    """A cheap three-stage model (granularity 8) for service/tiler plumbing tests."""
    rng = np.random.default_rng(7)
    return random_qmodel(rng, widths=(8, 16, 16), calib_size=32)[2]


@pytest.fixture(scope="session")
def retide_qmodel():
    rng = np.random.default_rng(11)
    return random_qmodel(rng, gain=1.0)[2]


@pytest.fixture(scope="session")
def natural_dir(tmp_path_factory):
    """Ten natural photographs from scikit-image's bundled data, as PNG files."""
    from PIL import Image
    import skimage.data

    d = tmp_path_factory.mktemp("natural")
    for name in NATURAL_IMAGES:
        Image.fromarray(getattr(skimage.data, name)()).save(d / f"{name}.png")
    return d


# --- acceptance summary: one PASS/FAIL line per criterion

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        prev = _ACCEPTANCE.get(crit)
        if prev in ("FAIL",):
            return
        _ACCEPTANCE[crit] = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE, key=lambda c: int(c.split()[0])):
        terminalreporter.write_line(f"criterion {crit}: {_ACCEPTANCE[crit]}")
