from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_SYNTH = {
    "seed": 11,
    "scene": {
        "extent": [-80.0, -80.0, 320.0, 320.0],
        "random": {"n_bumps": 3, "n_buildings": 3, "sigma": [80.0, 150.0], "amplitude": [-8.0, 15.0]},
    },
    "camera": {"width": 96, "height": 64, "fx": 110.0},
    "flight": {"altitude": 150.0, "forward_overlap": 0.2, "side_overlap": 0.4, "jitter_deg": 0.5},
    "aoi": [0.0, 0.0, 240.0, 240.0],
    "tie_points": {"n_points": 3000, "pixel_noise": 0.0},
    "mono": {"warp": [1.0, 0.0, 0.002, 1.0], "kind": "relative", "warp_jitter": 0.05},
}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A small noise-free synthetic dataset written through the CLI."""
    import json

    from lowoverlap.cli import main

    root = tmp_path_factory.mktemp("small")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SMALL_SYNTH))
    assert main(["synth", str(spec), str(root / "data")]) == 0
    return root / "data" / "manifest.json"


@pytest.fixture(scope="session")
def planar_dataset(tmp_path_factory):
    """Like ``small_dataset`` but on sloped planar terrain, where bilinear
    sampling of the mono map at tie points is exact up to perspective."""
    import json

    from lowoverlap.cli import main

    spec = json.loads(json.dumps(SMALL_SYNTH))
    spec["scene"]["random"]["n_bumps"] = 0
    root = tmp_path_factory.mktemp("planar")
    (root / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", str(root / "spec.json"), str(root / "data")]) == 0
    return root / "data" / "manifest.json"


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
