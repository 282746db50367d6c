import numpy as np
import pytest

from adaptprop.features import SyntheticSpec, VideoRecord, generate_synthetic_dataset
from adaptprop.geometry import TemporalWindow


def make_video(length=1000, gts=((100, 200, 0),), dim=4, class_count=2, vid="v", feats=None):
    if feats is None:
        feats = np.zeros((length, dim), dtype=np.float32)
    gt = tuple((TemporalWindow(l, r), c) for l, r, c in gts)
    return VideoRecord(vid, feats, gt, class_count)


@pytest.fixture
def video():
    return make_video()


@pytest.fixture(scope="session")
def clean_spec():
    return SyntheticSpec(n_train=6, n_test=6, sigma=0.0, seed=11)


@pytest.fixture(scope="session")
def clean_videos(clean_spec):
    return generate_synthetic_dataset(clean_spec)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, with its measured numbers."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in rep.nodeid or rep.when != "call":
                continue
            name = rep.nodeid.split("::")[-1]
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((name, outcome.upper()[:4], detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict} {name}: {detail}")
