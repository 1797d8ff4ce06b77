import os

import pytest
import torch

from finestyle.backbone import make_toy_backbone
from finestyle.synthetic import write_fixture_images

torch.set_num_threads(1)

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record_acceptance(criterion: int, status: str, detail: str) -> None:
    _ACCEPTANCE[criterion] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:4s} {detail}")


@pytest.fixture(scope="session")
def toy():
    return make_toy_backbone(0)


@pytest.fixture(scope="session")
def toy64():
    return make_toy_backbone(0).to(torch.float64)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    return write_fixture_images(tmp_path_factory.mktemp("fixtures") / "images")


def full_scale_paths():
    keys = ("FINESTYLE_SD_WEIGHTS", "FINESTYLE_CLIP_WEIGHTS", "FINESTYLE_STYLE30K")
    vals = {k: os.environ.get(k) for k in keys}
    return vals if all(vals.values()) else None
