"""Shared fixtures: a tiny untrained model for mechanics, a pretrained desk model for behaviour."""

import numpy as np
import pytest
from hypothesis import settings

from atha.backbone import ClipModel
from atha.config import PretrainConfig, VitConfig
from atha.data import DomainSpec, gen_synthetic_domains
from atha.pretrain import pretrain

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

TINY = VitConfig(image_size=16, patch_size=4, depth=2, width=8, heads=2, text_dim=6, n_classes_max=12)
DESK = VitConfig(width=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return ClipModel.create(TINY, 7)


@pytest.fixture(scope="session")
def tiny_domains():
    return gen_synthetic_domains(DomainSpec(images_per_class=22, image_size=16), 3)


@pytest.fixture(scope="session")
def desk_domains():
    return gen_synthetic_domains(DomainSpec(), 0)


@pytest.fixture(scope="session")
def desk_pretrained(desk_domains):
    """Width-32 backbone pretrained on the default source domain (about a minute)."""
    source, _ = desk_domains
    return pretrain(source, DESK, PretrainConfig(epochs=150), 0)


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def report():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
