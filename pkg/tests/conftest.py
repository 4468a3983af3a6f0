from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from robotic_clip.dataprep import CenteredBoxSegmenter, build_manifest, load_manifest
from robotic_clip.synthetic import make_corpus
from robotic_clip.text import RuleTagger

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root, num_videos=8, num_frames=6, seed=3)
    return root


@pytest.fixture(scope="session")
def small_manifest(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep") / "manifest.jsonl"
    build_manifest(small_corpus, out, RuleTagger(), CenteredBoxSegmenter())
    return out


@pytest.fixture(scope="session")
def small_entries(small_manifest):
    return load_manifest(small_manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
