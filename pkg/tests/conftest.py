import sys

import pytest

from eps_wsss import synthdata as sd
from eps_wsss.model import ClassifierConfig, init_params


def small_scene_config(**kw):
    base = dict(height=16, width=16, size_range=(4, 6), instances=(2, 3),
                cooccurrence=[sd.CooccurrenceRule(cls=2, context=1, prob=1.0, thickness=3)])
    base.update(kw)
    return sd.SceneConfig(**base)


@pytest.fixture
def small_scene():
    # seed chosen so that more than one class is present
    cfg = small_scene_config(seed=3)
    for i in range(50):
        s = sd.generate_scene(cfg, i)
        if s.labels.sum() >= 2:
            return s
    raise AssertionError("no multi-class scene")


@pytest.fixture
def random_params():
    return init_params(ClassifierConfig(num_classes=3, hidden=[8, 8], seed=1))


def random_maps(rng, c, h, w):
    return rng.uniform(0.0, 1.0, size=(c + 1, h, w))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
