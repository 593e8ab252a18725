import pytest

from spatial_tts.images import ImageStore
from spatial_tts.oracle import OracleVLM
from spatial_tts.scene import bundled_scene_dir, load_scenes, render_image
from spatial_tts.world import OracleWorldModel

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def scenes():
    return load_scenes(bundled_scene_dir())


@pytest.fixture
def store():
    return ImageStore()


@pytest.fixture
def oracle(scenes, store):
    """(world, vlm) over the bundled scenes, sharing ``store``; start views preloaded."""
    for s in scenes:
        store.put(render_image(s, s.camera_start))
    return OracleWorldModel(scenes, store), OracleVLM(scenes, store)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
