import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six small clips (4/1/1) for fast end-to-end checks."""
    from grfp.flowdata import SceneSpec, make_dataset

    root = tmp_path_factory.mktemp("tiny") / "ds"
    spec = SceneSpec(height=24, width=24, n_objects=(2, 3), object_size=(6, 10), max_speed=2,
                     distractor_size=(3, 5), extend_after=2, n_frames=3)
    make_dataset(root, 4, 1, 1, template=spec, master_seed=3)
    return root


def pytest_terminal_summary(terminalreporter):
    from report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
