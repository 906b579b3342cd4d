import numpy as np
import pytest

from omnikit import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ad.precision(64):
        yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny mono dataset: 1 scene, 2 training paths of 4 frames, 2-frame test path."""
    from omnikit import panosim

    root = tmp_path_factory.mktemp("ds_small")
    cfg = panosim.GenConfig(seed=5, height=16, width=32, train_paths=2, frames_per_path=4, test_frames=2,
                            buildings=6, trees=4, vehicles=3, pedestrians=3)
    man = panosim.generate_dataset(cfg, root)
    return root, man, cfg


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the end-of-run summary.

    A criterion starts as FAIL so that an exception inside the test still
    leaves a line in the summary.
    """
    results = request.config.stash[ACCEPTANCE]

    def record(number: int, checks: dict, detail: str = ""):
        failed = [name for name, ok in checks.items() if not ok]
        results[number] = (not failed, detail if not failed else f"failed: {', '.join(failed)}; {detail}")
        print(f"criterion {number}: {'PASS' if not failed else 'FAIL'} {results[number][1]}")
        assert not failed, failed

    def start(number: int):
        results[number] = (False, "did not complete")

    record.start = start
    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
