import numpy as np
import pytest


@pytest.fixture
def rng():
    """numpy generator for test inputs; the package itself never uses numpy randomness."""
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_ds():
    """24 synthetic faces, 4 per class, split 2/1/1 per class."""
    from cnneelm.dataio import split, synth_dataset
    from cnneelm.numerics import Rng

    return split(synth_dataset(Rng(0), 4), (0.5, 0.25, 0.25), Rng(1))


TINY = dict(epochs=2, conv_channels=(2,), hidden=6, elm_hidden=20, forest_trees=2, forest_depth=2)


@pytest.fixture(scope="session")
def tiny_bundles(tiny_ds):
    """One small trained bundle per head kind, sharing the same network."""
    from cnneelm.trainer import TrainConfig, refit_head, train

    cfg = TrainConfig(**TINY)
    elm, _ = train(cfg, tiny_ds, "elm")
    return {
        "elm": elm,
        "forest": refit_head(elm, tiny_ds, "forest", cfg),
        "softmax": refit_head(elm, tiny_ds, "softmax", cfg),
    }


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, after the run."""
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.TITLES):
        if n in mod.RESULTS:
            ok, note = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {mod.TITLES[n]}  {note}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {mod.TITLES[n]}")
