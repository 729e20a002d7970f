import pytest

from ecgdiff.dataset import build_splits, synth_corpus, write_synthetic_corpus
from ecgdiff.training import TrainConfig, train

_RESULTS_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_RESULTS_KEY] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed = rep.failed
    if rep.when == "call" or (rep.when == "setup" and failed):
        detail = dict(item.user_properties).get("detail", "")
        item.config.stash[_RESULTS_KEY].append((mark.args[0], mark.args[1], not failed, detail))


def pytest_terminal_summary(terminalreporter, config):
    results = sorted(config.stash.get(_RESULTS_KEY, []))
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in results:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Small corpus on disk plus a briefly trained checkpoint, for CLI tests."""
    root = tmp_path_factory.mktemp("tiny")
    manifest = write_synthetic_corpus(root / "corpus", n_records=8, seconds=20.0, seed=2, n_test=2,
                                      n_noise=2, noise_seconds=60.0)
    from ecgdiff.dataset import load_manifest, prepare

    split = prepare(load_manifest(manifest))
    split.save(root / "data")
    cfg = TrainConfig(epochs=2, batch_size=16, T=10, model={"channels": 8, "blocks": 1})
    result = train(cfg, split, root / "run")
    return {"root": root, "manifest": manifest, "data": root / "data",
            "checkpoint": result.checkpoint_path, "split": split}


TOY_CONFIG = dict(epochs=30, batch_size=32, T=20, seed=0, lr_decay_every=1000,
                  model={"channels": 16, "blocks": 2})


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Scaled-down end-to-end experiment: about 2000 synthetic patches, C=16, B=2, T=20."""
    import time

    root = tmp_path_factory.mktemp("toy")
    clean, noises = synth_corpus(50, 60.0, seed=1, band_level=0.5)
    split = build_splits(clean, [c.id for c in clean[-4:]], 0, noises)
    split.save(root / "data")
    t0 = time.perf_counter()
    result = train(TrainConfig(**TOY_CONFIG), split, root / "run")
    return {"root": root, "split": split, "result": result, "data": root / "data",
            "checkpoint": result.checkpoint_path, "train_seconds": time.perf_counter() - t0}
