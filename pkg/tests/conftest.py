import numpy as np
import pytest

from knnfuse import featurestore as fs


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        report._criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = getattr(report, "_criterion", None)
            if name:
                lines.append((name, "PASS" if report.passed else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, status in lines:
            terminalreporter.write_line(f"[{status}] {name}")


def make_bank(rng, n, dim, class_count, duplicate_rows=0, id_prefix="s"):
    """Random bank; optionally copy the first row over a few others to force ties."""
    feats = rng.standard_normal((n, dim)).astype(np.float32)
    for j in range(duplicate_rows):
        feats[(j + 1) * (n // (duplicate_rows + 1))] = feats[0]
    labels = rng.integers(0, class_count, n)
    labels[:class_count] = np.arange(class_count)  # every class inhabited
    return fs.FeatureBank(
        features=feats,
        labels=labels,
        class_count=class_count,
        ids=tuple(f"{id_prefix}{i}" for i in range(n)),
    )


def make_xor_bank(rng, n, id_prefix, sigma=0.3):
    """Four Gaussian blobs on (+-1, +-1); label 1 iff the center signs differ."""
    centers = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    center_labels = np.array([0, 1, 1, 0])
    per = n // 4
    feats = np.concatenate(
        [centers[c] + sigma * rng.standard_normal((per, 2)) for c in range(4)]
    )
    labels = np.concatenate([np.full(per, center_labels[c]) for c in range(4)])
    perm = rng.permutation(feats.shape[0])
    return fs.FeatureBank(
        features=feats[perm].astype(np.float32),
        labels=labels[perm],
        class_count=2,
        ids=tuple(f"{id_prefix}{i}" for i in range(feats.shape[0])),
    )


def make_blobs_bank(rng, n, id_prefix, sigma=0.15):
    """Three well-separated blobs in distinct directions; linearly separable."""
    centers = np.array([[2.0, 0.0], [-1.0, 1.8], [-1.0, -1.8]])
    per = n // 3
    feats = np.concatenate(
        [centers[c] + sigma * rng.standard_normal((per, 2)) for c in range(3)]
    )
    labels = np.concatenate([np.full(per, c) for c in range(3)])
    perm = rng.permutation(feats.shape[0])
    return fs.FeatureBank(
        features=feats[perm].astype(np.float32),
        labels=labels[perm],
        class_count=3,
        ids=tuple(f"{id_prefix}{i}" for i in range(feats.shape[0])),
    )


@pytest.fixture(scope="session")
def xor_splits():
    """The end-to-end fixture: 400 train / 100 val / 400 test, seed 0."""
    rng = np.random.default_rng(0)
    train = make_xor_bank(rng, 400, "xor-train-")
    val = make_xor_bank(rng, 100, "xor-val-")
    test = make_xor_bank(rng, 400, "xor-test-")
    return train, val, test
