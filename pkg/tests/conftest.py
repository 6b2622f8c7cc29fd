import numpy as np
import pytest

from sparseq.tagcore import TagGraph, build_adjacency, gen_planted_dataset


def make_graph(n, edges, x, labels=None, n_classes=2, task="classification", splits=None, texts=None):
    """Small hand-built graph; default split puts every node in train and the last in val."""
    x = np.asarray(x, dtype=np.float32)
    if labels is None:
        labels = np.arange(n) % n_classes
    labels = np.asarray(labels, dtype=np.int64 if task == "classification" else np.float64)
    if splits is None:
        train = np.ones(n, bool)
        train[-1] = False
        val = ~train
        test = np.zeros(n, bool)
    else:
        train, val, test = (np.asarray(s, bool) for s in splits)
    return TagGraph(
        n_nodes=n,
        adjacency=build_adjacency(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2)),
        features_base=x,
        task=task,
        labels=labels,
        label_mask=train | val | test,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        n_classes=n_classes if task == "classification" else 0,
        texts=texts,
    )


def random_graph(n, d, c, seed, p=0.3, task="classification"):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    hit = rng.random(iu.size) < p
    edges = np.stack([iu[hit], ju[hit]], 1)
    order = rng.permutation(n)
    third = max(1, n // 3)
    train = np.zeros(n, bool)
    val = np.zeros(n, bool)
    test = np.zeros(n, bool)
    train[order[:third]] = True
    val[order[third:2 * third]] = True
    test[order[2 * third:]] = True
    labels = rng.integers(0, c, n) if task == "classification" else rng.standard_normal(n)
    return make_graph(n, edges, rng.standard_normal((n, d)), labels, c, task, (train, val, test))


@pytest.fixture(scope="session")
def planted():
    return gen_planted_dataset(60, 8, 3, 6, 6.0, 0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
