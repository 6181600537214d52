import os
from pathlib import Path

import numpy as np
import pytest

from mnagt import Graph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tudataset_dir(name):
    """Locate real TUDataset files, or None; checked in MNAGT_DATA_DIR,
    tests/data, and ./data."""
    candidates = []
    env = os.environ.get("MNAGT_DATA_DIR")
    if env:
        candidates.append(Path(env) / name)
    candidates.append(Path(__file__).parent / "data" / name)
    candidates.append(Path("data") / name)
    for candidate in candidates:
        if (candidate / f"{name}_A.txt").is_file():
            return candidate
    return None


def require_tudataset(name):
    directory = tudataset_dir(name)
    if directory is None:
        pytest.skip(
            f"{name} TUDataset files not found (set MNAGT_DATA_DIR or place them "
            f"under tests/data/{name}); this sandbox has no dataset network access"
        )
    return directory


def make_fixture_files(directory, name="FIXTURE"):
    """Hand-written two-graph dataset: a triangle and a single edge.

    Node labels {5, 7} become one-hot features of width 2; graph labels
    {7, 9} must be remapped to {0, 1}.
    """
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{name}_A.txt").write_text(
        "1, 2\n2, 1\n1, 3\n3, 1\n2, 3\n3, 2\n4, 5\n5, 4\n"
    )
    (directory / f"{name}_graph_indicator.txt").write_text("1\n1\n1\n2\n2\n")
    (directory / f"{name}_graph_labels.txt").write_text("7\n9\n")
    (directory / f"{name}_node_labels.txt").write_text("5\n5\n7\n5\n7\n")
    return directory


@pytest.fixture
def fixture_dataset(tmp_path):
    name = "FIXTURE"
    return make_fixture_files(tmp_path / name, name), name


def random_graph(rng, n, feature_dim, p_edge=0.5, label=0):
    edges = tuple(
        (i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p_edge
    )
    return Graph(
        n=n, edges=edges, features=rng.normal(size=(n, feature_dim)), label=label
    )
