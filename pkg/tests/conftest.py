import numpy as np
import pytest
import torch

from i2gfp.matting_core import composite, save_alpha, save_rgb
from i2gfp.synthetic import make_samples, smooth_field, soft_blob_alpha

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_samples():
    return make_samples(4, size=64, seed=0, radius=3)


def write_toy_corpus(root, n_fg=2, n_bg=3, size=40, seed=0):
    """Foreground/alpha/background PNG directories for composition tests."""
    r = np.random.default_rng(seed)
    dirs = {k: root / k for k in ("fg", "alpha", "bg")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i in range(n_fg):
        save_rgb(dirs["fg"] / f"obj{i}.png", smooth_field(r, size))
        save_alpha(dirs["alpha"] / f"obj{i}.png", soft_blob_alpha(r, size))
    for j in range(n_bg):
        save_rgb(dirs["bg"] / f"scene{j}.png", smooth_field(r, size + 8 * j, sigma=3.0)[: size + 8 * j - 4])
    return dirs


@pytest.fixture
def toy_corpus(tmp_path):
    return write_toy_corpus(tmp_path / "corpus")
