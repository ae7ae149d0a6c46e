# Fichier : tests/dfkd/test_acceptance.py
"""
Reproductions directionnelles sur MNIST (lentes, ignorées sans les fichiers IDX).
Lancer avec : MUSE_MNIST_DIR=data/mnist pytest -m slow tests/dfkd/test_acceptance.py
"""
import copy
import os
import statistics
from pathlib import Path

import pytest

from muse_distill.dfkd.cli import load_config
from muse_distill.dfkd.datasets import handle_from_config, load_dataset
from muse_distill.dfkd.trainer import train, train_teacher

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"
MNIST_DIR = Path(os.getenv("MUSE_MNIST_DIR", "data/mnist"))
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
SEEDS = (0, 1, 2)
# budget réduit : même d_r, mêmes résolutions, moins d'époques
EPOCHS = int(os.getenv("MUSE_ACCEPTANCE_EPOCHS", "10"))

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(
        not all((MNIST_DIR / f).exists() for f in MNIST_FILES.values()),
        reason=f"fichiers MNIST absents de {MNIST_DIR}",
    ),
]


def _config(name, out_dir, **overrides):
    config = load_config(str(CONFIG_DIR / name))
    paths = {key: str(MNIST_DIR / f) for key, f in MNIST_FILES.items()}
    return config.model_copy(update=dict(paths, out_dir=str(out_dir), epochs=EPOCHS, **overrides))


@pytest.fixture(scope="module")
def mnist(tmp_path_factory):
    config = _config("mnist_muse.cfg", tmp_path_factory.mktemp("teacher"))
    train_set = load_dataset(handle_from_config(config, "train"))
    test_set = load_dataset(handle_from_config(config, "test"))
    teacher, top1 = train_teacher(config, train_set, test_set)
    return teacher, top1, test_set


@pytest.fixture(scope="module")
def median_top1(mnist, tmp_path_factory):
    teacher, top1, test_set = mnist
    cache = {}

    def _median(name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in cache:
            scores = []
            for seed in SEEDS:
                out_dir = tmp_path_factory.mktemp(f"{Path(name).stem}_{seed}")
                config = _config(name, out_dir, seed=seed, **overrides)
                result = train(config, copy.deepcopy(teacher), test_set=test_set,
                               teacher_meta={"test_top1": top1})
                scores.append(result.final_top1)
            cache[key] = statistics.median(scores)
        return cache[key]

    return _median


def test_teacher_reaches_97(mnist):
    _, top1, _ = mnist
    assert top1 >= 97.0


def test_low_resolution_beats_full_resolution_baseline(median_top1):
    muse = median_top1("mnist_muse.cfg")
    baseline = median_top1("mnist_baseline.cfg")
    assert muse > 80.0
    assert muse >= baseline + 3.0


def test_cam_loss_does_not_lower_median(median_top1):
    assert median_top1("mnist_muse.cfg") >= median_top1("mnist_muse.cfg", alpha_cam=0.0)
