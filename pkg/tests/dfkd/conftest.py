import pytest
import torch

from muse_distill.dfkd.datasets import LabeledImages
from muse_distill.dfkd.models import build_network
from muse_distill.dfkd.schema import DatasetFormat, DatasetHandle, NetworkSpec, TrainConfig
from tests.dfkd.test_data.generate_test_data import reference_embedding_table


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs longer than a few seconds")


# --- Configuration minimale ---

TINY_CONFIG = dict(
    epochs=2, iters_g=1, steps_g=1, iters_s=4, resolutions=[8], batch_sizes=[4],
    alpha_ce=0.5, alpha_adv=1.3, alpha_bn=10.0, alpha_cam=0.1, alpha_ed=10.0, alpha_aed=5.0,
    r_i=0.015, r_o=0.03, data_ratio=0.5, seed=0,
    num_classes=4, channels=1, base_resolution=8, dataset_size=100, embedding_dim=8,
    generator_base_channels=8, teacher_widths=[4, 8], student_widths=[4, 8],
)


@pytest.fixture
def make_config(tmp_path):
    """Fabrique de TrainConfig minuscule ; les arguments nommés remplacent les valeurs par défaut."""
    def _make(**overrides) -> TrainConfig:
        values = dict(TINY_CONFIG, out_dir=str(tmp_path / "run"))
        values.update(overrides)
        return TrainConfig(**values)
    return _make


@pytest.fixture
def tiny_teacher():
    spec = NetworkSpec(role="teacher", in_channels=1, num_classes=4, widths=[4, 8])
    return build_network(spec, seed=11)


@pytest.fixture
def tiny_student():
    spec = NetworkSpec(role="student", in_channels=1, num_classes=4, widths=[4, 8])
    return build_network(spec, seed=12)


@pytest.fixture
def tiny_test_set():
    gen = torch.Generator().manual_seed(3)
    images = torch.randn(20, 1, 8, 8, generator=gen)
    labels = torch.randint(0, 4, (20,), generator=gen)
    handle = DatasetHandle(name="synthetic", split="test", source_format=DatasetFormat.IDX,
                           image_shape=(1, 8, 8), num_classes=4, mean=[0.0], std=[1.0],
                           images_path=["memory"], labels_path="memory")
    return LabeledImages(images, labels, handle)


@pytest.fixture
def reference_table():
    return reference_embedding_table()
