import pytest

from core.config import BackboneVariant, ModelConfig, SyntheticConfig, TrainConfig
from data.synthetic import generate_synthetic
from tests.helpers import apply_coverage_pattern


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(backbone_variant=BackboneVariant.TINY, pyramid_channels=8, input_size=(32, 32))


@pytest.fixture
def quick_train_config() -> TrainConfig:
    return TrainConfig(epochs=1, batch_size=16, epoch_fraction=1.0)


@pytest.fixture
def synthetic_config() -> SyntheticConfig:
    return SyntheticConfig(num_samples=70, val_samples=21, image_size=32)


@pytest.fixture
def synthetic_train(tmp_path, synthetic_config):
    return generate_synthetic(synthetic_config, tmp_path / "synthetic", split="train")


@pytest.fixture
def coverage_manifest(tmp_path):
    """100 个带图像的样本，覆盖为 VA 40 / EXPR 70 / AU 55"""
    base = generate_synthetic(
        SyntheticConfig(num_samples=100, val_samples=0, image_size=32), tmp_path / "coverage", split="cov"
    )
    return apply_coverage_pattern(base)
