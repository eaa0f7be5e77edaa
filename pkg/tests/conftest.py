"""
Shared fixtures
"""
import pytest

from contextrast.config import TrainConfig

TINY = """
image_size=16
batch_size=2
total_iterations=2
eval_samples=2
positives_per_class=16
negative_cap=32
embed_dim=8
log_every=1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    """Run config file with small images and a two-iteration schedule"""
    path = tmp_path / 'tiny.cfg'
    path.write_text(TINY, encoding='utf-8')
    return path


@pytest.fixture
def default_config():
    return TrainConfig()
