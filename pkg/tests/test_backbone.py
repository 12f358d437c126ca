import pytest
import torch

from models import ModelConfig, ShapeError
from services.backbone import Backbone
from utils.runtime import parameter_checksum


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    return Backbone(ModelConfig(c_shared=8, c_private=16, c_f=12), image_size=32)


def test_tap_shapes(backbone):
    features = backbone(torch.rand(2, 3, 32, 32))
    assert features.low.shape == (2, 8, 8, 8)
    assert features.high.shape == (2, 16, 4, 4)
    assert features.base.shape == (2, 12, 4, 4)


def test_single_image_is_batched(backbone):
    assert backbone(torch.rand(3, 32, 32)).base.shape[0] == 1


@pytest.mark.parametrize('shape', [(2, 1, 32, 32), (2, 3, 16, 16), (3, 32)])
def test_wrong_input_shape(backbone, shape):
    with pytest.raises(ShapeError):
        backbone(torch.rand(*shape))


def test_freeze_is_idempotent_and_stays_in_eval(backbone):
    backbone.freeze()
    checksum = parameter_checksum(backbone)
    backbone.freeze()
    backbone.train()
    assert not backbone.training
    assert all(not p.requires_grad for p in backbone.parameters())
    assert parameter_checksum(backbone) == checksum
