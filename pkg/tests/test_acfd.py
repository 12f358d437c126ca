import math

import pytest
import torch

from models import EmptyBatchError, GrlConfig, ModelConfig, ShapeError
from services.acfd import (
    ChannelAttention, Discriminator, FeatureDecomposer, MemoryBank, ProjectionHead, SpatialAttention,
    adversarial_loss, adversarial_loss_from_probs, channel_correlation, contrastive_loss,
    channel_attention, contrastive_terms, discriminate, grl_forward, grl_schedule, orthogonality_loss,
    scale_free_orthogonality_loss, spatial_attention
)
from services.backbone import Backbone


@pytest.fixture
def model_cfg():
    return ModelConfig(c_shared=8, c_private=16, c_f=12, d_proj=6)


def test_decomposition_shapes(model_cfg):
    torch.manual_seed(0)
    features = Backbone(model_cfg, 32)(torch.rand(2, 3, 32, 32))
    decomposed = FeatureDecomposer(model_cfg)(features)
    assert decomposed.shared.shape == decomposed.private.shape == decomposed.base.shape == (2, 12, 4, 4)


def test_attention_gates_are_in_unit_interval():
    x = torch.randn(2, 8, 6, 6)
    spatial = spatial_attention(x, SpatialAttention())
    channel = channel_attention(x, ChannelAttention(8))
    assert spatial.shape == (2, 1, 6, 6) and channel.shape == (2, 8, 1, 1)
    for gate in (spatial, channel):
        assert gate.min() >= 0.0 and gate.max() <= 1.0


def test_branch_rejects_wrong_channel_count(model_cfg):
    decomposer = FeatureDecomposer(model_cfg)
    with pytest.raises(ShapeError):
        decomposer.shared_branch(torch.rand(1, 5, 8, 8))


def test_grl_is_identity_forward_and_reverses_backward():
    x = torch.randn(3, 4, requires_grad=True)
    y = grl_forward(x, GrlConfig(lambda_grl=0.5))
    assert torch.equal(y, x)
    y.sum().backward()
    assert torch.allclose(x.grad, torch.full_like(x, -0.5))


def test_grl_with_zero_lambda_blocks_gradient():
    x = torch.randn(3, requires_grad=True)
    (grl_forward(x, GrlConfig(lambda_grl=0.0)) * 2).sum().backward()
    assert torch.count_nonzero(x.grad) == 0


def test_grl_schedule_warms_up_linearly():
    assert grl_schedule(0, 100, 1.0, 0.1).lambda_grl == 0.0
    assert grl_schedule(5, 100, 1.0, 0.1).lambda_grl == pytest.approx(0.5)
    assert grl_schedule(50, 100, 1.0, 0.1).lambda_grl == 1.0
    assert grl_schedule(0, 100, 0.8, 0.0).lambda_grl == 0.8


def test_adversarial_loss_from_probs_oracle():
    p_src = torch.tensor([0.9, 0.6])
    p_tgt = torch.tensor([0.2])
    expected = (math.log(0.9) + math.log(0.6)) / 2 + math.log(0.8)
    assert adversarial_loss_from_probs(p_src, p_tgt).item() == pytest.approx(expected, rel=1e-6)


def test_adversarial_loss_is_finite_at_saturation():
    value = adversarial_loss_from_probs(torch.tensor([0.0, 1.0]), torch.tensor([1.0]))
    assert torch.isfinite(value)


def test_adversarial_loss_on_uniform_discriminator():
    disc = Discriminator(4, hidden=8)
    torch.nn.init.zeros_(disc.mlp[-1].weight)
    torch.nn.init.zeros_(disc.mlp[-1].bias)
    feats = torch.randn(2, 4, 3, 3)
    value = adversarial_loss(feats, feats, disc, GrlConfig())
    assert value.item() == pytest.approx(2 * math.log(0.5), rel=1e-6)


def test_adversarial_loss_empty_batch():
    disc = Discriminator(4)
    with pytest.raises(EmptyBatchError):
        adversarial_loss(torch.zeros(0, 4, 2, 2), torch.zeros(1, 4, 2, 2), disc, GrlConfig())


def test_discriminator_class_head_width():
    assert Discriminator(4, 8, n_classes=5)(torch.randn(2, 4, 3, 3)).shape == (2, 6)


def test_contrastive_terms_matches_closed_form():
    pos = torch.tensor([0.5])
    neg = torch.tensor([[0.1, 0.9, -0.3]])
    valid = torch.tensor([[True, False, True]])
    tau = 0.2
    num = math.exp(0.5 / tau)
    expected = -math.log(num / (num + math.exp(0.1 / tau) + math.exp(-0.3 / tau)))
    assert contrastive_terms(pos, neg, valid, tau).item() == pytest.approx(expected, rel=1e-5)


def test_contrastive_without_negatives_is_zero():
    value = contrastive_terms(torch.tensor([0.7]), torch.zeros(1, 0), torch.zeros(1, 0, dtype=torch.bool), 0.1)
    assert value.item() == pytest.approx(0.0, abs=1e-6)


def test_contrastive_loss_fills_bank_and_is_differentiable():
    torch.manual_seed(0)
    private = torch.randn(2, 12, 4, 4, requires_grad=True)
    masks = torch.zeros(2, 16, 16)
    masks[:, :8] = 1
    bank = MemoryBank(6, 32)
    result = contrastive_loss(private, masks, torch.tensor([1, 2]), bank, ProjectionHead(12, 6), tau=0.1,
                              pixels_per_class=4, enqueue_cap=10)
    assert not result.no_pair and result.pixels > 0
    assert torch.isfinite(result.loss)
    result.loss.backward()
    assert private.grad is not None
    assert bank.size == 10


def test_contrastive_loss_rejects_bad_tau():
    with pytest.raises(ValueError):
        contrastive_loss(torch.randn(1, 4, 2, 2), torch.ones(1, 4, 4), torch.tensor([0]), MemoryBank(3, 4),
                         ProjectionHead(4, 3), tau=0.0)


def test_memory_bank_fifo_order_and_norm():
    bank = MemoryBank(2, 3)
    bank.enqueue(torch.tensor([[2.0, 0.0], [0.0, 3.0]]), torch.tensor([0, 1]))
    bank.enqueue(torch.tensor([[1.0, 1.0], [-4.0, 0.0]]), torch.tensor([2, 3]))
    embeddings, labels = bank.contents()
    assert labels.tolist() == [1, 2, 3]
    assert torch.allclose(embeddings.norm(dim=1), torch.ones(3))


def test_orthogonality_zero_for_disjoint_support():
    shared = torch.zeros(1, 3, 2, 2)
    private = torch.zeros(1, 3, 2, 2)
    shared[..., 0, :] = 1.0
    private[..., 1, :] = 2.0
    assert orthogonality_loss(shared, private).item() == 0.0


def test_orthogonality_one_for_identical_one_hot():
    unit = torch.zeros(2, 3, 2, 2)
    unit[:, 0, 0, 0] = 1.0
    assert orthogonality_loss(unit, unit.clone()).item() == pytest.approx(1.0)


def test_orthogonality_zero_norm_sample_contributes_nothing():
    shared = torch.zeros(2, 3, 2, 2)
    shared[1, 0, 0, 0] = 1.0
    assert orthogonality_loss(shared, shared.clone()).item() == pytest.approx(0.5)


def test_orthogonality_shape_mismatch():
    with pytest.raises(ShapeError):
        orthogonality_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4, 2, 2))


def test_channel_correlation_bounds():
    x = torch.randn(2, 4, 3, 3)
    assert channel_correlation(x, x) == pytest.approx(1.0, abs=1e-5)
    assert channel_correlation(x, torch.zeros_like(x)) == 0.0


def test_scale_free_orthogonality_ignores_feature_scale():
    torch.manual_seed(3)
    shared, private = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
    value = scale_free_orthogonality_loss(shared, private).item()
    assert 0.0 <= value <= 1.0
    assert scale_free_orthogonality_loss(10.0 * shared, 0.1 * private).item() == pytest.approx(value, rel=1e-5)


def test_scale_free_orthogonality_agrees_on_unit_features():
    unit = torch.zeros(2, 3, 2, 2)
    unit[1, 0, 0, 0] = 1.0
    assert scale_free_orthogonality_loss(unit, unit.clone()).item() == pytest.approx(0.5)
    assert scale_free_orthogonality_loss(3 * unit, unit.clone()).item() == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        scale_free_orthogonality_loss(torch.zeros(1, 3, 2, 2), torch.zeros(1, 4, 2, 2))


def test_scale_free_orthogonality_gradient_cannot_shrink_features():
    torch.manual_seed(4)
    shared = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    private = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    scale_free_orthogonality_loss(shared, private).backward()
    assert shared.grad.abs().sum() > 0
    assert (shared.grad * shared.detach()).sum().item() == pytest.approx(0.0, abs=1e-10)

    raw = shared.detach().clone().requires_grad_()
    orthogonality_loss(raw, private).backward()
    assert (raw.grad * raw.detach()).sum().item() > 0


def test_discriminate_pools_before_the_perceptron():
    torch.manual_seed(5)
    disc = Discriminator(4, hidden=8, n_classes=2)
    x = torch.randn(3, 4, 3, 3)
    permuted = x.flatten(2)[..., torch.randperm(9)].view_as(x)
    assert discriminate(x, disc).shape == (3, 3)
    assert torch.allclose(discriminate(x, disc), discriminate(permuted, disc), atol=1e-6)


def test_adversarial_gradient_paths(model_cfg):
    torch.manual_seed(6)
    with torch.no_grad():
        backbone = Backbone(model_cfg, 32)
        source_taps = backbone(torch.rand(2, 3, 32, 32))
        pseudo_taps = backbone(torch.rand(2, 3, 32, 32))
    decomposer = FeatureDecomposer(model_cfg)
    disc = Discriminator(model_cfg.c_f, hidden=8)

    def gradients(reversed_path: bool):
        decomposer.zero_grad(set_to_none=True)
        disc.zero_grad(set_to_none=True)
        shared_src = decomposer(source_taps).shared
        shared_tgt = decomposer(pseudo_taps).shared
        if reversed_path:
            loss = adversarial_loss(shared_src, shared_tgt, disc, GrlConfig(lambda_grl=0.5))
        else:
            loss = adversarial_loss_from_probs(torch.sigmoid(discriminate(shared_src, disc)[:, 0]),
                                               torch.sigmoid(discriminate(shared_tgt, disc)[:, 0]))
        loss.backward()
        branch = [p.grad.clone() for p in decomposer.shared_branch.parameters()]
        critic = [p.grad.clone() for p in disc.parameters()]
        private = [p.grad for p in decomposer.private_branch.parameters()]
        return branch, critic, private

    branch_rev, critic_rev, private_rev = gradients(True)
    branch_plain, critic_plain, _ = gradients(False)
    assert any(g.abs().sum() > 0 for g in branch_plain)
    for rev, plain in zip(branch_rev, branch_plain):
        assert torch.allclose(rev, -0.5 * plain, rtol=1e-5, atol=1e-7)
    for rev, plain in zip(critic_rev, critic_plain):
        assert torch.allclose(rev, plain, rtol=1e-5, atol=1e-7)
    assert all(g is None for g in private_rev)
