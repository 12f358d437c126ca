"""
Numerical Self-Checks
Invariant suite behind `cli.py check`: gradient reversal, orthogonality,
fusion normalization, modulation identity and loss oracles
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List

import torch

from models import GrlConfig, TrainConfig
from services.acfd import (
    DecomposedFeatures, Discriminator, MemoryBank, _ReverseGradient,
    adversarial_loss_from_probs, contrastive_terms, grl_forward, orthogonality_loss,
    scale_free_orthogonality_loss
)
from services.cam import CrossAdaptiveModulation
from services.mgdf import MatrixGuidedFusion
from services.trainer import disc_loss, main_loss

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
FD_RTOL = 1e-4
ORACLE_RTOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ''


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


# =============================================================================
# CHECKS
# =============================================================================

def check_grl_gradient(corrupt: bool = False) -> CheckResult:
    """Gradient through the GRL equals -lambda times the central finite difference"""
    gen = torch.Generator().manual_seed(0)
    lam = 0.7
    x = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)

    def objective(t: torch.Tensor) -> torch.Tensor:
        return (torch.sin(t) * w).sum()

    if corrupt:
        reversed_x = _ReverseGradient.apply(x, -lam)
    else:
        reversed_x = grl_forward(x, GrlConfig(lambda_grl=lam))
    (analytic,) = torch.autograd.grad(objective(reversed_x), x)

    numeric = torch.zeros_like(x)
    flat, base = numeric.view(-1), x.detach().clone().view(-1)
    for i in range(base.numel()):
        plus, minus = base.clone(), base.clone()
        plus[i] += FD_STEP
        minus[i] -= FD_STEP
        flat[i] = (objective(plus.view_as(x)) - objective(minus.view_as(x))) / (2 * FD_STEP)
    expected = -lam * numeric
    err = ((analytic - expected).norm() / expected.norm()).item()
    return CheckResult('grl_gradient', err < FD_RTOL, f"rel_err={err:.2e}")


def check_orthogonality() -> CheckResult:
    """0 on spatially disjoint S and P, 1 on identical unit one-hot features"""
    shared = torch.zeros(1, 4, 4, 4)
    private = torch.zeros(1, 4, 4, 4)
    shared[..., :2] = torch.rand(1, 4, 4, 2, generator=torch.Generator().manual_seed(1)) + 0.1
    private[..., 2:] = torch.rand(1, 4, 4, 2, generator=torch.Generator().manual_seed(2)) + 0.1
    zero = orthogonality_loss(shared, private).item()

    unit = torch.zeros(1, 4, 4, 4)
    unit[0, 1, 2, 3] = 1.0
    one = orthogonality_loss(unit, unit.clone()).item()
    passed = abs(zero) < 1e-7 and abs(one - 1.0) < 1e-6
    return CheckResult('orthogonality', passed, f"disjoint={zero:.2e} identical={one:.6f}")


def check_orthogonality_oracle() -> CheckResult:
    """Random batch against a per-sample double loop; the scale-free form ignores rescaling"""
    gen = torch.Generator().manual_seed(11)
    shared = torch.randn(3, 4, 3, 3, generator=gen, dtype=torch.float64)
    private = torch.randn(3, 4, 3, 3, generator=gen, dtype=torch.float64)
    value = orthogonality_loss(shared, private).item()

    per_sample = []
    for n in range(shared.shape[0]):
        s = shared[n].reshape(4, -1).tolist()     # channel rows over pixels
        p = private[n].reshape(4, -1).tolist()
        cross = sum(sum(a * b for a, b in zip(s[i], p[j])) ** 2 for i in range(4) for j in range(4))
        norm_s = math.sqrt(sum(v * v for row in s for v in row))
        norm_p = math.sqrt(sum(v * v for row in p for v in row))
        per_sample.append(cross / (norm_s * norm_p))
    err = _rel_err(value, sum(per_sample) / len(per_sample))

    free = scale_free_orthogonality_loss(shared, private).item()
    rescaled = scale_free_orthogonality_loss(7.0 * shared, 0.2 * private).item()
    expected_free = sum(v / (torch.linalg.matrix_norm(shared[n].flatten(1)).item()
                             * torch.linalg.matrix_norm(private[n].flatten(1)).item())
                        for n, v in enumerate(per_sample)) / len(per_sample)
    free_err = max(_rel_err(free, expected_free), _rel_err(free, rescaled))
    passed = err <= ORACLE_RTOL and free_err <= ORACLE_RTOL and 0.0 <= free <= 1.0
    return CheckResult('orthogonality_oracle', passed, f"rel_err={err:.2e} scale_free_rel_err={free_err:.2e}")


def _random_features(c_f: int, size: int, seed: int, dtype=torch.float32) -> DecomposedFeatures:
    gen = torch.Generator().manual_seed(seed)
    parts = [torch.randn(2, c_f, size, size, generator=gen, dtype=dtype) for _ in range(3)]
    return DecomposedFeatures(base=parts[0], shared=parts[1], private=parts[2])


def check_fusion_normalization() -> CheckResult:
    torch.manual_seed(3)
    fusion = MatrixGuidedFusion(6)
    f = _random_features(6, 5, 3)
    with torch.no_grad():
        total = fusion.fusion_weights(fusion.fuse_concat(f)).stacked().sum(dim=1)
    err = (total - 1).abs().max().item()
    return CheckResult('fusion_normalization', err <= 1e-6, f"max|sum-1|={err:.2e}")


def check_fusion_oracle() -> CheckResult:
    """Fused output against a per-pixel scalar re-computation"""
    torch.manual_seed(4)
    c = 3
    fusion = MatrixGuidedFusion(c).double()
    f = _random_features(c, 3, 4, torch.float64)
    with torch.no_grad():
        fused = fusion(f)
        f_c = fusion.fuse_concat(f)
        logits = fusion.fusion_logits(f_c)
    reduce_w = fusion.reduce.weight.detach()[:, :, 0, 0]
    reduce_b = fusion.reduce.bias.detach()
    enh_w = fusion.enhance.weight.detach()[:, :, 0, 0]
    enh_b = fusion.enhance.bias.detach()

    worst = 0.0
    b, _, h, w = f.base.shape
    for n in range(b):
        for y in range(h):
            for x in range(w):
                stacked = [float(v) for part in (f.base, f.shared, f.private) for v in part[n, :, y, x]]
                fc = [float(reduce_b[o]) + sum(float(reduce_w[o, i]) * stacked[i] for i in range(3 * c))
                      for o in range(c)]
                exps = [math.exp(float(logits[n, j, y, x])) for j in range(3)]
                wb, ws, wp = (e / sum(exps) for e in exps)
                for o in range(c):
                    g = fc[o] + float(enh_b[o]) + sum(float(enh_w[o, i]) * fc[i] for i in range(c))
                    value = (wp * float(f.private[n, o, y, x]) + ws * float(f.shared[n, o, y, x])
                             + wb * float(f.base[n, o, y, x]) + g)
                    worst = max(worst, abs(value - float(fused[n, o, y, x])))
    return CheckResult('fusion_oracle', worst <= 1e-5, f"max_abs_err={worst:.2e}")


def check_fusion_gradients() -> CheckResult:
    torch.manual_seed(5)
    fusion = MatrixGuidedFusion(2).double()
    f = _random_features(2, 3, 5, torch.float64)
    inputs = tuple(t.requires_grad_() for t in (f.base, f.shared, f.private))

    def fn(base, shared, private):
        return fusion(DecomposedFeatures(base=base, shared=shared, private=private))

    try:
        ok = torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-5, rtol=FD_RTOL)
    except RuntimeError as e:
        return CheckResult('fusion_gradients', False, str(e).splitlines()[0])
    return CheckResult('fusion_gradients', bool(ok), 'gradcheck')


def check_modulation_identity() -> CheckResult:
    torch.manual_seed(6)
    cam = CrossAdaptiveModulation(4)
    f = _random_features(4, 4, 6)
    with torch.no_grad():
        out = cam(f.shared, f.private)
    return CheckResult('modulation_identity', torch.equal(out, f.private), 'gamma=beta=0')


def check_adversarial_oracle() -> CheckResult:
    gen = torch.Generator().manual_seed(7)
    worst = 0.0
    for _ in range(10):
        p_src = torch.rand(5, generator=gen, dtype=torch.float64)
        p_tgt = torch.rand(4, generator=gen, dtype=torch.float64)
        value = adversarial_loss_from_probs(p_src, p_tgt).item()
        clamp = [min(max(float(p), 1e-7), 1 - 1e-7) for p in p_src]
        clamp_t = [min(max(float(p), 1e-7), 1 - 1e-7) for p in p_tgt]
        oracle = sum(math.log(p) for p in clamp) / len(clamp) + sum(math.log(1 - p) for p in clamp_t) / len(clamp_t)
        worst = max(worst, _rel_err(value, oracle))
    return CheckResult('adversarial_oracle', worst <= ORACLE_RTOL, f"max_rel_err={worst:.2e}")


def check_contrastive_oracle() -> CheckResult:
    gen = torch.Generator().manual_seed(8)
    tau = 0.1
    worst = 0.0
    for _ in range(10):
        pos = torch.rand(6, generator=gen, dtype=torch.float64) * 2 - 1
        neg = torch.rand(6, 9, generator=gen, dtype=torch.float64) * 2 - 1
        valid = torch.rand(6, 9, generator=gen) > 0.3
        value = contrastive_terms(pos, neg, valid, tau).mean().item()
        terms = []
        for i in range(6):
            num = math.exp(float(pos[i]) / tau)
            den = num + sum(math.exp(float(neg[i, j]) / tau) for j in range(9) if valid[i, j])
            terms.append(-math.log(num / den))
        worst = max(worst, _rel_err(value, sum(terms) / len(terms)))
    return CheckResult('contrastive_oracle', worst <= ORACLE_RTOL, f"max_rel_err={worst:.2e}")


def check_bank_unit_norm() -> CheckResult:
    bank = MemoryBank(8, 16)
    gen = torch.Generator().manual_seed(9)
    for _ in range(3):
        bank.enqueue(torch.randn(7, 8, generator=gen) * 5, torch.zeros(7, dtype=torch.long))
    embeddings, _ = bank.contents()
    err = (embeddings.norm(dim=1) - 1).abs().max().item()
    return CheckResult('bank_unit_norm', err <= 1e-5 and bank.size == 16, f"max|norm-1|={err:.2e} size={bank.size}")


def check_uniform_discriminator() -> CheckResult:
    """A discriminator stuck at 0.5 costs exactly 2 log 2"""
    disc = Discriminator(4, hidden=8)
    torch.nn.init.zeros_(disc.mlp[-1].weight)
    torch.nn.init.zeros_(disc.mlp[-1].bias)
    feats = torch.randn(3, 4, 2, 2, generator=torch.Generator().manual_seed(10))
    value = disc_loss(feats, feats.clone(), disc).total.item()
    err = abs(value - 2 * math.log(2))
    return CheckResult('uniform_discriminator', err <= 1e-6, f"loss={value:.6f}")


def check_composite_loss_oracle() -> CheckResult:
    """main_loss total against the weighted sum recomputed from its logged components"""
    gen = torch.Generator().manual_seed(12)
    worst = 0.0
    for _ in range(10):
        weights = (torch.rand(4, generator=gen, dtype=torch.float64) * 2).tolist()
        cfg = TrainConfig(lambda_ce=weights[0], lambda_adv=weights[1], lambda_cont=weights[2],
                          lambda_ortho=weights[3])
        components = (torch.rand(4, generator=gen, dtype=torch.float64) * 3 - 1).unbind()
        bundle = main_loss(components[0], cfg, adv=components[1], cont=components[2], ortho=components[3])
        row = bundle.row()
        oracle = sum(w * row[name] for w, name in zip(weights, ('ce', 'adv', 'cont', 'ortho')))
        worst = max(worst, abs(bundle.total.item() - oracle))
    return CheckResult('composite_loss_oracle', worst <= 1e-7, f"max_abs_err={worst:.2e}")


def registered_checks(corrupt_grl: bool = False) -> List[Callable[[], CheckResult]]:
    return [
        lambda: check_grl_gradient(corrupt=corrupt_grl),
        check_orthogonality,
        check_orthogonality_oracle,
        check_fusion_normalization,
        check_fusion_oracle,
        check_fusion_gradients,
        check_modulation_identity,
        check_adversarial_oracle,
        check_contrastive_oracle,
        check_bank_unit_norm,
        check_uniform_discriminator,
        check_composite_loss_oracle,
    ]


def run_checks(corrupt_grl: bool = False) -> List[CheckResult]:
    results = []
    for check in registered_checks(corrupt_grl):
        try:
            result = check()
        except Exception as e:
            result = CheckResult(getattr(check, '__name__', 'check'), False, f"{type(e).__name__}: {e}")
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"[check] {result.name}: {'PASS' if result.passed else 'FAIL'} {result.detail}")
        results.append(result)
    return results
