# Fichier : tests/dfkd/test_losses.py
import math

import pytest
import torch

from muse_distill.core.exceptions import GradientError, ShapeError
from muse_distill.dfkd.diffcore import BatchNormState, OperatorKind, apply_operator, grad_check
from muse_distill.dfkd.losses import (
    adv_loss, bn_reg_loss, bounding_loss_ed, build_target_mask, cam_from_features, cam_latent, cam_loss,
    ce_loss, generator_total_loss, kd_kl_loss, margin_loss_aed, student_total_loss,
)
from muse_distill.dfkd.models import ClassEmbeddingTable, build_network
from muse_distill.dfkd.pool import SyntheticBatch
from muse_distill.dfkd.schema import EmbeddingSource, LossWeights, MaskKind, NetworkSpec


def _tiny_pair():
    teacher = build_network(NetworkSpec(role="teacher", in_channels=1, num_classes=4, widths=[3, 4]), seed=1)
    student = build_network(NetworkSpec(role="student", in_channels=1, num_classes=4, widths=[2, 4]), seed=2)
    return teacher.double().eval(), student.double().eval()


def _table(seed: int = 0) -> ClassEmbeddingTable:
    rows = 0.1 * torch.randn(4, 4, generator=torch.Generator().manual_seed(seed))
    return ClassEmbeddingTable(rows, EmbeddingSource.FILE)


# --- Zones nulles des pertes ---

class TestZeroRegions:

    def test_kl_zero_for_identical_logits_and_non_negative(self):
        t = torch.randn(5, 4)
        assert float(kd_kl_loss(t, t)) == pytest.approx(0.0, abs=1e-6)
        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            assert float(kd_kl_loss(torch.randn(5, 4, generator=gen), torch.randn(5, 4, generator=gen))) >= 0.0

    def test_adv_is_negated_kl(self):
        t, s = torch.randn(3, 4), torch.randn(3, 4)
        assert torch.allclose(adv_loss(t, s), -kd_kl_loss(t, s))

    def test_bounding_zero_inside_inner_radius(self):
        f_y = torch.zeros(2, 10)
        f = torch.full((2, 10), 0.1)            # MSE 0.01 < r_i
        assert float(bounding_loss_ed(f, f_y, 0.015)) == 0.0
        assert float(bounding_loss_ed(f, f_y, 0.005)) == pytest.approx(0.005)

    def test_margin_zero_beyond_outer_radius(self):
        f_y = torch.zeros(2, 10)
        f = torch.full((2, 10), 0.2)            # MSE 0.04 > r_o
        assert float(margin_loss_aed(f, f_y, 0.03)) == 0.0
        assert float(margin_loss_aed(torch.zeros(2, 10), f_y, 0.03)) == pytest.approx(0.03)

    def test_cam_zero_when_cam_dominates_mask(self):
        mask = build_target_mask(MaskKind.FULL, [1.0], 3)
        assert float(cam_loss(torch.full((2, 3, 3), 2.0, dtype=torch.float64), mask)) == 0.0
        assert float(cam_loss(torch.zeros(2, 3, 3, dtype=torch.float64), mask)) == pytest.approx(1.0)

    def test_bn_zero_when_batch_matches_running_stats(self):
        state = BatchNormState(2)
        state.last_batch_mean = torch.zeros(2)
        state.last_batch_var = torch.ones(2)
        assert float(bn_reg_loss([state])) == 0.0


def test_ce_loss_rejects_out_of_range_label():
    with pytest.raises(ValueError):
        ce_loss(torch.randn(2, 4), torch.tensor([0, 4]))


def test_bn_reg_loss_requires_captured_stats():
    with pytest.raises(GradientError):
        bn_reg_loss([BatchNormState(2)])


def test_embedding_width_mismatch():
    with pytest.raises(ShapeError):
        bounding_loss_ed(torch.zeros(2, 5), torch.zeros(2, 4), 0.01)


# --- CAM ---

@pytest.mark.parametrize("seed", range(50))
def test_cam_matches_explicit_weighted_sum(seed):
    gen = torch.Generator().manual_seed(seed)
    maps = torch.randn(3, 5, 4, 4, generator=gen)
    head = torch.randn(6, 5, generator=gen)
    labels = torch.randint(0, 6, (3,), generator=gen)
    cam = cam_from_features(maps, head, labels)
    for b in range(3):
        expected = sum(head[labels[b], k] * maps[b, k] for k in range(5))
        assert torch.allclose(cam[b], expected, atol=1e-5)


def test_cam_one_hot_head_selects_feature_map():
    maps = torch.randn(2, 3, 4, 4)
    head = torch.eye(3)
    cam = cam_from_features(maps, head, torch.tensor([2, 0]))
    assert torch.equal(cam[0], maps[0, 2])
    assert torch.equal(cam[1], maps[1, 0])


def test_cam_latent_shape_and_embed_layer_rejected():
    teacher = build_network(NetworkSpec(role="teacher", in_channels=1, num_classes=4, widths=[4, 8]), seed=0)
    assert cam_latent(teacher.eval(), torch.randn(2, 1, 8, 8), torch.tensor([0, 3])).shape == (2, 4, 4)
    with_embed = build_network(NetworkSpec(role="teacher", in_channels=1, num_classes=4, widths=[4, 8], embed_out=6), seed=0)
    with pytest.raises(ShapeError):
        cam_latent(with_embed, torch.randn(2, 1, 8, 8), torch.tensor([0, 1]))


# --- Masques cibles ---

class TestTargetMask:

    def test_full_mask(self):
        mask = build_target_mask("full", [1.0], 3)
        assert mask.size == (3, 3)
        assert torch.equal(mask.values, torch.ones(3, 3, dtype=torch.float64))

    def test_gaussian_mask_values(self):
        mask = build_target_mask(MaskKind.GAUSSIAN, [1.0, 2.0], 3)
        assert float(mask.values[1, 1]) == pytest.approx(1.0)
        assert float(mask.values[0, 0]) == pytest.approx(math.exp(-2.0 / 8.0), abs=1e-12)
        assert float(mask.values[0, 0]) == pytest.approx(0.7788, abs=1e-4)

    def test_gaussian_even_size_is_symmetric(self):
        values = build_target_mask(MaskKind.GAUSSIAN, [2.0, 1.0], 4).values
        assert torch.allclose(values, values.flip(0))
        assert torch.allclose(values, values.t())
        assert float(values.max()) < 2.0

    @pytest.mark.parametrize("kind,params,size", [
        ("full", [1.0], 0),
        ("full", [1.0, 2.0], 3),
        ("gaussian", [1.0], 3),
        ("gaussian", [1.0, 0.0], 3),
    ])
    def test_invalid_masks(self, kind, params, size):
        with pytest.raises(ValueError):
            build_target_mask(kind, params, size)

    def test_cam_and_mask_size_mismatch(self):
        with pytest.raises(ShapeError):
            cam_loss(torch.zeros(1, 4, 4), build_target_mask("full", [1.0], 3))


# --- Gradients (différences finies) ---

@pytest.mark.parametrize("seed", range(100))
def test_grad_check_basic_terms(seed):
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    s = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    labels = torch.tensor([0, 3, 1])
    f_y = torch.randn(3, 6, generator=gen, dtype=torch.float64) * 0.1
    f = f_y + 0.3 * torch.randn(3, 6, generator=gen, dtype=torch.float64)
    cam = torch.randn(2, 3, 3, generator=gen, dtype=torch.float64)
    mask = build_target_mask(MaskKind.GAUSSIAN, [1.0, 2.0], 3)

    assert grad_check(lambda x: kd_kl_loss(t, x), s) < 1e-5
    assert grad_check(lambda x: kd_kl_loss(x, s), t) < 1e-5
    assert grad_check(lambda x: ce_loss(x, labels), t) < 1e-5
    assert grad_check(lambda x: cam_loss(x, mask), cam, eps=1e-7) < 1e-5
    assert grad_check(lambda x: bounding_loss_ed(x, f_y, 0.015), f) < 1e-5
    assert grad_check(lambda x: margin_loss_aed(x, f_y, 0.5), f) < 1e-5


def test_grad_check_bn_reg_through_captured_stats():
    state = BatchNormState(3).double()
    state.eval()
    state.capture = True
    x = torch.randn(4, 3, 2, 2, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def f(inp):
        apply_operator(OperatorKind.BATCHNORM2D, state, inp)
        return bn_reg_loss([state])

    assert grad_check(f, x) < 1e-5


@pytest.mark.parametrize("seed", range(100))
def test_grad_check_generator_total_loss(seed):
    teacher, student = _tiny_pair()
    table = _table(seed)
    labels = torch.tensor([0, 1, 2, 3])
    x = torch.randn(4, 1, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    mask = build_target_mask(MaskKind.GAUSSIAN, [1.0, 1.0], 2)
    weights = LossWeights(r_o=0.5, r_i=0.1)

    def f(images):
        return generator_total_loss(SyntheticBatch(images, labels, 4), teacher, student, table, weights, mask).total

    assert grad_check(f, x, eps=1e-7) < 1e-4
    assert all(not s.capture for s in teacher.bn_states())


@pytest.mark.parametrize("seed", range(100))
def test_grad_check_student_total_loss_wrt_student_weight(seed):
    teacher, student = _tiny_pair()
    table = _table(seed)
    batch = _fixture_batch(seed)
    weights = LossWeights(r_i=0.001, r_o=0.002)
    conv = student.trunk[0]
    w0 = conv.weight.detach().clone()
    del conv.weight

    def f(w):
        conv.weight = w
        return student_total_loss(batch, teacher, student, table, weights).total

    assert grad_check(f, w0, eps=1e-7) < 1e-4


def test_generator_total_loss_components_and_state():
    teacher, student = _tiny_pair()
    running = [s.running_mean.clone() for s in teacher.bn_states()]
    batch = SyntheticBatch(torch.randn(4, 1, 4, 4, dtype=torch.float64), torch.tensor([0, 1, 2, 3]), 4)
    terms = generator_total_loss(batch, teacher, student, _table(), LossWeights(),
                                 build_target_mask("full", [1.0], 2))
    w = LossWeights()
    expected = (w.alpha_ce * terms.ce + w.alpha_adv * terms.adv + w.alpha_bn * terms.bn
                + w.alpha_cam * terms.cam + w.alpha_aed * terms.aed)
    assert torch.allclose(terms.total, expected)
    assert float(terms.adv) <= 0.0
    assert all(torch.equal(a, s.running_mean) for a, s in zip(running, teacher.bn_states()))


def test_student_total_loss_leaves_teacher_without_gradient():
    teacher, student = _tiny_pair()
    batch = SyntheticBatch(torch.randn(4, 1, 4, 4, dtype=torch.float64), torch.tensor([0, 1, 2, 3]), 4)
    terms = student_total_loss(batch, teacher, student, _table(), LossWeights())
    terms.total.backward()
    assert all(p.grad is None for p in teacher.parameters())
    assert student.head.weight.grad is not None
    assert torch.allclose(terms.total, terms.kl + LossWeights().alpha_ed * terms.ed)


# --- Valeurs de référence ---

def test_kd_kl_two_class_value():
    ln3 = math.log(3.0)
    teacher = torch.tensor([[ln3, 0.0]], dtype=torch.float64)      # (0.75, 0.25)
    student = torch.tensor([[0.0, ln3]], dtype=torch.float64)      # (0.25, 0.75)
    assert float(kd_kl_loss(teacher, student)) == pytest.approx(0.5 * ln3, abs=1e-12)
    assert float(kd_kl_loss(teacher, student)) == pytest.approx(0.5493, abs=1e-4)
    assert float(adv_loss(teacher, student)) == pytest.approx(-0.5 * ln3, abs=1e-12)


def test_kd_kl_invariant_under_class_permutation():
    gen = torch.Generator().manual_seed(7)
    t = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    s = torch.randn(4, 6, generator=gen, dtype=torch.float64)
    perm = torch.randperm(6, generator=gen)
    assert float(kd_kl_loss(t[:, perm], s[:, perm])) == pytest.approx(float(kd_kl_loss(t, s)), abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_adv_is_exactly_negated_kl(seed):
    gen = torch.Generator().manual_seed(seed)
    t, s = torch.randn(3, 5, generator=gen), torch.randn(3, 5, generator=gen)
    assert torch.equal(adv_loss(t, s), -kd_kl_loss(t, s))


def test_ce_uniform_logits():
    loss = ce_loss(torch.zeros(3, 10, dtype=torch.float64), torch.tensor([0, 4, 9]))
    assert float(loss) == pytest.approx(math.log(10.0), abs=1e-12)


def test_ce_vanishes_with_large_margin():
    logits = torch.tensor([[20.0, 0.0, 0.0], [0.0, 0.0, 20.0]], dtype=torch.float64)
    assert float(ce_loss(logits, torch.tensor([0, 2]))) < 1e-8


def test_ce_matches_direct_softmax():
    logits = [[0.2, -1.0, 0.5], [1.5, 0.3, -0.7]]
    labels = [2, 0]
    expected = 0.0
    for row, y in zip(logits, labels):
        expected -= math.log(math.exp(row[y]) / sum(math.exp(v) for v in row))
    expected /= len(logits)
    loss = ce_loss(torch.tensor(logits, dtype=torch.float64), torch.tensor(labels))
    assert float(loss) == pytest.approx(expected, abs=1e-12)


def _captured(mean, var, running_mean, running_var) -> BatchNormState:
    state = BatchNormState(len(mean)).double()
    with torch.no_grad():
        state.running_mean.copy_(torch.tensor(running_mean, dtype=torch.float64))
        state.running_var.copy_(torch.tensor(running_var, dtype=torch.float64))
    state.last_batch_mean = torch.tensor(mean, dtype=torch.float64)
    state.last_batch_var = torch.tensor(var, dtype=torch.float64)
    return state


def test_bn_reg_single_channel_value_and_additivity():
    a = _captured([1.0], [2.0], [0.0], [2.0])
    b = _captured([0.5, -1.0], [1.0, 3.0], [0.0, 0.0], [1.0, 1.0])
    assert float(bn_reg_loss([a])) == 1.0
    assert float(bn_reg_loss([b])) == pytest.approx(0.25 + 1.0 + 4.0)
    assert float(bn_reg_loss([a, b])) == pytest.approx(float(bn_reg_loss([a])) + float(bn_reg_loss([b])))


def test_cam_two_maps_linear_combination():
    maps = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]]]])
    head = torch.tensor([[2.0, -1.0]])
    cam = cam_from_features(maps, head, torch.tensor([0]))
    assert torch.equal(cam[0], torch.tensor([[2.0, -1.0], [0.0, 0.0]]))


def test_cam_loss_elementwise_value():
    mask = build_target_mask(MaskKind.FULL, [1.0], 2)
    cam = torch.tensor([[[2.0, 0.5], [1.0, -1.0]]], dtype=torch.float64)
    assert float(cam_loss(cam, mask)) == pytest.approx(0.625, abs=1e-12)


def test_bounding_and_margin_values():
    f_y = torch.zeros(2, 2, dtype=torch.float64)
    f = torch.tensor([[math.sqrt(0.02)] * 2, [0.1] * 2], dtype=torch.float64)    # MSE 0.02 puis 0.01
    assert float(bounding_loss_ed(f[:1], f_y[:1], 0.015)) == pytest.approx(0.005, abs=1e-12)
    assert float(bounding_loss_ed(f[1:], f_y[1:], 0.015)) == 0.0
    assert float(bounding_loss_ed(f, f_y, 0.015)) == pytest.approx(0.0025, abs=1e-12)
    assert float(margin_loss_aed(f[1:], f_y[1:], 0.03)) == pytest.approx(0.02, abs=1e-12)
    far = torch.full((1, 2), math.sqrt(0.05), dtype=torch.float64)
    assert float(margin_loss_aed(far, f_y[:1], 0.03)) == 0.0


@pytest.mark.parametrize("mse", [0.0, 0.005, 0.015, 0.02, 0.025, 0.03, 0.04])
def test_bounding_and_margin_bands(mse):
    f_y = torch.zeros(1, 4, dtype=torch.float64)
    f = torch.full((1, 4), math.sqrt(mse), dtype=torch.float64)
    ed = float(bounding_loss_ed(f, f_y, 0.015))
    aed = float(margin_loss_aed(f, f_y, 0.03))
    assert ed == pytest.approx(max(0.0, mse - 0.015), abs=1e-12)
    assert aed == pytest.approx(max(0.0, 0.03 - mse), abs=1e-12)
    if mse <= 0.015:
        assert ed == 0.0
    if mse >= 0.03:
        assert aed == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_batch_losses_invariant_under_batch_permutation(seed):
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    s = torch.randn(5, 4, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, 4, (5,), generator=gen)
    f_y = 0.1 * torch.randn(5, 6, generator=gen, dtype=torch.float64)
    f = f_y + 0.2 * torch.randn(5, 6, generator=gen, dtype=torch.float64)
    cam = torch.randn(5, 3, 3, generator=gen, dtype=torch.float64)
    mask = build_target_mask(MaskKind.GAUSSIAN, [1.0, 2.0], 3)
    p = torch.randperm(5, generator=gen)

    pairs = [
        (kd_kl_loss(t, s), kd_kl_loss(t[p], s[p])),
        (ce_loss(t, labels), ce_loss(t[p], labels[p])),
        (cam_loss(cam, mask), cam_loss(cam[p], mask)),
        (bounding_loss_ed(f, f_y, 0.015), bounding_loss_ed(f[p], f_y[p], 0.015)),
        (margin_loss_aed(f, f_y, 0.03), margin_loss_aed(f[p], f_y[p], 0.03)),
    ]
    for a, b in pairs:
        assert float(a) == pytest.approx(float(b), abs=1e-12)


def test_cam_latent_per_sample_equals_batched():
    teacher, _ = _tiny_pair()
    x = torch.randn(3, 1, 8, 8, generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    labels = torch.tensor([2, 0, 3])
    batched = cam_latent(teacher, x, labels)
    for b in range(3):
        assert torch.allclose(cam_latent(teacher, x[b:b + 1], labels[b:b + 1])[0], batched[b], atol=1e-12)


# --- Linéarité en α ---

ALPHA_TO_TERM = [("alpha_ce", "ce"), ("alpha_adv", "adv"), ("alpha_bn", "bn"), ("alpha_cam", "cam"),
                 ("alpha_aed", "aed")]
ZERO_ALPHAS = dict(alpha_ce=0.0, alpha_adv=0.0, alpha_bn=0.0, alpha_cam=0.0, alpha_ed=0.0, alpha_aed=0.0)


def _fixture_batch(seed: int) -> SyntheticBatch:
    gen = torch.Generator().manual_seed(seed)
    images = torch.randn(4, 1, 4, 4, generator=gen, dtype=torch.float64)
    return SyntheticBatch(images, torch.randint(0, 4, (4,), generator=gen), 4)


@pytest.mark.parametrize("seed", range(20))
def test_generator_loss_all_alphas_zero(seed):
    teacher, student = _tiny_pair()
    terms = generator_total_loss(_fixture_batch(seed), teacher, student, _table(seed),
                                 LossWeights(**ZERO_ALPHAS), build_target_mask("full", [1.0], 2))
    assert float(terms.total) == 0.0


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("alpha,term", ALPHA_TO_TERM)
def test_generator_loss_single_alpha_selects_term(alpha, term, seed):
    teacher, student = _tiny_pair()
    batch = _fixture_batch(seed)
    weights = LossWeights(**dict(ZERO_ALPHAS, **{alpha: 1.0}))
    terms = generator_total_loss(batch, teacher, student, _table(seed), weights, build_target_mask("full", [1.0], 2))
    assert torch.equal(terms.total, getattr(terms, term))
    if term == "ce":
        with torch.no_grad():
            assert torch.allclose(terms.ce, ce_loss(teacher(batch.images), batch.labels), atol=1e-12)
    if term == "adv":
        with torch.no_grad():
            expected = adv_loss(teacher(batch.images), student(batch.images))
        assert torch.allclose(terms.adv, expected, atol=1e-12)


def test_student_loss_without_ed_is_kl():
    teacher, student = _tiny_pair()
    batch = _fixture_batch(9)
    terms = student_total_loss(batch, teacher, student, _table(), LossWeights(alpha_ed=0.0))
    with torch.no_grad():
        expected = kd_kl_loss(teacher(batch.images), student(batch.images))
    assert torch.allclose(terms.total, expected, atol=1e-12)


def test_student_loss_zero_when_models_agree_inside_radius():
    teacher, _ = _tiny_pair()
    table = ClassEmbeddingTable(torch.zeros(4, 4, dtype=torch.float64), EmbeddingSource.FILE)
    batch = _fixture_batch(10)
    with torch.no_grad():
        embedding = teacher.forward_all(batch.images).embedding
    r_i = float((embedding ** 2).mean(dim=1).max()) + 1.0
    terms = student_total_loss(batch, teacher, teacher, table, LossWeights(r_i=r_i, r_o=r_i + 1.0))
    assert float(terms.total) == pytest.approx(0.0, abs=1e-12)
