import math

import numpy as np
import pytest
import torch

from motseg.heads import ModelConfig, MotSegNet, generate_anchors
from motseg.losses import (
    IGNORE,
    NEGATIVE,
    HeadTargets,
    box_loss,
    class_targets,
    classification_loss,
    downsample_masks,
    head_losses,
    mask_loss,
    match_anchors,
    smooth_l1,
)
from motseg.training import build_targets, make_batch, resize_sample

REL_TERM = 1e-4
REL_MODEL = 1e-3
ABS_FLOOR = 1e-8


def rel_err(fd, an):
    return abs(fd - an) / max(abs(fd), abs(an), ABS_FLOOR)


def central_diff(f, x, idx, eps):
    with torch.no_grad():
        old = x[idx].item()
        x[idx] = old + eps
        hi = f().item()
        x[idx] = old - eps
        lo = f().item()
        x[idx] = old
    return (hi - lo) / (2 * eps)


def check_grad(f, x, n=12, eps=1e-6, tol=REL_TERM, seed=0):
    x.requires_grad_(True)
    (g,) = torch.autograd.grad(f(), x)
    rng = np.random.default_rng(seed)
    flat = rng.choice(x.numel(), size=min(n, x.numel()), replace=False)
    for i in flat:
        idx = np.unravel_index(int(i), x.shape)
        fd = central_diff(f, x, idx, eps)
        assert rel_err(fd, g[idx].item()) <= tol, (idx, fd, g[idx].item())


class TestMatching:
    def _anchors(self):
        return torch.tensor(
            [[0, 0, 10, 10], [0, 0, 10, 12], [0, 0, 10, 30], [50, 50, 60, 60], [2, 0, 12, 10]], dtype=torch.float64
        )

    def test_thresholds(self):
        gt = torch.tensor([[0.0, 0, 10, 10]], dtype=torch.float64)
        m = match_anchors(self._anchors(), gt)
        # IoUs: 1, 10/12, 1/3, 0, 80/120
        assert m.assignment.tolist() == [0, 0, NEGATIVE, NEGATIVE, 0]

    def test_ignore_band(self):
        gt = torch.tensor([[0.0, 0, 10, 10]], dtype=torch.float64)
        anchors = torch.tensor([[0, 0, 10, 10], [0, 0, 10, 22.5]], dtype=torch.float64)  # IoU 1, 0.444
        assert match_anchors(anchors, gt).assignment.tolist() == [0, IGNORE]

    def test_best_anchor_rule(self):
        # tall GT overlaps every anchor below 0.4; the best one still becomes positive
        gt = torch.tensor([[0.0, 0, 10, 100]], dtype=torch.float64)
        m = match_anchors(self._anchors(), gt)
        assert m.best_iou.max() == pytest.approx(0.3)
        assert m.assignment.tolist() == [NEGATIVE, NEGATIVE, 0, NEGATIVE, NEGATIVE]

    def test_no_gt(self):
        m = match_anchors(self._anchors(), torch.zeros(0, 4, dtype=torch.float64))
        assert (m.assignment == NEGATIVE).all()

    def test_class_targets(self):
        gt = torch.tensor([[0.0, 0, 10, 10], [50, 50, 60, 60]], dtype=torch.float64)
        m = match_anchors(self._anchors(), gt)
        assert class_targets(m, torch.tensor([3, 5])).tolist() == [3, 3, 0, 5, 3]

    def test_anchor_set_input(self):
        a = generate_anchors([(2, 2)], [8.0], [8])
        gt = torch.tensor([[0.0, 0.0, 8.0, 8.0]], dtype=torch.float64)
        m = match_anchors(a, gt)
        assert m.assignment[0] == 0


class TestClassification:
    def test_uniform_positive_frame(self):
        logits = torch.zeros(1, 20, 2)
        t = torch.zeros(1, 20, dtype=torch.long)
        t[0, :2] = 1
        assert classification_loss(logits, t, [False]).item() == pytest.approx(math.log(2))

    def test_uniform_negative_frame(self):
        logits = torch.zeros(1, 40, 2)
        t = torch.zeros(1, 40, dtype=torch.long)
        assert classification_loss(logits, t, [True]).item() == pytest.approx(math.log(2))

    def test_uniform_six_way(self):
        logits = torch.zeros(1, 10, 6)
        t = torch.zeros(1, 10, dtype=torch.long)
        t[0, 0] = 4
        assert classification_loss(logits, t, [False]).item() == pytest.approx(math.log(6))

    def test_hard_negative_ratio(self):
        # one positive, three hardest negatives: anchors with the largest foreground logit
        logits = torch.zeros(1, 10, 2, dtype=torch.float64)
        logits[0, :, 1] = torch.arange(10, dtype=torch.float64)
        t = torch.zeros(1, 10, dtype=torch.long)
        t[0, 0] = 1
        expect = (math.log1p(math.exp(-0.0)) + sum(math.log1p(math.exp(v)) for v in (9, 8, 7))) / 4
        assert classification_loss(logits, t, [False]).item() == pytest.approx(expect)

    def test_ignored_anchors_skipped(self):
        logits = torch.zeros(1, 6, 2, dtype=torch.float64)
        logits[0, 5, 1] = 50.0
        t = torch.tensor([[1, 0, 0, 0, 0, -1]])
        assert classification_loss(logits, t, [False]).item() == pytest.approx(math.log(2))

    def test_negative_frame_count(self):
        # batch mean positives 10 -> N = max(16, 3 * 10 / 2 = 15) = 16 on the empty frame
        logits = torch.zeros(2, 100, 2, dtype=torch.float64)
        logits[1, :, 1] = torch.linspace(0, 5, 100, dtype=torch.float64)
        t = torch.zeros(2, 100, dtype=torch.long)
        t[0, :10] = 1
        neg_frame_losses = torch.nn.functional.softplus(logits[1, :, 1]).sort(descending=True).values[:16]
        expect = (40 * math.log(2) + neg_frame_losses.sum().item()) / (40 + 16)
        assert classification_loss(logits, t, [False, True]).item() == pytest.approx(expect)

    def test_gradient(self):
        torch.manual_seed(0)
        logits = torch.randn(2, 30, 6, dtype=torch.float64)
        t = torch.randint(0, 6, (2, 30))
        t[0, :3] = -1
        check_grad(lambda: classification_loss(logits, t, [False, False]), logits, n=20)


class TestBox:
    def test_smooth_l1_values(self):
        assert smooth_l1(torch.tensor(0.5)).item() == 0.125
        assert smooth_l1(torch.tensor(-2.0)).item() == 1.5
        assert smooth_l1(torch.tensor(1.0)).item() == 0.5

    def test_normalised_by_positives(self):
        reg = torch.zeros(1, 4, 4)
        tgt = torch.zeros(1, 4, 4)
        tgt[0, 0, 0] = 0.5
        tgt[0, 1, 1] = 2.0
        pos = torch.tensor([[True, True, False, False]])
        assert box_loss(reg, tgt, pos).item() == pytest.approx((0.125 + 1.5) / 2)

    def test_no_positive(self):
        reg = torch.ones(1, 3, 4, requires_grad=True)
        loss = box_loss(reg, torch.zeros(1, 3, 4), torch.zeros(1, 3, dtype=torch.bool))
        loss.backward()
        assert loss.item() == 0 and torch.count_nonzero(reg.grad) == 0

    def test_gradient(self):
        torch.manual_seed(1)
        reg = torch.randn(1, 20, 4, dtype=torch.float64) * 2
        tgt = torch.randn(1, 20, 4, dtype=torch.float64)
        pos = torch.rand(1, 20) > 0.5
        check_grad(lambda: box_loss(reg, tgt, pos), reg, n=20)


class TestMask:
    def test_downsample_threshold(self):
        m = torch.zeros(1, 4, 4, dtype=torch.bool)
        m[0, :2, :2] = True
        m[0, 2, 2] = True  # quarter coverage of its 2x2 block
        assert downsample_masks(m, (2, 2))[0].tolist() == [[True, False], [False, False]]

    def _setup(self, dtype=torch.float64):
        torch.manual_seed(2)
        protos = torch.rand(1, 4, 8, 8, dtype=dtype)
        coefs = torch.tanh(torch.randn(1, 6, 4, dtype=dtype))
        gt = torch.zeros(1, 32, 32, dtype=torch.bool)
        gt[0, 8:20, 4:16] = True
        boxes = torch.tensor([[4.0, 8.0, 16.0, 20.0]], dtype=dtype)
        m = match_anchors(torch.tensor([[4, 8, 16, 20], [0, 0, 4, 4]] * 3, dtype=dtype), boxes)
        return protos, coefs, [gt], [boxes], [m]

    def test_value_matches_manual(self):
        protos, coefs, gts, boxes, ms = self._setup()
        loss = mask_loss(protos, coefs, gts, boxes, ms, (32, 32))
        pos = torch.nonzero(ms[0].positive).flatten()
        target = torch.zeros(8, 8, dtype=torch.float64)
        target[2:5, 1:4] = 1
        manual = []
        for a in pos.tolist():
            logit = torch.einsum("k,khw->hw", coefs[0, a], protos[0])
            bce = torch.nn.functional.binary_cross_entropy_with_logits(logit, target, reduction="none")
            # crop at stride 4: centres 2, 6, 10 ... inside [4, 16] x [8, 20]
            manual.append(bce[2:5, 1:4].mean())
        assert loss.item() == pytest.approx(torch.stack(manual).mean().item(), rel=1e-12)

    def test_gradient_coefficients(self):
        protos, coefs, gts, boxes, ms = self._setup()
        check_grad(lambda: mask_loss(protos, coefs, gts, boxes, ms, (32, 32)), coefs, n=12)

    def test_gradient_prototypes(self):
        protos, coefs, gts, boxes, ms = self._setup()
        check_grad(lambda: mask_loss(protos, coefs, gts, boxes, ms, (32, 32)), protos, n=20)


def tiny_model():
    cfg = ModelConfig(backbone_channels=(2, 2, 4, 4), blocks_per_stage=1, fpn_channels=4, num_prototypes=3)
    return MotSegNet(cfg).double()


def test_tiny_model_size():
    assert sum(p.numel() for p in tiny_model().parameters()) <= 5000


@pytest.mark.parametrize("head", ["semantic", "motion"])
def test_full_model_gradients(small_samples, head):
    torch.manual_seed(5)
    model = tiny_model()
    samples = [resize_sample(s, (32, 32)) for s in small_samples[:2]]
    image, motion = make_batch(samples, "rgb_flow", dtype=torch.float64)
    targets = [build_targets(s, head, torch.float64) for s in samples]

    def loss():
        return head_losses(model(image, motion, heads=(head,)), head, targets)["total"]

    params = dict(model.named_parameters())
    names = sorted(n for n in params if not n.startswith("heads.") or n.startswith(f"heads.{head}."))
    value = loss()
    grads = torch.autograd.grad(value, [params[n] for n in names], allow_unused=True)
    eps = 1e-6
    # central differences cannot resolve less than the rounding noise of the loss itself
    noise = 10 * torch.finfo(torch.float64).eps * abs(value.item()) / eps
    rng = np.random.default_rng(0)
    checked = 0
    for name, g in zip(names, grads):
        if g is None:
            continue
        p = params[name]
        for i in rng.choice(p.numel(), size=min(2, p.numel()), replace=False):
            idx = np.unravel_index(int(i), p.shape)
            fd = central_diff(loss, p, idx, eps)
            an = g[idx].item()
            assert abs(fd - an) <= max(REL_MODEL * max(abs(fd), abs(an)), noise), (name, idx, fd, an)
            checked += 1
    assert checked > 20


def test_head_losses_keys(small_samples):
    model = tiny_model()
    s = resize_sample(small_samples[0], (32, 32))
    image, motion = make_batch([s], "rgb_flow", dtype=torch.float64)
    out = head_losses(model(image, motion), "semantic", [build_targets(s, "semantic", torch.float64)])
    assert set(out) == {"cls", "box", "mask", "total"}
    assert out["total"].item() == pytest.approx(out["cls"].item() + 1.5 * out["box"].item() + 6.125 * out["mask"].item())


def test_negative_frame_targets():
    t = HeadTargets(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), torch.zeros(0, 8, 8, dtype=torch.bool))
    assert t.negative_frame
