"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two training criteria (overfit and fusion ablation) take minutes on a CPU.
"""

import contextlib
import time

import numpy as np
import torch

from conftest import ACCEPTANCE_LINES
from motseg.annotation import EgoPose, TrackRecord, Tracklet, label_motion, rotation_z
from motseg.assembly import assemble_mask_logits, nms
from motseg.evaluation import IOU_THRESHOLDS, MotionIoUAccumulator, compute_ap, evaluate, motion_pixel_metrics
from motseg.heads import ModelConfig, MotSegNet
from motseg.losses import box_loss, classification_loss, head_losses, mask_loss, match_anchors
from motseg.synthetic import SyntheticSceneConfig, render_synthetic
from motseg.training import (
    TrainConfig,
    alternate_train,
    build_model,
    build_targets,
    make_batch,
    resize_sample,
    save_checkpoint,
    set_deterministic,
)
from oracles import brute_nms, mask_oracle, oracle_mean_ap, random_dets, random_instance


@contextlib.contextmanager
def criterion(number, title):
    start = time.perf_counter()
    state = {"detail": ""}
    try:
        yield state
    except BaseException:
        line = f"criterion {number:2d} FAIL  {title}  {state['detail']}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"criterion {number:2d} PASS  {title}  {state['detail']}  ({time.perf_counter() - start:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


def frames(cfg):
    return [s for seq in render_synthetic(cfg) for s in seq.samples]


# 1 ---------------------------------------------------------------------------


def test_01_mask_assembly_oracle():
    with criterion(1, "mask assembly matches the scalar-loop oracle (100 pairs, k=32, 32x32, tol 1e-6)") as c:
        rng = np.random.default_rng(1)
        worst = 0.0
        t0 = time.perf_counter()
        for _ in range(100):
            P = rng.uniform(0, 3, (32, 32, 32))
            coef = rng.uniform(-1, 1, (1, 32))
            got = torch.sigmoid(assemble_mask_logits(torch.tensor(P), torch.tensor(coef))).numpy()
            worst = max(worst, float(np.max(np.abs(got - mask_oracle(P, coef)))))
        elapsed = time.perf_counter() - t0
        c["detail"] = f"max err {worst:.2e}"
        assert worst <= 1e-6
        assert elapsed < 60


# 2 ---------------------------------------------------------------------------


def _fd(f, x, idx, eps):
    with torch.no_grad():
        old = x[idx].item()
        x[idx] = old + eps
        hi = f().item()
        x[idx] = old - eps
        lo = f().item()
        x[idx] = old
    return (hi - lo) / (2 * eps)


def _term_check(f, x, rng, n, eps=1e-6):
    x.requires_grad_(True)
    (g,) = torch.autograd.grad(f(), x)
    worst = 0.0
    for i in rng.choice(x.numel(), size=min(n, x.numel()), replace=False):
        idx = np.unravel_index(int(i), x.shape)
        fd, an = _fd(f, x, idx, eps), g[idx].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_02_gradient_suite(small_samples):
    with criterion(2, "loss gradients match central differences (terms 1e-4, full model 1e-3)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        gen = torch.Generator().manual_seed(0)
        dt = torch.float64

        logits = torch.randn(2, 40, 6, dtype=dt, generator=gen)
        targets = torch.randint(-1, 6, (2, 40), generator=gen)
        e_cls = _term_check(lambda: classification_loss(logits, targets, [False, True]), logits, rng, 40)

        reg = 2 * torch.randn(2, 30, 4, dtype=dt, generator=gen)
        tgt = torch.randn(2, 30, 4, dtype=dt, generator=gen)
        pos = torch.rand(2, 30, generator=gen) > 0.5
        e_box = _term_check(lambda: box_loss(reg, tgt, pos), reg, rng, 40)

        protos = torch.rand(1, 4, 8, 8, dtype=dt, generator=gen)
        coefs = torch.tanh(torch.randn(1, 6, 4, dtype=dt, generator=gen))
        gt = torch.zeros(1, 32, 32, dtype=torch.bool)
        gt[0, 8:20, 4:16] = True
        boxes = torch.tensor([[4.0, 8.0, 16.0, 20.0]], dtype=dt)
        match = match_anchors(torch.tensor([[4, 8, 16, 20], [0, 0, 4, 4], [5, 9, 15, 21]] * 2, dtype=dt), boxes)

        def mloss():
            return mask_loss(protos, coefs, [gt], [boxes], [match], (32, 32))

        e_mask = max(_term_check(mloss, coefs, rng, 24), _term_check(mloss, protos, rng, 40))

        # every parameter of a <= 5k-parameter network on 32x32 inputs
        torch.manual_seed(5)
        cfg = ModelConfig(backbone_channels=(2, 2, 4, 4), blocks_per_stage=1, fpn_channels=4, num_prototypes=3)
        model = MotSegNet(cfg).double()
        n_params = sum(p.numel() for p in model.parameters())
        samples = [resize_sample(s, (32, 32)) for s in small_samples[:2]]
        image, motion = make_batch(samples, "rgb_flow", dtype=dt)
        failures, checked = [], 0
        for head in ("semantic", "motion"):
            tg = [build_targets(s, head, dt) for s in samples]

            def loss():
                return head_losses(model(image, motion, heads=(head,)), head, tg)["total"]

            named = [(n, p) for n, p in model.named_parameters() if not n.startswith("heads.") or n.startswith(f"heads.{head}.")]
            value = loss()
            grads = torch.autograd.grad(value, [p for _, p in named])
            eps = 1e-6
            # differences below the rounding noise of the loss are not resolvable
            noise = 10 * torch.finfo(dt).eps * abs(value.item()) / eps
            for (name, p), g in zip(named, grads):
                for i in range(p.numel()):
                    idx = np.unravel_index(i, p.shape)
                    fd, an = _fd(loss, p, idx, eps), g[idx].item()
                    if abs(fd - an) > max(1e-3 * max(abs(fd), abs(an)), noise):
                        failures.append((head, name, idx, fd, an))
                    checked += 1
        elapsed = time.perf_counter() - t0
        c["detail"] = (
            f"cls {e_cls:.1e} box {e_box:.1e} mask {e_mask:.1e}; model {n_params} params, "
            f"{checked} parameter checks, {len(failures)} outside 1e-3"
        )
        assert n_params <= 5000
        assert max(e_cls, e_box, e_mask) <= 1e-4
        assert not failures, failures[:3]
        assert elapsed < 300


# 3 ---------------------------------------------------------------------------


def test_03_overfit_eight_frames():
    with criterion(3, "overfit 8 frames within 2000 iterations: both heads mask AP50 >= 90") as c:
        set_deterministic()
        t0 = time.perf_counter()
        samples = frames(SyntheticSceneConfig(frames_per_sequence=4, num_sequences=2, seed=1))
        assert len(samples) == 8
        model = build_model(ModelConfig(backbone="tiny_conv", input_mode="rgb_flow"), 0)
        alternate_train(model, samples, samples, TrainConfig(lr=0.01, iterations=2000, augment=False, grad_clip=10.0, log_every=0))
        rep = evaluate(model, samples)
        sem, mot = rep.heads["semantic"]["mask"]["AP50"], rep.heads["motion"]["mask"]["AP50"]
        elapsed = time.perf_counter() - t0
        c["detail"] = f"semantic {sem:.1f} motion {mot:.1f}"
        assert sem >= 90 and mot >= 90
        assert elapsed < 1800


# 4 ---------------------------------------------------------------------------


ABLATION_SCENE = dict(frames_per_sequence=4, uniform_appearance=True, moving_fraction=0.5)


def test_04_fusion_ablation_direction():
    with criterion(4, "rgb_flow beats rgb-only on motion-head AP50 by >= 15 points") as c:
        set_deterministic()
        t0 = time.perf_counter()
        train = frames(SyntheticSceneConfig(num_sequences=16, seed=7, **ABLATION_SCENE))
        held_out = frames(SyntheticSceneConfig(num_sequences=8, seed=1007, **ABLATION_SCENE))
        assert len(train) == 64
        ap = {}
        for mode in ("rgb", "rgb_flow"):
            model = build_model(ModelConfig(input_mode=mode), 0)
            alternate_train(model, train, train, TrainConfig(lr=0.01, iterations=3000, grad_clip=10.0, log_every=0))
            ap[mode] = evaluate(model, held_out).heads["motion"]["mask"]["AP50"]
        elapsed = time.perf_counter() - t0
        c["detail"] = f"rgb {ap['rgb']:.1f} rgb_flow {ap['rgb_flow']:.1f} gap {ap['rgb_flow'] - ap['rgb']:.1f}"
        assert ap["rgb_flow"] - ap["rgb"] >= 15
        assert elapsed < 7200


# 5 ---------------------------------------------------------------------------


def _scenario(rng, kind):
    n = int(rng.integers(6, 12))
    ts = np.cumsum(rng.uniform(0.08, 0.12, size=n))
    yaw_rate = rng.uniform(-1.5, 1.5) if kind != "straight" else 0.0
    ego_v = np.zeros(3) if kind == "rotation" else np.array([rng.uniform(-15, 15), rng.uniform(-3, 3), 0.0])
    poses = [EgoPose(float(t), ego_v * t, rotation_z(yaw_rate * t)) for t in ts]
    speed = 0.0 if rng.random() < 0.4 else float(rng.choice([rng.uniform(0.0, 0.6), rng.uniform(1.6, 12)]))
    heading = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
    start = np.array([rng.uniform(-30, 30), rng.uniform(-30, 30), 0.0])
    first = int(rng.integers(0, 3))
    recs = []
    for p in poses[first:]:
        world = start + vel * p.timestamp
        recs.append(TrackRecord(p.timestamp, p.rotation.T @ (world - p.position)))
    return poses, Tracklet(1, "car", recs), speed > 1.0


def test_05_annotation_oracle():
    with criterion(5, "motion labels agree with analytic ground truth on >= 50 scenarios") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(11)
        agree = total = scenarios = rotations = 0
        for i in range(60):
            kind = ("rotation", "straight", "turning")[i % 3]
            poses, trk, truth = _scenario(rng, kind)
            labels = label_motion([trk], poses, threshold=1.0, window=5)
            agree += sum(lb.moving == truth for lb in labels)
            total += len(labels)
            scenarios += 1
            rotations += kind == "rotation"
        for seq in render_synthetic(SyntheticSceneConfig(frames_per_sequence=6, num_sequences=4, seed=2)):
            for lb in label_motion(seq.tracklets, seq.poses):
                agree += lb.moving == seq.motion_gt[lb.object_id]
                total += 1
            scenarios += 1
        c["detail"] = f"{agree}/{total} observations over {scenarios} scenarios ({rotations} pure ego rotation)"
        assert scenarios >= 50 and rotations > 0
        assert agree == total
        assert time.perf_counter() - t0 < 60


# 6 ---------------------------------------------------------------------------


def test_06_ap_oracle():
    with criterion(6, "compute_ap equals brute-force PR integration on 200 instances (1e-9)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(200):
            dets, gts = random_instance(rng, n_img=int(rng.integers(1, 4)), max_det=10, max_gt=5, n_cats=2)
            r = compute_ap(dets, gts)
            for thr, got in ((0.5, r.ap50), (0.75, r.ap75)):
                worst = max(worst, abs(got - 100 * oracle_mean_ap(dets, gts, thr)))
            full = np.mean([100 * oracle_mean_ap(dets, gts, t) for t in IOU_THRESHOLDS])
            worst = max(worst, abs(r.ap - full))
        c["detail"] = f"max |diff| {worst:.1e}"
        assert worst <= 1e-9
        assert time.perf_counter() - t0 < 60


# 7 ---------------------------------------------------------------------------


def test_07_nms_oracle():
    with criterion(7, "greedy NMS equals O(n^2) brute force on 100 random sets") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        mismatches = 0
        for trial in range(100):
            dets = random_dets(rng, int(rng.integers(1, 101)), quantize=trial % 3 == 0)
            got = [d.index for d in nms(dets, 0.5, 0.0, 10**6)]
            ref = brute_nms([d.box for d in dets], [d.score for d in dets], [d.category for d in dets], [d.index for d in dets], 0.5)
            mismatches += got != [dets[i].index for i in ref]
        c["detail"] = f"{mismatches} mismatching sets"
        assert mismatches == 0
        assert time.perf_counter() - t0 < 60


# 8 ---------------------------------------------------------------------------


def test_08_alternation_isolation(small_samples, tiny_model_cfg):
    with criterion(8, "alternation isolation over 20 steps, shared prototypes object") as c:
        model = build_model(tiny_model_cfg, 0)
        prev = {k: v.detach().clone() for k, v in model.state_dict().items()}
        violations = []

        def cb(it, m, rec):
            nonlocal prev
            state = {k: v.detach().clone() for k, v in m.state_dict().items()}
            phase = rec["phase"]
            other = "motion" if phase == "semantic" else "semantic"
            changed = {k for k in state if not torch.equal(state[k], prev[k])}
            if any(k.startswith(f"heads.{other}.") for k in changed):
                violations.append((it, "inactive head changed"))
            for prefix in ("encoder.", "fpn.", "protonet.", f"heads.{phase}."):
                if not any(k.startswith(prefix) for k in changed):
                    violations.append((it, f"{prefix} unchanged"))
            prev = state

        tc = TrainConfig(lr=0.01, iterations=20, batch_size=2, input_size=(64, 64), augment=True, log_every=0)
        _, records = alternate_train(model, small_samples, small_samples, tc, callback=cb)
        image, motion = make_batch([resize_sample(small_samples[0], (64, 64))], "rgb_flow")
        out = model(image, motion)
        same = out.heads["semantic"].prototypes is out.heads["motion"].prototypes is out.prototypes
        c["detail"] = f"{len(records)} steps, {len(violations)} violations, shared prototypes {same}"
        assert [r["phase"][0] for r in records] == list("sm" * 10)
        assert not violations, violations[:3]
        assert same


# 9 ---------------------------------------------------------------------------


def test_09_miou_formula():
    with criterion(9, "mIoU is the mean of moving and background IoU; consistent with 59.7/99.4/79.5") as c:
        rng = np.random.default_rng(9)
        preds = [rng.random((16, 16)) < 0.3 for _ in range(5)]
        gts = [rng.random((16, 16)) < 0.3 for _ in range(5)]
        mov, bg, miou = motion_pixel_metrics(preds, gts)
        assert miou == (mov + bg) / 2
        acc = MotionIoUAccumulator()
        acc.tp, acc.fp, acc.fn = 597, 203, 200
        acc.tn = round(0.994 * 403 / 0.006)  # background IoU 0.994
        m, b, mi = acc.result()
        c["detail"] = f"moving {100 * m:.2f} background {100 * b:.2f} mIoU {100 * mi:.2f}"
        assert round(100 * m, 1) == 59.7 and round(100 * b, 1) == 99.4
        assert abs(100 * mi - 79.5) <= 0.1
        assert abs((59.7 + 99.4) / 2 - 79.5) <= 0.1


# 10 --------------------------------------------------------------------------


def test_10_determinism(tmp_path):
    with criterion(10, "seeded single-threaded runs give identical checkpoints and reports") as c:
        set_deterministic()
        samples = frames(SyntheticSceneConfig(frames_per_sequence=3, num_sequences=2, seed=4))
        cfg = ModelConfig(backbone_channels=(8, 8, 12, 16), blocks_per_stage=1, fpn_channels=16, num_prototypes=8)
        blobs, reports = [], []
        for run in range(2):
            model = build_model(cfg, 13)
            tc = TrainConfig(lr=0.01, iterations=10, batch_size=2, input_size=(64, 64), augment=True, seed=13, log_every=0)
            alternate_train(model, samples, samples, tc)
            path = tmp_path / f"run{run}.ckpt"
            save_checkpoint(model, path, {"seed": 13})
            blobs.append(path.read_bytes())
            reports.append(evaluate(model, [resize_sample(s, (64, 64)) for s in samples]).to_dict())
        c["detail"] = f"checkpoint {len(blobs[0])} bytes"
        assert blobs[0] == blobs[1]
        assert reports[0] == reports[1]
