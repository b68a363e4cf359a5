"""Acceptance criteria 1-9, one test each.

Each test records a one-line verdict that is printed in the
"acceptance criteria" section of the pytest summary. Criteria 7 and 8 train
real models and dominate the runtime (about 1.5 h and 20 min on one CPU core).
"""

import filecmp
import time

import numpy as np
import pytest
import torch

from conftest import finite_difference_check
from test_metrics import all_small_masks, eer_oracle, zhang_suen_oracle
from veindiff import seg_branch
from veindiff.classical_veins import majority_vote, write_fused_masks
from veindiff.cli import main
from veindiff.config import TrainConfig
from veindiff.denoiser import Denoiser
from veindiff.diffusion import forward_sample, make_schedule, reverse_step, x0_from_noise
from veindiff.errors import InvariantError
from veindiff.losses import circle_loss, diff_loss, fouriersim_loss, seg_loss
from veindiff.metrics import cl_dice, det_curve, eer
from veindiff.model import VeinDiffModel
from veindiff.spectral_fusion import SpectralFusion
from veindiff.synthdata import generate_dataset
from veindiff.trainer import Trainer, evaluate, joint_train, load_dataset, make_batch, pretrain_segmentation

D64 = torch.float64


# 1. diffusion kernel --------------------------------------------------------------


def test_criterion_1_forward_kernel_moments(acceptance):
    start = time.perf_counter()
    sched = make_schedule(100)
    gen = torch.Generator().manual_seed(101)
    n, classes, draws = 5, 6, 100_000
    worst_z, worst_cov = 0.0, 0.0
    for t in torch.randint(1, 101, (n,), generator=gen).tolist():
        y0 = torch.nn.functional.one_hot(torch.randint(0, classes, (1,), generator=gen), classes).to(D64)
        prior = torch.softmax(torch.randn(1, classes, generator=gen, dtype=D64), -1)
        eps = torch.randn(draws, classes, generator=gen, dtype=D64)
        y = forward_sample(y0.expand(draws, -1), prior.expand(draws, -1), t, eps, sched)
        ab = sched.alpha_bar_at(t)
        mean = np.sqrt(ab) * y0 + (1 - np.sqrt(ab)) * prior
        cov = (1 - ab) * torch.eye(classes, dtype=D64)
        se = np.sqrt((1 - ab) / draws)
        worst_z = max(worst_z, ((y.mean(0) - mean[0]).abs() / se).max().item())
        emp = torch.cov(y.T)
        worst_cov = max(worst_cov, ((emp - cov).norm() / cov.norm()).item())
    elapsed = time.perf_counter() - start
    ok = worst_z <= 4 and worst_cov <= 0.05 and elapsed < 30
    acceptance(1, ok, f"max |mean err| = {worst_z:.2f} SE (<= 4), max rel cov err = {worst_cov:.4f} (<= 0.05), "
                      f"{elapsed:.1f} s (< 30)")


# 2. exact inversion ---------------------------------------------------------------


def test_criterion_2_exact_inversion(acceptance):
    sched = make_schedule(100)
    gen = torch.Generator().manual_seed(202)
    worst = 0.0
    for _ in range(1000):
        classes = int(torch.randint(2, 13, (1,), generator=gen))
        t = int(torch.randint(1, 101, (1,), generator=gen))
        y0 = torch.nn.functional.one_hot(torch.randint(0, classes, (1,), generator=gen), classes).float()
        prior = torch.softmax(torch.randn(1, classes, generator=gen), -1)
        eps = torch.randn(1, classes, generator=gen)
        y_t = forward_sample(y0, prior, t, eps, sched)
        worst = max(worst, (x0_from_noise(y_t, eps, prior, t, sched) - y0).abs().max().item())

    y0 = torch.eye(12, dtype=D64)
    prior = torch.softmax(torch.randn(12, 12, generator=gen, dtype=D64), -1)
    eps = torch.randn(12, 12, generator=gen, dtype=D64)
    y = forward_sample(y0, prior, sched.T, eps, sched)
    for t in range(sched.T, 0, -1):
        y = reverse_step(y, eps, prior, t, sched)
    chain = (y - y0).abs().max().item()
    acceptance(2, worst <= 1e-6 and chain <= 1e-5,
               f"float32 round trip max err {worst:.2e} (<= 1e-6), oracle-noise reverse err {chain:.2e} (<= 1e-5)")


# 3. gradient checks ---------------------------------------------------------------


def test_criterion_3_gradients(acceptance):
    start = time.perf_counter()
    torch.manual_seed(303)
    errors = {}
    eps = torch.randn(3, 8, dtype=D64)
    errors["fouriersim_loss"] = finite_difference_check(lambda e: fouriersim_loss(eps, e), [torch.randn(3, 8, dtype=D64)])
    errors["diff_loss"] = finite_difference_check(lambda e: diff_loss(eps, e, 0.5), [torch.randn(3, 8, dtype=D64)])
    gt = (torch.rand(2, 1, 5, 5) > 0.5).to(D64)
    errors["seg_loss"] = finite_difference_check(lambda z: seg_loss(z, gt, 0.8), [torch.randn(2, 1, 5, 5, dtype=D64)])
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    errors["circle_loss"] = finite_difference_check(lambda e: circle_loss(e, labels), [torch.randn(6, 8, dtype=D64)])

    fusion = SpectralFusion(latent_dim=32, tokens=4, heads=2, blocks=3, out_shape=(2, 3, 3), coarse=3).double()
    for p in fusion.project.parameters():
        torch.nn.init.normal_(p, std=0.3)
    errors["sdformer"] = finite_difference_check(
        lambda d1, d2: fusion(d1, d2).square().sum(), [torch.randn(2, 32, dtype=D64), torch.randn(2, 32, dtype=D64)])

    net = Denoiser(3, 16).double().train()
    prior = torch.softmax(torch.randn(4, 3, dtype=D64), -1)
    t = torch.tensor([1, 4, 7, 10])
    errors["denoise_forward"] = finite_difference_check(
        lambda y, cond: net(y, prior, cond, t).eps_hat.square().sum(),
        [torch.randn(4, 3, dtype=D64), torch.randn(4, 16, dtype=D64)])
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    acceptance(3, worst <= 1e-4 and elapsed < 60,
               f"worst relative error {worst:.1e} ({max(errors, key=errors.get)}) (<= 1e-4), {elapsed:.1f} s (< 60)")


# 4. metric oracles ----------------------------------------------------------------


def _cl_dice_from_sets(sp, sg, p, g):
    if not sp and not sg:
        return 1.0
    if not sp or not sg:
        return 0.0
    tprec = len(sp & g) / len(sp)
    tsens = len(sg & p) / len(sg)
    return 0.0 if tprec + tsens == 0 else 2 * tprec * tsens / (tprec + tsens)


def test_criterion_4_metric_oracles(acceptance):
    rng = np.random.default_rng(404)
    eer_err = 0.0
    for _ in range(20):
        g = rng.integers(3, 10, rng.integers(2, 15))
        i = rng.integers(0, 7, rng.integers(2, 15))
        eer_err = max(eer_err, abs(eer(det_curve(g, i)) - eer_oracle(g, i)))

    masks = list(all_small_masks())
    pixels = [{tuple(x) for x in np.argwhere(m)} for m in masks]
    skeletons = [{tuple(x) for x in np.argwhere(zhang_suen_oracle(m))} for m in masks]
    refs = rng.choice(len(masks), 4, replace=False)
    cl_err = 0.0
    for k, m in enumerate(masks):
        # each mask against itself, its neighbour in enumeration order and 4 fixed references
        for r in (k, (k + 1) % len(masks), *refs):
            got = cl_dice(m, masks[r])
            want = _cl_dice_from_sets(skeletons[k], skeletons[r], pixels[k], pixels[r])
            cl_err = max(cl_err, abs(got - want))

    votes = rng.integers(0, 2, (10_000, 4))
    threshold = rng.integers(1, 5, 10_000)
    ok_votes = True
    for th in range(1, 5):
        rows = votes[threshold == th]
        got = majority_vote([rows[:, v] for v in range(4)], int(th))
        brute = np.array([1 if sum(int(b) for b in row) >= th else 0 for row in rows])
        ok_votes &= bool(np.array_equal(got, brute))
    ok = eer_err <= 1e-6 and cl_err <= 1e-12 and ok_votes
    acceptance(4, ok, f"eer max err {eer_err:.1e} on 20 sets, cl_dice max err {cl_err:.1e} on {len(masks)} masks, "
                      f"majority_vote {'matches' if ok_votes else 'differs'} on 10^4 tuples")


# 5. shape conformance -------------------------------------------------------------


def test_criterion_5_shape_chain(acceptance, monkeypatch):
    seen = {}
    original = seg_branch.check_shape

    def recording(x, shape, name):
        original(x, shape, name)
        seen[name] = tuple(x.shape[1:])

    monkeypatch.setattr(seg_branch, "check_shape", recording)
    cfg = TrainConfig(num_classes=5, T=5)
    torch.manual_seed(5)
    model = VeinDiffModel(cfg).eval()
    pred = model.predict(torch.rand(2, 1, 224, 224), torch.Generator().manual_seed(0))
    expected = {
        "Conv0": (16, 224, 224), "s_1": (128, 28, 28), "mask logits": (1, 224, 224),
        "ResBlock1": (512, 14, 14), "ResBlock2": (1024, 7, 7), "FeatOut": (1024,), "DigitsOut": (5,),
    }
    chain_ok = all(seen.get(k) == v for k, v in expected.items())
    with pytest.raises(InvariantError):
        model.auth_head(torch.rand(1, 128, 14, 14))
    with pytest.raises(InvariantError):
        model.segmentation(torch.rand(1, 1, 112, 112))
    ok = chain_ok and tuple(pred.mask_prob.shape) == (2, 1, 224, 224)
    acceptance(5, ok, "16x224x224 -> 128x28x28 -> 1x224x224 and 512x14x14 -> 1024x7x7 -> 1024 -> N "
                      f"{'checked' if ok else 'violated'} inside every forward; bad shapes raise")


# 6. zero-init continuity ----------------------------------------------------------


def test_criterion_6_zero_init_continuity(acceptance, toy_dataset):
    cfg = TrainConfig(root=toy_dataset.root, num_classes=2, samples_per_session=2, pretrain_epochs=2, epochs=3)
    train, _ = load_dataset(cfg)
    ckpt = pretrain_segmentation(cfg, train)
    model = Trainer(cfg, ckpt).model
    images, _, labels = make_batch(train, np.arange(len(train.labels)), cfg.seed, cfg.pretrain_epochs, True)
    identical = []
    for mode in (True, False):
        model.train(mode)
        with torch.no_grad():
            joint = model.joint_forward(images, labels, torch.Generator().manual_seed(1))
            plain = model.segmentation(images)
            identical.append(torch.equal(joint.mask_logits, plain.mask_logits))
    acceptance(6, all(identical), f"first joint forward vs pretrained forward bit-identical "
                                  f"(train mode {identical[0]}, eval mode {identical[1]})")


# 7. desk-scale learning -----------------------------------------------------------


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk12")
    write_fused_masks(generate_dataset(str(root), num_classes=12, samples_per_session=6, seed=0))
    return str(root)


def test_criterion_7_desk_scale_learning(acceptance, desk_dataset):
    cfg = TrainConfig.desk(root=desk_dataset)
    data = load_dataset(cfg)
    start = time.perf_counter()
    ckpt = joint_train(cfg, pretrain_segmentation(cfg, data[0]), data[0])
    minutes = (time.perf_counter() - start) / 60
    report = evaluate(cfg, ckpt, data=data)
    train_acc = evaluate(cfg, ckpt, data=(data[0], data[0])).identification_acc
    ok = report.identification_acc >= 0.85 and report.eer <= 0.10 and report.dice >= 0.80 and minutes <= 180
    acceptance(7, ok, f"test ACC {report.identification_acc:.3f} (>= 0.85), EER {report.eer:.3f} (<= 0.10), "
                      f"Dice {report.dice:.3f} (>= 0.80), clDice {report.cl_dice:.3f}, train ACC {train_acc:.3f}, "
                      f"training {minutes:.0f} min CPU (<= 180)")


# 8. ablation direction (reported, not gated) ----------------------------------------


def test_criterion_8_ablation_direction(acceptance, tmp_path):
    """Full vs Basic (no diffusion) at a reduced budget: 6 classes, 10 + 20 epochs."""
    write_fused_masks(generate_dataset(str(tmp_path), num_classes=6, samples_per_session=4, seed=8))
    wins, rows = 0, []
    for seed in (0, 1, 2):
        cfg = TrainConfig(root=str(tmp_path), num_classes=6, samples_per_session=4, pretrain_epochs=10,
                          epochs=30, seed=seed)
        data = load_dataset(cfg)
        pre = pretrain_segmentation(cfg, data[0])
        full = evaluate(cfg, joint_train(cfg, pre, data[0]), data=data)
        basic_cfg = cfg.replace(use_diffusion=False)
        basic = evaluate(basic_cfg, joint_train(basic_cfg, pre, data[0]), data=data)
        better = full.eer <= basic.eer and full.cl_dice >= basic.cl_dice
        wins += better
        rows.append(f"seed {seed}: full ({full.eer:.3f}, {full.cl_dice:.3f}) vs basic ({basic.eer:.3f}, "
                    f"{basic.cl_dice:.3f})")
    acceptance(8, wins >= 2, f"full at least as good on {wins}/3 seeds [(EER, clDice)] " + "; ".join(rows),
               gated=False)


# 9. determinism -------------------------------------------------------------------


def test_criterion_9_end_to_end_determinism(acceptance, tmp_path):
    flags = ["--num-classes", "2", "--samples-per-session", "2", "--image-h", "96", "--image-w", "160",
             "--pretrain-epochs", "1", "--epochs", "2", "--T", "10", "--seed", "9"]
    reports = []
    for run in ("a", "b"):
        root = str(tmp_path / run / "data")
        ck = str(tmp_path / run)
        steps = [
            ["synth", "--out", root],
            ["masks", "--root", root],
            ["pretrain", "--root", root, "--out", f"{ck}/pre.pt"],
            ["train", "--checkpoint", f"{ck}/pre.pt", "--out", f"{ck}/joint.pt"],
            ["eval", "--checkpoint", f"{ck}/joint.pt", "--report", f"{ck}/report.txt"],
            ["det", "--report", f"{ck}/report.txt"],
        ]
        for step in steps:
            extra = flags if step[0] in ("synth", "pretrain") else []
            assert main(["-q", *step, *extra]) == 0, step
        reports.append(f"{ck}/report.txt")
    same = filecmp.cmp(*reports, shallow=False)
    same_det = filecmp.cmp(reports[0] + ".det.csv", reports[1] + ".det.csv", shallow=False)
    acceptance(9, same and same_det, f"two seeded CLI runs: report files {'identical' if same else 'differ'}, "
                                     f"DET CSVs {'identical' if same_det else 'differ'}")
