import os

import numpy as np
import pytest
import torch

from veindiff.config import TrainConfig
from veindiff.errors import CheckpointError, ConfigError, DatasetError, ProtocolError, TrainingError
from veindiff.model import LossTerms, VeinDiffModel
from veindiff.synthdata import generate_dataset
from veindiff.trainer import (
    Checkpoint,
    Trainer,
    balanced_batches,
    evaluate,
    joint_train,
    load_dataset,
    make_batch,
    pretrain_segmentation,
    summarize,
)


def toy_config(manifest, **kw) -> TrainConfig:
    base = dict(root=manifest.root, num_classes=2, samples_per_session=2, pretrain_epochs=2, epochs=3)
    base.update(kw)
    return TrainConfig(**base).validated()


@pytest.fixture(scope="module")
def toy(toy_dataset):
    cfg = toy_config(toy_dataset)
    return cfg, load_dataset(cfg)


@pytest.fixture(scope="module")
def pretrained(toy):
    cfg, (train, _) = toy
    return pretrain_segmentation(cfg, train)


def one_batch(split, epoch=0):
    return make_batch(split, np.arange(len(split.labels)), 0, epoch, train=True)


# batching ---------------------------------------------------------------------


@pytest.mark.parametrize("counts", [(6, 6, 6), (3, 5), (2, 2, 2, 2, 2), (7,) * 12])
def test_balanced_batches_hold_positive_and_negative_pairs(counts, rng):
    labels = np.repeat(np.arange(len(counts)), counts)
    batches = balanced_batches(labels, 4, rng)
    seen = np.concatenate(batches)
    assert set(seen) == set(range(len(labels)))
    for b in batches:
        lab = labels[b]
        assert len(np.unique(lab)) < len(lab)
    mixed = sum(len(np.unique(labels[b])) > 1 for b in batches)
    assert mixed >= len(batches) - 1


# pretraining ------------------------------------------------------------------


def test_pretrain_reduces_segmentation_loss(toy):
    cfg, (train, _) = toy
    ckpt = pretrain_segmentation(cfg.replace(pretrain_epochs=30, epochs=30), train)
    seg = [h["seg"] for h in ckpt.history]
    assert len(seg) == 30 and ckpt.phase == "pretrain" and ckpt.epoch == 30
    assert np.mean(seg[-3:]) < np.mean(seg[:3])


def test_pretrain_only_touches_segmentation_groups(toy, pretrained):
    cfg, _ = toy
    fresh = Trainer(cfg).checkpoint()
    for name in ("denoiser", "mask_condition", "sdformer"):
        for key, value in fresh.groups[name].items():
            assert torch.equal(value, pretrained.groups[name][key]), (name, key)
    changed = any(not torch.equal(v, pretrained.groups["segmentation"][k])
                  for k, v in fresh.groups["segmentation"].items())
    assert changed


def test_seeded_runs_are_identical(toy, pretrained):
    cfg, (train, _) = toy
    again = pretrain_segmentation(cfg, train)
    assert again.history == pretrained.history
    assert again.digest() == pretrained.digest()


def test_missing_mask_names_path(tmp_path):
    manifest = generate_dataset(str(tmp_path), num_classes=2, samples_per_session=1, image_h=64, image_w=64, seed=1)
    victim = manifest.mask_path(manifest.entries[1])
    os.remove(victim)
    with pytest.raises(DatasetError, match=os.path.basename(victim)):
        pretrain_segmentation(TrainConfig(root=str(tmp_path), num_classes=2, samples_per_session=1))


def test_non_finite_loss_aborts_with_diagnostics(toy, monkeypatch):
    cfg, (train, _) = toy
    trainer = Trainer(cfg)

    def broken(images, masks, labels):
        nan = torch.tensor(float("nan"), requires_grad=True)
        return LossTerms(nan, nan, nan, nan)

    monkeypatch.setattr(trainer.model, "pretrain_losses", broken)
    with pytest.raises(TrainingError, match=r"epoch 0 batch 0: labels=\[") as info:
        trainer.train_epoch(train, joint=False)
    assert "seg=nan" in str(info.value)


# checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, toy, pretrained):
    cfg, (train, _) = toy
    path = str(tmp_path / "ck.pt")
    pretrained.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.digest() == pretrained.digest()
    assert (loaded.epoch, loaded.phase, loaded.history) == (pretrained.epoch, pretrained.phase, pretrained.history)
    assert loaded.train_config() == cfg

    images, masks, labels = one_batch(train)
    losses = []
    for ck in (pretrained, loaded):
        model = Trainer(cfg, ck).model.eval()
        with torch.no_grad():
            losses.append(model.pretrain_losses(images, masks, labels).total.item())
    assert losses[0] == losses[1]


def test_checkpoint_version_and_groups_checked(tmp_path, pretrained):
    payload = {**pretrained.__dict__, "format_version": 99}
    torch.save(payload, tmp_path / "old.pt")
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.load(str(tmp_path / "old.pt"))
    groups = dict(pretrained.groups)
    del groups["sdformer"]
    torch.save({**pretrained.__dict__, "groups": groups}, tmp_path / "partial.pt")
    with pytest.raises(CheckpointError, match="sdformer"):
        Checkpoint.load(str(tmp_path / "partial.pt"))
    with pytest.raises(CheckpointError):
        Checkpoint.load(str(tmp_path / "absent.pt"))


def test_resume_matches_uninterrupted_run(tmp_path, toy, pretrained):
    cfg, (train, _) = toy
    straight = joint_train(cfg.replace(epochs=4), pretrained, train)
    half = joint_train(cfg.replace(epochs=3), pretrained, train)
    half.save(str(tmp_path / "half.pt"))
    resumed = joint_train(cfg.replace(epochs=4), Checkpoint.load(str(tmp_path / "half.pt")), train)
    assert resumed.digest() == straight.digest()
    assert resumed.history == straight.history
    with pytest.raises(ConfigError):
        joint_train(cfg.replace(epochs=2), resumed, train)


# joint training ---------------------------------------------------------------


def test_zero_init_fusion_reproduces_pretrained_forward(toy, pretrained):
    cfg, (train, _) = toy
    model = Trainer(cfg, pretrained).model.train()
    images, _, labels = one_batch(train)
    with torch.no_grad():
        out = model.joint_forward(images, labels, torch.Generator().manual_seed(0))
        reference = model.segmentation(images).mask_logits
    assert torch.count_nonzero(out.d_f) == 0
    assert torch.equal(out.mask_logits, reference)


def test_diffusion_draws_widen_only_the_denoiser_batch(toy, pretrained):
    cfg, (train, _) = toy
    model = Trainer(cfg.replace(diffusion_draws=3), pretrained).model.train()
    images, _, labels = one_batch(train)
    with torch.no_grad():
        out = model.joint_forward(images, labels, torch.Generator().manual_seed(2))
    assert out.mask_logits.shape[0] == out.logits.shape[0] == len(labels)
    assert out.eps.shape == out.eps_hat.shape == (3 * len(labels), 2)


def _grads(model, loss):
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}


def test_zero_diff_weight_isolates_denoiser(toy, pretrained):
    cfg, (train, _) = toy
    images, masks, labels = one_batch(train)
    model = Trainer(cfg.replace(w_diff=0.0), pretrained).model.train()
    terms = model.joint_losses(images, masks, labels, torch.Generator().manual_seed(5))
    total = _grads(model, terms.total)
    terms = model.joint_losses(images, masks, labels, torch.Generator().manual_seed(5))
    diff_only = _grads(model, terms.diff)
    denoiser = [n for n in total if n.startswith("denoiser.")]
    assert any(diff_only[n].abs().sum() > 0 for n in denoiser)
    terms = model.joint_losses(images, masks, labels, torch.Generator().manual_seed(5))
    without = _grads(model, terms.seg + terms.auth)
    for n in denoiser:
        torch.testing.assert_close(total[n], without[n], rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("weight", ["w_seg", "w_auth", "w_diff"])
def test_loss_weight_gating(weight, toy, pretrained):
    """A zero weight gives the same one-step update as dropping that term by hand.

    Adam rescales rounding noise to about 1e-7 here, while a leaked term would
    move parameters by roughly the learning rate (>= 1e-4)."""
    cfg, (train, _) = toy
    images, masks, labels = one_batch(train)
    names = {"w_seg": "seg", "w_auth": "auth", "w_diff": "diff"}
    deltas = []
    for gated in (True, False):
        trainer = Trainer(cfg.replace(**{weight: 0.0}) if gated else cfg, pretrained)
        before = {n: p.detach().clone() for n, p in trainer.model.named_parameters()}
        trainer.model.train()
        terms = trainer.model.joint_losses(images, masks, labels, torch.Generator().manual_seed(9))
        loss = terms.total if gated else sum(getattr(terms, k) for k in names.values() if k != names[weight])
        trainer.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        for p in trainer.model.parameters():
            # Adam skips None grads but still applies momentum to zero grads
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        trainer.optimizer.step()
        deltas.append({n: p.detach() - before[n] for n, p in trainer.model.named_parameters()})
    for n in deltas[0]:
        torch.testing.assert_close(deltas[0][n], deltas[1][n], rtol=1e-4, atol=1e-6)


def test_joint_step_changes_every_group(toy, pretrained):
    cfg, (train, _) = toy
    after = joint_train(cfg, pretrained, train)
    assert after.phase == "joint" and after.epoch == cfg.epochs
    for name in ("segmentation", "auth_head", "denoiser", "mask_condition", "sdformer"):
        assert any(not torch.equal(v, pretrained.groups[name][k]) for k, v in after.groups[name].items()), name


# evaluation -------------------------------------------------------------------


def test_perfect_predictor_scores(rng):
    gts = (rng.random((6, 16, 16)) < 0.3).astype(np.uint8)
    labels = np.array([0, 0, 1, 1, 2, 2])
    emb = np.eye(3)[labels] + 0.01 * rng.random((6, 3))
    out = summarize(gts.astype(float), gts, labels, labels, emb, labels, emb)
    r = out.report
    assert (r.dice, r.identification_acc, r.eer, r.pixel_acc, r.miou, r.cl_dice) == (1.0, 1.0, 0.0, 1.0, 1.0, 1.0)
    assert r.auc == 1.0


def test_missing_gallery_class_is_protocol_error(rng):
    gts = np.zeros((2, 4, 4), np.uint8)
    with pytest.raises(ProtocolError, match=r"\[2\]"):
        summarize(gts, gts, [0, 2], [0, 2], np.eye(2), [0, 1], np.eye(2))


@pytest.fixture(scope="module")
def twelve_class(tmp_path_factory):
    root = tmp_path_factory.mktemp("twelve")
    generate_dataset(str(root), num_classes=12, samples_per_session=6, image_h=64, image_w=128, seed=11)
    return str(root)


def test_untrained_model_is_at_chance(twelve_class, tmp_path):
    cfg = TrainConfig(root=twelve_class, num_classes=12, image_h=64, image_w=128, T=20, seed=4)
    ckpt = Trainer(cfg).checkpoint()
    report = evaluate(cfg, ckpt, str(tmp_path / "report.txt"))
    assert abs(report.identification_acc - 1 / 12) <= 0.15
    assert 0.0 <= report.eer <= 1.0
    assert os.path.exists(tmp_path / "report.txt.det.csv")
    assert os.path.exists(tmp_path / "report.txt.scores.npz")


def test_restore_rejects_mismatched_class_count(toy, pretrained):
    cfg, _ = toy
    with pytest.raises(RuntimeError):
        Trainer(cfg.replace(num_classes=3), pretrained)


def test_model_groups_are_disjoint(toy):
    cfg, _ = toy
    model = VeinDiffModel(cfg)
    owned = [id(p) for name in ("segmentation", "auth_head", "denoiser", "mask_condition", "sdformer")
             for p in model.group(name).parameters()]
    assert len(owned) == len(set(owned)) == len(list(model.parameters()))
    with pytest.raises(KeyError):
        model.group("optimizer")
