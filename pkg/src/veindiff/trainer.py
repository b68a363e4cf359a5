"""Pretraining, joint training, evaluation and checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import TrainConfig
from .errors import CheckpointError, ConfigError, DatasetError, ProtocolError, TrainingError
from .metrics import (
    MetricsReport,
    cl_dice,
    det_curve,
    dice_suite,
    eer,
    identification_acc,
    nanmean,
    verification_scores,
    write_det_csv,
)
from .model import GROUPS, VeinDiffModel
from .synthdata import AugmentParams, DatasetManifest, augment, center_square, load_png, read_manifest, split_by_session

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SEG_GROUPS = ("segmentation", "auth_head")
DIFF_GROUPS = ("denoiser", "mask_condition", "sdformer")


# data -----------------------------------------------------------------------


@dataclass
class LoadedSplit:
    images: list[np.ndarray]
    masks: list[np.ndarray]
    labels: np.ndarray


def load_split(manifest: DatasetManifest) -> LoadedSplit:
    for e in manifest.entries:
        for path in (manifest.image_path(e), manifest.mask_path(e)):
            if not os.path.exists(path):
                raise DatasetError(f"missing file: {path}")
    images = [load_png(manifest.image_path(e)) for e in manifest.entries]
    masks = [load_png(manifest.mask_path(e), binary=True) for e in manifest.entries]
    return LoadedSplit(images, masks, np.array([e.class_id for e in manifest.entries], dtype=np.int64))


def load_dataset(config: TrainConfig) -> tuple[LoadedSplit, LoadedSplit]:
    path = config.root
    manifest_file = os.path.join(path, "manifest.txt") if os.path.isdir(path) else path
    if not os.path.exists(manifest_file):
        raise DatasetError(f"missing file: {manifest_file}")
    manifest = read_manifest(manifest_file, config.num_classes)
    train, test = split_by_session(manifest)
    return load_split(train), load_split(test)


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Batches of same-class pairs drawn from different classes.

    Every sample appears once per epoch; a class with an odd count repeats one
    of its samples so each batch holds positive and negative pairs.
    """
    per_class = {}
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) % 2:
            idx = np.append(idx, rng.choice(idx))
        per_class[int(c)] = idx.reshape(-1, 2)
    rounds = max(len(p) for p in per_class.values())
    order = []
    for r in range(rounds):
        for c in rng.permutation(list(per_class)):
            if r < len(per_class[c]):
                order.append(per_class[c][r])
    pairs_per_batch = max(batch_size // 2, 1)
    batches = [np.concatenate(order[i : i + pairs_per_batch]) for i in range(0, len(order), pairs_per_batch)]
    return [b for b in batches if len(b) >= 2]


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index + 1]))


def make_batch(split: LoadedSplit, idx, seed: int, epoch: int, train: bool, params: AugmentParams | None = None):
    imgs, msks = [], []
    for k, i in enumerate(idx):
        if train:
            img, msk = augment(split.images[i], split.masks[i], sample_rng(seed, epoch, k * 100003 + int(i)), params)
        else:
            img, msk = center_square(split.images[i], split.masks[i])
        imgs.append(img)
        msks.append(msk)
    images = torch.from_numpy(np.stack(imgs)[:, None].astype(np.float32))
    # channels-last convolutions are markedly faster on CPU
    images = images.contiguous(memory_format=torch.channels_last)
    masks = torch.from_numpy(np.stack(msks)[:, None].astype(np.float32))
    labels = torch.from_numpy(split.labels[np.asarray(idx)])
    return images, masks, labels


# checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    groups: dict
    optimizer: dict
    epoch: int
    phase: str
    rng: dict
    config: dict
    history: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(dataclasses.asdict(self), path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        version = payload.get("format_version") if isinstance(payload, dict) else None
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
        missing = set(GROUPS) - set(payload["groups"])
        if missing:
            raise CheckpointError(f"{path}: missing parameter groups {sorted(missing)}")
        return cls(**payload)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in GROUPS:
            for key, value in sorted(self.groups[name].items()):
                h.update(key.encode())
                h.update(value.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


# training -------------------------------------------------------------------


def configure_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)


class Trainer:
    """Holds the model, one AdamW optimizer with two learning-rate groups and the step RNG."""

    def __init__(self, config: TrainConfig, checkpoint: Checkpoint | None = None):
        self.config = config.validated()
        configure_determinism(self.config)
        self.model = VeinDiffModel(self.config).to(memory_format=torch.channels_last)
        seg = [p for g in SEG_GROUPS for p in self.model.group(g).parameters()]
        diff = [p for g in DIFF_GROUPS for p in self.model.group(g).parameters()]
        self.optimizer = torch.optim.AdamW(
            [{"params": seg, "lr": self.config.lr_seg}, {"params": diff, "lr": self.config.lr_denoise}],
            weight_decay=self.config.weight_decay,
        )
        self.generator = torch.Generator().manual_seed(self.config.seed)
        self.epoch = 0
        self.phase = "init"
        self.history: list[dict] = []
        if checkpoint is not None:
            self.restore(checkpoint)

    def restore(self, ckpt: Checkpoint) -> None:
        for name in GROUPS:
            self.model.group(name).load_state_dict(ckpt.groups[name])
        # load_state_dict keeps same-dtype tensors, so copy to leave the checkpoint intact
        self.optimizer.load_state_dict(copy.deepcopy(ckpt.optimizer))
        self.generator.set_state(ckpt.rng["generator"])
        torch.set_rng_state(ckpt.rng["torch"])
        self.epoch = ckpt.epoch
        self.phase = ckpt.phase
        self.history = list(ckpt.history)

    def checkpoint(self) -> Checkpoint:
        groups = {
            name: {k: v.detach().clone() for k, v in self.model.group(name).state_dict().items()}
            for name in GROUPS
        }
        return Checkpoint(
            groups=groups,
            optimizer=copy.deepcopy(self.optimizer.state_dict()),
            epoch=self.epoch,
            phase=self.phase,
            rng={"generator": self.generator.get_state(), "torch": torch.get_rng_state()},
            config=dataclasses.asdict(self.config),
            history=list(self.history),
        )

    def train_epoch(self, split: LoadedSplit, joint: bool) -> dict:
        c = self.config
        self.model.train()
        rng = sample_rng(c.seed, self.epoch, -1)
        params = AugmentParams() if c.augment else AugmentParams.identity()
        sums = {"total": 0.0, "seg": 0.0, "auth": 0.0, "diff": 0.0}
        batches = balanced_batches(split.labels, c.batch_size, rng)
        for b, idx in enumerate(batches):
            images, masks, labels = make_batch(split, idx, c.seed, self.epoch, True, params)
            if joint:
                terms = self.model.joint_losses(images, masks, labels, self.generator)
            else:
                terms = self.model.pretrain_losses(images, masks, labels)
            if not torch.isfinite(terms.total):
                raise TrainingError(
                    f"non-finite loss at epoch {self.epoch} batch {b}: labels={labels.tolist()} "
                    f"seg={terms.seg.item()} auth={terms.auth.item()} diff={terms.diff.item()}"
                )
            self.optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            self.optimizer.step()
            for key, value in zip(sums, terms):
                sums[key] += float(value.detach())
        record = {k: v / len(batches) for k, v in sums.items()}
        record.update(epoch=self.epoch, phase="joint" if joint else "pretrain")
        self.history.append(record)
        self.epoch += 1
        log.info("epoch %d %s loss %.4f (seg %.4f auth %.4f diff %.4f)", record["epoch"], record["phase"],
                 record["total"], record["seg"], record["auth"], record["diff"])
        return record

    def run(self, split: LoadedSplit, epochs: int, joint: bool, phase: str) -> Checkpoint:
        self.phase = phase
        for _ in range(epochs):
            self.train_epoch(split, joint)
        return self.checkpoint()


def pretrain_segmentation(config: TrainConfig, data: LoadedSplit | None = None) -> Checkpoint:
    """Train the segmentation U-Net and authentication head without fusion."""
    if data is None:
        data, _ = load_dataset(config)
    trainer = Trainer(config)
    return trainer.run(data, config.pretrain_epochs, joint=False, phase="pretrain")


def joint_train(config: TrainConfig, start: Checkpoint, data: LoadedSplit | None = None) -> Checkpoint:
    """Continue from a pretrain (or partial joint) checkpoint with both branches and
    all three losses until ``config.epochs`` epochs have been run in total."""
    if data is None:
        data, _ = load_dataset(config)
    if start.epoch > config.epochs:
        raise ConfigError(f"checkpoint is at epoch {start.epoch}, past epochs = {config.epochs}")
    trainer = Trainer(config, start)
    return trainer.run(data, config.epochs - start.epoch, joint=True, phase="joint")


# evaluation -------------------------------------------------------------------


@dataclass
class EvalOutputs:
    report: MetricsReport
    genuine: np.ndarray
    impostor: np.ndarray


def _predict(model: VeinDiffModel, split: LoadedSplit, batch_size: int, generator) -> tuple:
    probs, embs, classes, gts = [], [], [], []
    for start in range(0, len(split.labels), batch_size):
        idx = np.arange(start, min(start + batch_size, len(split.labels)))
        images, masks, _ = make_batch(split, idx, 0, 0, train=False)
        pred = model.predict(images, generator)
        probs.append(pred.mask_prob[:, 0].numpy())
        embs.append(pred.embedding.numpy())
        classes.append(pred.predicted_class.numpy())
        gts.append(masks[:, 0].numpy().astype(np.uint8))
    return np.concatenate(probs), np.concatenate(embs), np.concatenate(classes), np.concatenate(gts)


def summarize(mask_probs, gt_masks, predicted, actual, gallery_emb, gallery_labels, probe_emb,
              metadata: dict | None = None) -> EvalOutputs:
    """Aggregate per-image predictions into a :class:`MetricsReport`."""
    missing = set(np.unique(actual)) - set(np.unique(gallery_labels))
    if missing:
        raise ProtocolError(f"classes {sorted(int(m) for m in missing)} have no gallery samples")
    seg = np.array([dice_suite(p, g) for p, g in zip(mask_probs, gt_masks)], dtype=np.float64)
    cld = [cl_dice((p >= 0.5).astype(np.uint8), g) for p, g in zip(mask_probs, gt_masks)]
    genuine, impostor = verification_scores(gallery_emb, gallery_labels, probe_emb, actual)
    report = MetricsReport(
        eer=eer(det_curve(genuine, impostor)),
        identification_acc=identification_acc(predicted, actual),
        dice=nanmean(seg[:, 0]),
        cl_dice=nanmean(cld),
        pixel_acc=nanmean(seg[:, 1]),
        auc=nanmean(seg[:, 2]),
        miou=nanmean(seg[:, 3]),
        metadata=dict(metadata or {}),
    )
    return EvalOutputs(report, genuine, impostor)


def dataset_digest(config: TrainConfig) -> str:
    path = config.root
    manifest_file = os.path.join(path, "manifest.txt") if os.path.isdir(path) else path
    with open(manifest_file, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def evaluate(config: TrainConfig, ckpt: Checkpoint, report_path: str | None = None,
             data: tuple[LoadedSplit, LoadedSplit] | None = None) -> MetricsReport:
    """Score a checkpoint on the test session and optionally write the report files.

    The report is accompanied by a DET CSV (``<report>.det.csv``) and the raw
    verification scores (``<report>.scores.npz``).
    """
    train, test = data if data is not None else load_dataset(config)
    trainer = Trainer(config, ckpt)
    model = trainer.model.eval()
    generator = torch.Generator().manual_seed(config.seed)
    _, gallery_emb, _, _ = _predict(model, train, config.batch_size, generator)
    probs, probe_emb, predicted, gts = _predict(model, test, config.batch_size, generator)
    meta = {"dataset": dataset_digest(config), "checkpoint": ckpt.digest(), "T": config.T}
    out = summarize(probs, gts, predicted, test.labels, gallery_emb, train.labels, probe_emb, meta)
    if report_path is not None:
        out.report.write(report_path)
        np.savez(scores_path(report_path), genuine=out.genuine, impostor=out.impostor)
        write_det_csv(det_path(report_path), det_curve(out.genuine, out.impostor))
    return out.report


def scores_path(report_path: str) -> str:
    return report_path + ".scores.npz"


def det_path(report_path: str) -> str:
    return report_path + ".det.csv"
