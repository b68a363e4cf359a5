"""The dual-branch model: segmentation/authentication plus label diffusion."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .denoiser import Denoiser, MaskCondition
from .diffusion import forward_sample, make_schedule, sample_prediction
from .losses import circle_loss, diff_loss, seg_loss
from .seg_branch import AuthHead, SegmentationUNet
from .spectral_fusion import SpectralFusion

GROUPS = ("segmentation", "auth_head", "denoiser", "mask_condition", "sdformer")


class LossTerms(NamedTuple):
    total: torch.Tensor
    seg: torch.Tensor
    auth: torch.Tensor
    diff: torch.Tensor


class JointOutputs(NamedTuple):
    mask_logits: torch.Tensor
    d_f: torch.Tensor
    embedding: torch.Tensor
    logits: torch.Tensor
    eps: torch.Tensor
    eps_hat: torch.Tensor


class Prediction(NamedTuple):
    mask_prob: torch.Tensor
    embedding: torch.Tensor
    predicted_class: torch.Tensor
    logits: torch.Tensor


class VeinDiffModel(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        n = config.num_classes
        self.segmentation = SegmentationUNet()
        self.auth_head = AuthHead(n)
        self.denoiser = Denoiser(n, config.latent_dim)
        self.mask_condition = MaskCondition(config.latent_dim)
        self.sdformer = SpectralFusion(config.latent_dim, config.tokens, config.heads, config.blocks)
        self.schedule = make_schedule(config.T, config.beta1, config.betaT)

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    # losses ---------------------------------------------------------------

    def auth_loss(self, embedding, logits, labels) -> torch.Tensor:
        c = self.config
        loss = circle_loss(embedding, labels, c.circle_gamma, c.circle_delta_p, c.circle_delta_n)
        if c.auth_ce_weight:
            loss = loss + c.auth_ce_weight * F.cross_entropy(logits, labels)
        return loss

    def pretrain_losses(self, images, masks, labels) -> LossTerms:
        """Segmentation and authentication losses with no fusion (s_2 = s_1)."""
        c = self.config
        out = self.segmentation(images)
        l_seg = seg_loss(out.mask_logits, masks, c.alpha)
        auth = self.auth_head(out.s_1)
        l_auth = self.auth_loss(auth.embedding, auth.logits, labels)
        zero = l_seg.new_zeros(())
        return LossTerms(c.w_seg * l_seg + c.w_auth * l_auth, l_seg, l_auth, zero)

    def joint_forward(self, images, labels, generator=None) -> JointOutputs:
        """One bidirectional pass: a preliminary denoiser pass supplies ``d_1, d_2``
        for the fused segmentation forward, whose outputs then condition the
        denoiser on the prior from the fused authentication head."""
        c = self.config
        sched = self.schedule
        b = images.shape[0]
        s_1, skips = self.segmentation.encode(images)
        with torch.no_grad():
            _, f_s0 = self.segmentation.decode(s_1, skips)
            prior0 = torch.softmax(self.auth_head(s_1).logits, dim=-1)
            cond0 = self.mask_condition(f_s0)

        # several (t, eps) draws per image for L_diff; the first one also drives
        # the preliminary pass
        k = c.diffusion_draws
        y0 = F.one_hot(labels, c.num_classes).to(images.dtype).repeat_interleave(k, 0)
        t = torch.randint(1, sched.T + 1, (b * k,), generator=generator)
        eps = torch.randn(y0.shape, generator=generator, dtype=images.dtype)
        first = torch.arange(b) * k

        # The denoiser's embeddings enter the SD-Former as constants: with the
        # circle loss at gamma = 128, gradients from L_seg + L_auth through this
        # path swamp L_diff and the denoiser stops predicting noise.
        with torch.no_grad():
            y_t0 = forward_sample(y0[first], prior0, t[first], eps[first], sched)
            pre = self.denoiser(y_t0, prior0, cond0, t[first])
        d_f = self.sdformer(pre.d_1, pre.d_2)

        s_2 = s_1 + d_f
        mask_logits, f_s = self.segmentation.decode(s_2, skips)
        auth = self.auth_head(s_2)
        prior = torch.softmax(auth.logits, dim=-1).repeat_interleave(k, 0)
        cond = self.mask_condition(f_s).repeat_interleave(k, 0)
        y_t = forward_sample(y0, prior, t, eps, sched)
        eps_hat = self.denoiser(y_t, prior, cond, t).eps_hat
        return JointOutputs(mask_logits, d_f, auth.embedding, auth.logits, eps, eps_hat)

    def joint_losses(self, images, masks, labels, generator=None) -> LossTerms:
        c = self.config
        if not c.use_diffusion:
            return self.pretrain_losses(images, masks, labels)
        out = self.joint_forward(images, labels, generator)
        l_seg = seg_loss(out.mask_logits, masks, c.alpha)
        l_auth = self.auth_loss(out.embedding, out.logits, labels)
        l_diff = diff_loss(out.eps, out.eps_hat, c.lam)
        total = c.w_seg * l_seg + c.w_auth * l_auth + c.w_diff * l_diff
        return LossTerms(total, l_seg, l_auth, l_diff)

    # inference ------------------------------------------------------------

    def _eps(self, y_t, prior, cond, t):
        return self.denoiser(y_t, prior, cond, t).eps_hat

    @torch.no_grad()
    def predict(self, images, generator=None) -> Prediction:
        """Mask probabilities, verification embedding and identity for a batch.

        Without diffusion the identity is the argmax of the authentication
        logits. With diffusion a first reverse chain on the unfused features
        yields ``d_1, d_2`` at its last step; the fused features then give the
        final mask, embedding and prior for a second chain whose result is the
        identity.
        """
        c = self.config
        s_1, skips = self.segmentation.encode(images)
        logits0, f_s0 = self.segmentation.decode(s_1, skips)
        auth0 = self.auth_head(s_1)
        if not c.use_diffusion:
            return Prediction(torch.sigmoid(logits0), auth0.embedding, auth0.logits.argmax(-1), auth0.logits)

        captured = {}

        def keep_last(y, prior, cond, t):
            out = self.denoiser(y, prior, cond, t)
            captured["d"] = (out.d_1, out.d_2)
            return out.eps_hat

        prior0 = torch.softmax(auth0.logits, dim=-1)
        cond0 = self.mask_condition(f_s0)
        state = generator.get_state() if generator is not None else None
        sample_prediction(keep_last, prior0, cond0, self.schedule, generator=generator, eta=c.eta)
        d_f = self.sdformer(*captured["d"])
        s_2 = s_1 + d_f
        logits, f_s = self.segmentation.decode(s_2, skips)
        auth = self.auth_head(s_2)
        prior = torch.softmax(auth.logits, dim=-1)
        if state is not None:
            # the second chain starts from the same terminal noise draw
            generator.set_state(state)
        _, cls = sample_prediction(self._eps, prior, self.mask_condition(f_s), self.schedule,
                                   generator=generator, eta=c.eta)
        return Prediction(torch.sigmoid(logits), auth.embedding, cls, auth.logits)
