"""Differentiable training losses.

Every loss here is a plain function of its tensor inputs (no detached
weighting terms), so autograd gradients agree with finite differences.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import InvariantError

DICE_SMOOTH = 1.0


def seg_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, alpha: float = 0.8) -> torch.Tensor:
    """Soft Dice loss plus ``alpha`` times binary cross-entropy.

    Dice is computed per sample with a smoothing constant of 1 in numerator and
    denominator and averaged over the batch.
    """
    if mask_logits.shape != gt_mask.shape:
        raise InvariantError(f"logits {tuple(mask_logits.shape)} vs mask {tuple(gt_mask.shape)}")
    gt = gt_mask.to(mask_logits.dtype)
    if not torch.all((gt == 0) | (gt == 1)):
        raise InvariantError("ground-truth mask must be binary")
    probs = torch.sigmoid(mask_logits)
    dims = tuple(range(1, probs.dim()))
    inter = (probs * gt).sum(dim=dims)
    denom = probs.sum(dim=dims) + gt.sum(dim=dims)
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    bce = F.binary_cross_entropy_with_logits(mask_logits, gt)
    return dice.mean() + alpha * bce


def circle_loss_from_similarities(
    s_p: torch.Tensor,
    s_n: torch.Tensor,
    gamma: float = 128.0,
    delta_p: float = 0.95,
    delta_n: float = 0.05,
) -> torch.Tensor:
    """Circle loss over given positive and negative pair similarities.

    The relaxation margin is ``m = delta_n`` with optima ``O_p = 1 + m`` and
    ``O_n = -m``. An empty positive or negative set gives 0.
    """
    if s_p.numel() == 0 or s_n.numel() == 0:
        return (s_p.sum() + s_n.sum()) * 0.0
    m = delta_n
    alpha_p = torch.clamp(1.0 + m - s_p, min=0.0)
    alpha_n = torch.clamp(s_n + m, min=0.0)
    logit_n = gamma * alpha_n * (s_n - delta_n)
    logit_p = -gamma * alpha_p * (s_p - delta_p)
    # log(1 + sum exp(a) * sum exp(b)) without overflow
    return F.softplus(torch.logsumexp(logit_n, dim=0) + torch.logsumexp(logit_p, dim=0))


def pair_similarities(embeddings: torch.Tensor, labels: torch.Tensor):
    """Cosine similarities of all intra-class and inter-class pairs."""
    if embeddings.shape[0] < 2:
        raise InvariantError("circle loss needs a batch of at least 2")
    z = F.normalize(embeddings, dim=1)
    sim = z @ z.T
    i, j = torch.triu_indices(len(z), len(z), offset=1, device=z.device)
    same = labels[i] == labels[j]
    pairs = sim[i, j]
    return pairs[same], pairs[~same]


def circle_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    gamma: float = 128.0,
    delta_p: float = 0.95,
    delta_n: float = 0.05,
) -> torch.Tensor:
    s_p, s_n = pair_similarities(embeddings, labels)
    return circle_loss_from_similarities(s_p, s_n, gamma, delta_p, delta_n)


def default_ssim_constants(x: torch.Tensor, y: torch.Tensor):
    """C1 = (0.01 R)^2, C2 = (0.03 R)^2 with R the joint dynamic range (>= 1e-3)."""
    both = torch.cat([x, y], dim=-1)
    rng = both.amax(dim=-1) - both.amin(dim=-1)
    rng = torch.clamp(rng, min=1e-3)
    return (0.01 * rng) ** 2, (0.03 * rng) ** 2


def ssim_global(x: torch.Tensor, y: torch.Tensor, C1=None, C2=None) -> torch.Tensor:
    """SSIM with one window spanning the whole last axis (population statistics)."""
    if x.shape != y.shape:
        raise InvariantError(f"shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < 2:
        raise InvariantError("ssim needs vectors of length >= 2")
    if C1 is None or C2 is None:
        c1, c2 = default_ssim_constants(x, y)
        C1 = c1 if C1 is None else C1
        C2 = c2 if C2 is None else C2
    mu_x = x.mean(dim=-1)
    mu_y = y.mean(dim=-1)
    dx = x - mu_x.unsqueeze(-1)
    dy = y - mu_y.unsqueeze(-1)
    var_x = (dx * dx).mean(dim=-1)
    var_y = (dy * dy).mean(dim=-1)
    cov = (dx * dy).mean(dim=-1)
    num = (2 * mu_x * mu_y + C1) * (2 * cov + C2)
    den = (mu_x**2 + mu_y**2 + C1) * (var_x + var_y + C2)
    return num / den


def spectrum(v: torch.Tensor):
    """Amplitude and principal-branch phase of the DFT along the last axis."""
    z = torch.fft.fft(v, dim=-1)
    return z.abs(), torch.angle(z)


def fouriersim_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """(1 - SSIM) of the amplitude spectra plus (1 - SSIM) of the phase spectra."""
    if eps.shape != eps_hat.shape:
        raise InvariantError(f"shapes differ: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    if not (torch.isfinite(eps).all() and torch.isfinite(eps_hat).all()):
        raise InvariantError("non-finite noise vectors")
    amp, phase = spectrum(eps)
    amp_hat, phase_hat = spectrum(eps_hat)
    loss = (1.0 - ssim_global(amp, amp_hat)) + (1.0 - ssim_global(phase, phase_hat))
    return loss.mean()


def diff_loss(eps: torch.Tensor, eps_hat: torch.Tensor, lam: float = 0.5) -> torch.Tensor:
    """Noise-prediction loss: MSE plus ``lam`` times the Fourier SSIM term."""
    mse = F.mse_loss(eps_hat, eps)
    if lam == 0:
        return mse
    return mse + lam * fouriersim_loss(eps, eps_hat)

