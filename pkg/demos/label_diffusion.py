"""
Label diffusion in a few lines
==============================

A one-hot identity label is blurred toward the class prior by the forward
kernel, and a reverse chain walks it back.
"""

import torch

from veindiff.diffusion import forward_sample, make_schedule, reverse_step, sample_prediction, x0_from_noise

torch.set_printoptions(precision=3, sci_mode=False)
sched = make_schedule(T=100)
print("alpha_bar at t=1, 50, 100:", [round(sched.alpha_bar_at(t), 4) for t in (1, 50, 100)])

# one sample of 4 classes whose true identity is class 2
y0 = torch.tensor([[0.0, 0.0, 1.0, 0.0]])
prior = torch.tensor([[0.1, 0.2, 0.6, 0.1]])   # what the authentication head believes
gen = torch.Generator().manual_seed(0)
eps = torch.randn(y0.shape, generator=gen)

# the label drifts toward N(prior, I) as t grows
for t in (1, 25, 50, 100):
    print(f"y_{t:<3d}", forward_sample(y0, prior, t, eps, sched))

# knowing the noise exactly, the label comes back in one step ...
y_t = forward_sample(y0, prior, 60, eps, sched)
print("x0 from true noise:", x0_from_noise(y_t, eps, prior, 60, sched))

# ... or through the whole deterministic reverse chain
y = forward_sample(y0, prior, sched.T, eps, sched)
for t in range(sched.T, 0, -1):
    y = reverse_step(y, eps, prior, t, sched)
print("after 100 reverse steps:", y)


# a denoiser that always predicts zero noise gives an affine map of the
# terminal draw y_T ~ N(prior, I), so its pick depends on that draw
def zero(y_t, prior, cond, t):
    return torch.zeros_like(y_t)


for seed in range(3):
    y_hat, cls = sample_prediction(zero, prior, None, sched, generator=torch.Generator().manual_seed(seed))
    print(f"seed {seed}: zero-noise denoiser picks class {cls.item()}", y_hat)
