# Tweedie's identity and the denoiser-loss / cross-entropy gradient match on
# analytic Gaussian mixtures, where every quantity has a closed form.
import numpy as np

from sud2 import distributions as dist
from sud2.denoisers import AnalyticDenoiser
from sud2.verify import (check_theorem1, check_tweedie, cross_entropy_fd_gradient, denoiser_loss_gradient,
                         standard_mixtures)

sigma = 0.5
gmm = standard_mixtures()["2d_three"]
smoothed = dist.smooth(gmm, sigma)

# The MMSE denoiser is the input plus sigma^2 times the score of the smoothed density.
r = dist.sample(smoothed, 5, seed=0)
print("posterior mean      ", np.round(dist.mmse_denoise(gmm, r, sigma), 4).tolist())
print("r + sigma^2 * score ", np.round(r + sigma**2 * dist.score(smoothed, r), 4).tolist())

# Descending the denoiser loss with fixed labels moves outputs along the
# gradient of the smoothed cross entropy, scaled by 2 sigma^2.
f = dist.sample(smoothed, 8, seed=1)
g_loss = denoiser_loss_gradient(f, AnalyticDenoiser(gmm, sigma))
g_ce = cross_entropy_fd_gradient(f, smoothed)
print("max |g_loss - 2 sigma^2 g_ce| =", np.abs(g_loss - 2 * sigma**2 * g_ce).max())

for name, g in standard_mixtures().items():
    print(check_tweedie(g, sigma, 100, seed=0, name=f"tweedie_{name}"))
    print(check_theorem1(g, sigma, 50, seed=0, name=f"theorem1_{name}"))
