# Pre-train a small noise predictor on clean toy faces and use it as a
# roundtrip denoiser: t forward noising steps, then t learned reverse steps.
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from sud2.denoisers import DiffusionDenoiser, ddpm_reverse, linear_schedule
from sud2.models import UNetConfig, build_diffusion_net
from sud2.tasks import make_toy_dataset, psnr, to_uint8
from sud2.trainer import ddpm_eps_mse, pretrain_ddpm, to_images, to_tensor

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
b = make_toy_dataset("inpaint", counts=(5, 600, 20), seed=0, size=16, n_heldout=16)
schedule = linear_schedule(50)
net = build_diffusion_net(UNetConfig(base_width=16, depth=2, use_attention=True), len(schedule), seed=0)
net, rep = pretrain_ddpm(b.unpaired_clean, net, schedule, epochs=25, seed=0)
print("epoch losses", np.round(rep["loss"][::5], 4).tolist())
print("held-out eps MSE", round(ddpm_eps_mse(net, b.heldout_x, schedule), 4))

# Denoising a noisy intermediate drawn from the training marginal.
x = to_tensor(b.heldout_x)
g = torch.Generator().manual_seed(0)
t = 9
abar = float(schedule.alpha_bars[t])
with torch.no_grad():
    noisy = math.sqrt(abar) * x + math.sqrt(1 - abar) * torch.randn(x.shape, generator=g)
    back = ddpm_reverse(noisy, t, schedule, net, g)
    labels = DiffusionDenoiser(net, schedule, steps=10)(x, g)
for name, v in (("noisy", noisy), ("reversed", back), ("roundtrip label", labels)):
    print(f"{name:16s} PSNR {np.mean([psnr(a.clip(-1, 1), r) for a, r in zip(to_images(v), b.heldout_x)]):.2f} dB")
grid = np.concatenate([np.concatenate(list(to_images(v)[:8].clip(-1, 1)), 1) for v in (x, noisy, back, labels)], 0)
Image.fromarray(to_uint8(grid)).resize((8 * 64, 4 * 64), Image.NEAREST).save(out / "diffusion_roundtrip.png")
