# Semi-supervised inpainting: five paired examples plus unpaired measurements,
# with a frozen kernel MMSE denoiser over clean images as supervisor. Compares
# supervised-only training, the denoiser term alone, and the denoiser term
# with the latent decorrelation term.
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from sud2 import distributions as dist
from sud2.denoisers import AnalyticDenoiser
from sud2.losses import LossWeights
from sud2.models import UNetConfig, build_unet
from sud2.tasks import make_toy_dataset
from sud2.trainer import TrainConfig, fit_sud2, fit_supervised

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
b = make_toy_dataset("inpaint", counts=(5, 500, 200), seed=0, size=32)
sup = AnalyticDenoiser(dist.GaussianMixture.from_samples(b.unpaired_clean.transpose(0, 3, 1, 2), 1e-3), 0.5)
runs = {
    "supervised": LossWeights(0.0, 0.0),
    "denoiser only": LossWeights(0.01, 0.0),
    "denoiser + decorrelation": LossWeights(0.01, 10.0),
}
fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
for name, w in runs.items():
    net = build_unet(UNetConfig(base_width=8, depth=3), seed=0)
    cfg = TrainConfig(w, epochs=10)
    res = fit_supervised(b, net, cfg) if name == "supervised" else fit_sud2(b, net, sup, cfg)
    ep = [r["epoch"] for r in res.epochs]
    axes[0].plot(ep, [r["eval_psnr"] for r in res.epochs], label=name)
    axes[1].plot(ep, [r["collapse_metric"] for r in res.epochs], label=name)
    print(f"{name:26s} PSNR {res.final['eval_psnr']:.2f} dB, diversity {res.final['collapse_metric']:.3f} "
          f"(start {res.initial_collapse:.3f})")
axes[0].set_ylabel("held-out PSNR (dB)")
axes[1].set_ylabel("collapse metric")
for ax in axes:
    ax.set_xlabel("epoch")
axes[1].legend()
fig.tight_layout()
fig.savefig(out / "sud2_training.png", dpi=120)
