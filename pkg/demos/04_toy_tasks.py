# Procedural toy data for both tasks: box-masked faces for inpainting and
# Beer-Lambert haze over synthetic room scenes for dehazing.
from pathlib import Path

import numpy as np
from PIL import Image

from sud2.tasks import HazeParams, apply_haze, make_toy_dataset, psnr, ssim, to_uint8

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
for task in ("inpaint", "dehaze"):
    b = make_toy_dataset(task, counts=(5, 20, 20), seed=0, size=64, n_heldout=8)
    rows = [np.concatenate(list(b.heldout_x[:6]), 1), np.concatenate(list(b.heldout_y[:6]), 1)]
    Image.fromarray(to_uint8(np.concatenate(rows, 0))).save(out / f"{task}_pairs.png")
    p = np.mean([psnr(y, x) for y, x in zip(b.heldout_y, b.heldout_x)])
    s = np.mean([ssim(y, x) for y, x in zip(b.heldout_y, b.heldout_x)])
    print(f"{task}: measurement vs reference PSNR {p:.2f} dB, SSIM {s:.3f}")

# Thicker haze pulls every pixel further toward the atmospheric light.
J = make_toy_dataset("dehaze", counts=(1, 0, 0), seed=1, size=64, n_heldout=0).paired_x[0]
depth = np.linspace(0.2, 2.0, 64)[None, :].repeat(64, 0)
for beta in (0.0, 0.5, 1.0, 2.0, 8.0):
    hazy = apply_haze(J, HazeParams(beta, 0.8, depth))
    print(f"beta={beta}: mean |I - A| = {np.abs(hazy - 0.8).mean():.4f}")
