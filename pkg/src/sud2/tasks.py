"""Forward models, procedural toy datasets, image I/O, and PSNR/SSIM.

Images are float32 arrays of shape ``(H, W, C)`` with values in ``[-1, 1]``;
stacks of images are ``(N, H, W, C)``.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity

from .errors import ConfigError

__all__ = [
    "HazeParams",
    "DatasetBundle",
    "apply_mask",
    "apply_haze",
    "transmission",
    "render_faces",
    "render_rooms",
    "rect_mask",
    "make_toy_dataset",
    "load_image_folder",
    "save_bundle",
    "load_bundle",
    "to_uint8",
    "psnr",
    "ssim",
    "PSNR_CAP",
    "FAMILIES",
]

PSNR_CAP = 99.0


@dataclass
class HazeParams:
    """Attenuation ``beta``, atmospheric light ``A`` (scalar or per channel, in
    ``[-1, 1]``) and an ``(H, W)`` depth map."""

    beta: float
    A: np.ndarray | float
    depth: np.ndarray

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite")
        a = np.asarray(self.A, dtype=np.float64)
        if np.any(np.abs(a) > 1):
            raise ValueError("atmospheric light must lie in [-1, 1]")


@dataclass
class DatasetBundle:
    """Paired set ``P``, clean unpaired ``U_x``, measurement unpaired ``U_y``.

    ``unpaired_truth`` holds the clean scene behind each ``U_y`` measurement and
    ``heldout_x``/``heldout_y`` a disjoint evaluation split. Neither is used for
    training.
    """

    paired_x: np.ndarray
    paired_y: np.ndarray
    unpaired_clean: np.ndarray
    unpaired_measure: np.ndarray
    unpaired_truth: np.ndarray | None = None
    heldout_x: np.ndarray | None = None
    heldout_y: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {a.shape[1:] for a in self._arrays().values() if len(a)}
        if len(shapes) > 1:
            raise ValueError(f"images in a bundle must share H x W x C, got {shapes}")
        for name, a in self._arrays().items():
            if len(a) and (a.min() < -1 - 1e-6 or a.max() > 1 + 1e-6):
                raise ValueError(f"{name} has values outside [-1, 1]")
        if len(self.paired_x) != len(self.paired_y):
            raise ValueError("paired_x and paired_y differ in length")

    def _arrays(self) -> dict:
        out = {
            "paired_x": self.paired_x,
            "paired_y": self.paired_y,
            "unpaired_clean": self.unpaired_clean,
            "unpaired_measure": self.unpaired_measure,
        }
        for k in ("unpaired_truth", "heldout_x", "heldout_y"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out

    @property
    def image_shape(self) -> tuple[int, int, int]:
        for a in self._arrays().values():
            if len(a):
                return tuple(a.shape[1:])
        raise ValueError("empty bundle")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, a in sorted(self._arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
        return h.hexdigest()


# forward models ------------------------------------------------------------

def apply_mask(x: np.ndarray, mask: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Replace pixels where ``mask == 1`` by ``fill``; others are untouched."""
    x = np.asarray(x)
    mask = np.asarray(mask)
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {x.shape[:2]}")
    out = x.copy()
    out[mask.astype(bool)] = fill
    return out


def transmission(beta: float, depth: np.ndarray) -> np.ndarray:
    """Beer-Lambert transmission ``exp(-beta * depth)``."""
    return np.exp(-beta * np.asarray(depth, dtype=np.float64))


def apply_haze(J: np.ndarray, params: HazeParams, rng: np.random.Generator | None = None,
               noise_std: float = 0.0) -> np.ndarray:
    """Atmospheric scattering ``I = J t + A (1 - t)`` with ``t = exp(-beta d)``.

    ``rng`` and ``noise_std`` optionally add sensor noise before clipping.
    """
    J = np.asarray(J)
    if params.depth.shape != J.shape[:2]:
        raise ValueError(f"depth shape {params.depth.shape} does not match image {J.shape[:2]}")
    t = transmission(params.beta, params.depth)[..., None]
    A = np.asarray(params.A, dtype=np.float64)
    out = J * t + A * (1.0 - t)
    if rng is not None and noise_std > 0:
        out = out + noise_std * rng.standard_normal(out.shape)
    return np.clip(out, -1.0, 1.0).astype(J.dtype, copy=False)


def rect_mask(h: int, w: int, top: int, left: int, height: int, width: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=np.uint8)
    m[max(top, 0):top + height, max(left, 0):left + width] = 1
    return m


# toy families --------------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def render_faces(n: int, size: int, rng: np.random.Generator):
    """Two-tone head-and-shoulders blobs with eyes and a mouth.

    Returns ``(images, params)`` where ``params`` is a list of dicts holding
    the analytic scene parameters of each image.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    s = size / 64.0
    imgs = np.empty((n, size, size, 3), dtype=np.float32)
    params = []
    for i in range(n):
        top = rng.uniform(-0.9, 0.1, 3)
        bottom = rng.uniform(-0.6, 0.6, 3)
        g = (yy / size)[..., None]
        img = (1 - g) * top + g * bottom
        cy = 30 * s + rng.uniform(-3, 3) * s
        cx = 32 * s + rng.uniform(-4, 4) * s
        ry = rng.uniform(15, 19) * s
        rx = rng.uniform(11, 15) * s
        skin = np.array([0.55, 0.15, -0.05]) + rng.uniform(-0.25, 0.25) + rng.uniform(-0.08, 0.08, 3)
        hair = rng.uniform(-0.95, 0.0, 3)
        shirt = rng.uniform(-0.8, 0.8, 3)
        img[_ellipse(yy, xx, size + 6 * s, cx, 18 * s, 26 * s)] = shirt
        img[_ellipse(yy, xx, cy - 3 * s, cx, ry + 1 * s, rx + 2 * s)] = hair
        head = _ellipse(yy, xx, cy + 2 * s, cx, ry - 1 * s, rx)
        img[head] = skin
        eye_dy = rng.uniform(-4, -2) * s
        eye_dx = rng.uniform(4.5, 6.5) * s
        eye_r = rng.uniform(1.6, 2.6) * s
        eye_c = rng.uniform(-1.0, -0.5, 3)
        for sgn in (-1, 1):
            img[_ellipse(yy, xx, cy + eye_dy, cx + sgn * eye_dx, eye_r, eye_r * 1.2)] = eye_c
        mouth_dy = rng.uniform(7, 10) * s
        mouth_w = rng.uniform(3.5, 6.0) * s
        img[_ellipse(yy, xx, cy + mouth_dy, cx, 1.5 * s, mouth_w)] = np.array([0.35, -0.6, -0.5])
        imgs[i] = np.clip(img, -1, 1)
        params.append({"cy": cy, "cx": cx, "ry": ry, "rx": rx})
    return imgs, params


def render_rooms(n: int, size: int, rng: np.random.Generator):
    """Box-room interiors with a per-pixel depth map.

    Returns ``(images, depths, params)``; depths are in arbitrary units,
    roughly ``[0.2, 1.0]``, largest at the back wall.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    imgs = np.empty((n, size, size, 3), dtype=np.float32)
    depths = np.empty((n, size, size), dtype=np.float32)
    params = []
    for i in range(n):
        # back wall rectangle, floor/ceiling/side walls fan out from it
        bx0, bx1 = rng.uniform(0.25, 0.4), rng.uniform(0.6, 0.75)
        by0, by1 = rng.uniform(0.2, 0.35), rng.uniform(0.55, 0.7)
        wall = rng.uniform(-0.3, 0.7, 3)
        floor = rng.uniform(-0.8, 0.3, 3)
        ceil = rng.uniform(0.0, 0.8, 3)
        far = rng.uniform(0.8, 1.0)
        # normalized distance from the back-wall rectangle toward the image border
        dx = np.maximum(np.maximum(bx0 - xx, xx - bx1) / np.maximum(bx0, 1 - bx1), 0)
        dy = np.maximum(np.maximum(by0 - yy, yy - by1) / np.maximum(by0, 1 - by1), 0)
        closeness = np.maximum(dx, dy)
        depth = far - (far - 0.2) * closeness
        img = np.empty((size, size, 3))
        img[:] = wall
        shade = (0.6 + 0.4 * closeness)[..., None]
        is_floor = (yy > by1) & (dy >= dx)
        is_ceil = (yy < by0) & (dy >= dx)
        img[is_floor] = (floor * shade)[is_floor]
        img[is_ceil] = (ceil * shade)[is_ceil]
        side = (dx > dy)
        img[side] = (wall[None, :] * (0.8 + 0.2 * closeness[side])[:, None])
        # a bed-like box near the floor
        fx0 = rng.uniform(0.1, 0.5)
        fw = rng.uniform(0.25, 0.4)
        fy0 = rng.uniform(0.6, 0.75)
        box = (xx >= fx0) & (xx <= fx0 + fw) & (yy >= fy0) & (yy <= min(fy0 + 0.2, 0.98))
        img[box] = rng.uniform(-0.6, 0.9, 3)
        depth[box] = np.minimum(depth[box], rng.uniform(0.3, 0.6))
        imgs[i] = np.clip(img, -1, 1)
        depths[i] = depth
        params.append({"back_wall": [bx0, by0, bx1, by1], "far": far})
    return imgs, depths, params


FAMILIES = {"faces": "inpaint", "rooms": "dehaze"}


def _face_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    s = size / 64.0
    top = int(round((17 + rng.integers(-2, 3)) * s))
    left = int(round((19 + rng.integers(-2, 3)) * s))
    return rect_mask(size, size, top, left, int(round(26 * s)), int(round(26 * s)))


def make_toy_dataset(task: str = "inpaint", family: str | None = None, counts=(5, 1000, 200),
                     seed: int = 0, size: int = 64, n_heldout: int | None = None,
                     beta_range=(0.5, 2.0)) -> DatasetBundle:
    """Render a toy family, apply the task's forward model and split into
    ``P``/``U_x``/``U_y`` plus a held-out split, all from disjoint scenes.

    ``counts`` is ``(|P|, |U_x|, |U_y|)``. The held-out split defaults to 10%
    of the rendered scenes (at least 8).
    """
    family = family or {"inpaint": "faces", "dehaze": "rooms"}.get(task)
    if family not in FAMILIES:
        raise ConfigError(f"unknown toy family {family!r}; choose from {sorted(FAMILIES)}")
    if task not in ("inpaint", "dehaze"):
        raise ConfigError(f"unknown task {task!r}")
    n_p, n_x, n_y = (int(c) for c in counts)
    if n_p < 1 or n_x < 0 or n_y < 0:
        raise ConfigError("counts must satisfy |P| >= 1, |U_x| >= 0, |U_y| >= 0")
    if n_heldout is None:
        n_heldout = max(8, int(round(0.1 * (n_p + n_x + n_y))))
    n = n_p + n_x + n_y + n_heldout
    rng = np.random.default_rng(seed)
    measure_params = []
    if family == "faces":
        clean, _ = render_faces(n, size, rng)
        depths = None
    else:
        clean, depths, _ = render_rooms(n, size, rng)
    measured = np.empty_like(clean)
    for i in range(n):
        if task == "inpaint":
            m = _face_mask(size, rng)
            measured[i] = apply_mask(clean[i], m, 0.0)
            measure_params.append({"mask_bbox": _bbox(m)})
        else:
            d = depths[i] if depths is not None else _default_depth(size)
            beta = float(rng.uniform(*beta_range))
            A = float(rng.uniform(0.5, 0.95))
            measured[i] = apply_haze(clean[i], HazeParams(beta, A, d))
            measure_params.append({"beta": beta, "A": A})
    # disjoint scene partitions: order is P | U_x | U_y | held-out
    idx = np.cumsum([0, n_p, n_x, n_y, n_heldout])
    sl = [slice(idx[k], idx[k + 1]) for k in range(4)]
    prov = {
        "generator": "make_toy_dataset",
        "task": task,
        "family": family,
        "counts": [n_p, n_x, n_y],
        "n_heldout": n_heldout,
        "seed": seed,
        "size": size,
        "beta_range": list(beta_range) if task == "dehaze" else None,
        "measure_params": measure_params,
    }
    return DatasetBundle(
        paired_x=clean[sl[0]], paired_y=measured[sl[0]],
        unpaired_clean=clean[sl[1]],
        unpaired_measure=measured[sl[2]], unpaired_truth=clean[sl[2]],
        heldout_x=clean[sl[3]], heldout_y=measured[sl[3]],
        provenance=prov,
    )


def _bbox(m):
    ys, xs = np.nonzero(m)
    return [int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1]


def _default_depth(size):
    return np.tile(np.linspace(1.0, 0.2, size)[:, None], (1, size))


# image I/O -----------------------------------------------------------------

def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round((np.clip(x, -1, 1) + 1) * 127.5).astype(np.uint8)


def _from_uint8(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".jpg", ".jpeg"}


def load_image_folder(path, size: int | tuple[int, int] | None = 64, normalize: bool = True) -> np.ndarray:
    """Decode every image in ``path`` (lexicographic order), resize to ``size``
    and map 8-bit ``[0, 255]`` to ``[-1, 1]``. Unreadable files are skipped
    with a warning; an empty result raises :class:`ConfigError`."""
    folder = Path(path)
    if not folder.is_dir():
        raise ConfigError(f"image folder {folder} does not exist")
    if isinstance(size, int):
        size = (size, size)
    out = []
    for f in sorted(folder.iterdir(), key=lambda p: p.name):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
                if size is not None and im.size != (size[1], size[0]):
                    im = im.resize((size[1], size[0]), Image.BICUBIC)
                a = np.asarray(im)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {f}: {exc}")
            continue
        out.append(_from_uint8(a) if normalize else a)
    if not out:
        raise ConfigError(f"no readable images in {folder}")
    return np.stack(out)


# bundle field -> (subdirectory, file prefix)
_LAYOUT = {
    "paired_x": ("paired", "x"),
    "paired_y": ("paired", "y"),
    "unpaired_clean": ("unpaired_clean", "x"),
    "unpaired_measure": ("unpaired_measure", "y"),
    "unpaired_truth": ("unpaired_measure", "truth"),
    "heldout_x": ("heldout", "x"),
    "heldout_y": ("heldout", "y"),
}


def save_bundle(bundle: DatasetBundle, root) -> Path:
    """Write ``paired/``, ``unpaired_clean/``, ``unpaired_measure/`` and
    ``heldout/`` directories of 8-bit PNGs plus ``provenance.txt``."""
    root = Path(root)
    for name, (split, prefix) in _LAYOUT.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        arr = getattr(bundle, name)
        if arr is None:
            continue
        for i, img in enumerate(arr):
            Image.fromarray(to_uint8(img)).save(d / f"{prefix}_{i:05d}.png")
    lines = ["# toy dataset provenance"]
    for k, v in bundle.provenance.items():
        lines.append(f"{k} = {json.dumps(v)}")
    (root / "provenance.txt").write_text("\n".join(lines) + "\n")
    return root


def _load_prefixed(d: Path, prefix: str) -> np.ndarray:
    files = sorted(d.glob(f"{prefix}_*.png"))
    if not files:
        return np.empty((0,), dtype=np.float32)
    return np.stack([_from_uint8(np.asarray(Image.open(f).convert("RGB"))) for f in files])


def load_bundle(root) -> DatasetBundle:
    root = Path(root)
    if not (root / "paired").is_dir():
        raise ConfigError(f"{root} is not a dataset bundle directory")
    prov = {}
    pf = root / "provenance.txt"
    if pf.exists():
        for line in pf.read_text().splitlines():
            if line.startswith("#") or "=" not in line:
                continue
            k, v = line.split("=", 1)
            prov[k.strip()] = json.loads(v)
    arrays = {}
    for name, (split, prefix) in _LAYOUT.items():
        a = _load_prefixed(root / split, prefix)
        arrays[name] = a if len(a) else None
    shape = next(a.shape[1:] for a in arrays.values() if a is not None)
    empty = np.empty((0, *shape), dtype=np.float32)
    for k in ("paired_x", "paired_y", "unpaired_clean", "unpaired_measure"):
        if arrays[k] is None:
            arrays[k] = empty
    return DatasetBundle(**arrays, provenance=prov)


# metrics -------------------------------------------------------------------

def _to_unit(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return (x + 1) / 2, (y + 1) / 2


def psnr(x, y) -> float:
    """PSNR in dB after mapping ``[-1, 1]`` to ``[0, 1]``; capped at 99 dB."""
    a, b = _to_unit(x, y)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(-10 * np.log10(mse), PSNR_CAP))


def ssim(x, y) -> float:
    """Mean SSIM with a 7x7 uniform window, K1=0.01, K2=0.03, on ``[0, 1]``."""
    a, b = _to_unit(x, y)
    kw = {"channel_axis": -1} if a.ndim == 3 else {}
    return float(structural_similarity(a, b, win_size=7, data_range=1.0, **kw))
