"""Reconstruction U-net, skip-free denoising autoencoder, and noise-prediction net.

Down blocks are a stride-2 conv followed by a second conv, each with
normalization and a leaky ReLU. Block ``i`` (1-based) has
``base_width * 2**(i-1)`` channels, so the deepest encoder activation of a
``depth``-block net on an ``H x W`` input has shape
``(base_width * 2**(depth-1), H / 2**depth, W / 2**depth)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigError

__all__ = [
    "UNetConfig",
    "UNet",
    "DiffusionUNet",
    "MLPDenoiser",
    "build_unet",
    "build_autoencoder",
    "build_diffusion_net",
    "build_mlp_denoiser",
    "forward_with_latent",
    "count_parameters",
    "parameter_hash",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    depth: int = 4
    base_width: int = 32
    use_attention: bool = False
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth)]


def _check_spatial(x: torch.Tensor, depth: int) -> None:
    h, w = x.shape[-2:]
    f = 2**depth
    if h % f or w % f:
        raise ConfigError(f"input {h}x{w} not divisible by 2**depth = {f}")


def _conv_bn(cin, cout, slope, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(slope),
    )


class _Down(nn.Sequential):
    def __init__(self, cin, cout, slope):
        super().__init__(_conv_bn(cin, cout, slope, stride=2), _conv_bn(cout, cout, slope))


class _Up(nn.Module):
    def __init__(self, cin, cout, skip, slope):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(slope),
        )
        self.merge = _conv_bn(cout + skip, cout, slope)

    def forward(self, x, skip=None):
        x = self.up(x)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.merge(x)


class UNet(nn.Module):
    """Encoder/decoder with optional skip connections.

    ``skips=False`` gives the denoising autoencoder; with ``residual=True`` the
    head predicts a correction added to the input and is initialized near
    zero, so an untrained net is the identity up to initialization noise.
    """

    def __init__(self, cfg: UNetConfig, skips: bool = True, out_activation: str = "tanh",
                 residual: bool = False):
        super().__init__()
        self.cfg = cfg
        self.skips = skips
        self.residual = residual
        if residual and cfg.in_channels != cfg.out_channels:
            raise ConfigError("residual net needs in_channels == out_channels")
        widths = cfg.widths()
        s = cfg.negative_slope
        self.stem = _conv_bn(cfg.in_channels, cfg.base_width, s)
        chans = [cfg.base_width] + widths
        self.downs = nn.ModuleList(_Down(chans[i], chans[i + 1], s) for i in range(cfg.depth))
        self.ups = nn.ModuleList(
            _Up(chans[i + 1], chans[i], chans[i] if skips else 0, s) for i in reversed(range(cfg.depth))
        )
        self.head = nn.Conv2d(cfg.base_width, cfg.out_channels, 1)
        self.out_activation = out_activation
        if residual:
            nn.init.normal_(self.head.weight, std=1e-4)
            nn.init.zeros_(self.head.bias)

    def encode(self, x):
        _check_spatial(x, self.cfg.depth)
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats

    def decode(self, feats):
        h = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            h = up(h, skip if self.skips else None)
        return self.head(h)

    def forward_with_latent(self, x):
        feats = self.encode(x)
        out = self.decode(feats)
        if self.residual:
            out = x + out
        if self.out_activation == "tanh":
            out = torch.tanh(out)
        elif self.out_activation == "clamp":
            out = torch.clamp(out, -1.0, 1.0)
        return out, feats[-1].flatten(1)

    def forward(self, x):
        return self.forward_with_latent(x)[0]


def _group_norm(ch):
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class _TimeBlock(nn.Module):
    def __init__(self, cin, cout, temb, slope, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _group_norm(cout)
        self.temb = nn.Linear(temb, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _group_norm(cout)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x, t):
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.temb(t)[:, :, None, None]
        return self.act(self.norm2(self.conv2(h)))


class _SelfAttention(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = _group_norm(ch)
        heads = 4 if ch % 4 == 0 else 1
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class DiffusionUNet(nn.Module):
    """Noise predictor ``eps(x, t)``; step index enters through a sinusoidal
    embedding added to every block. Linear (unbounded) output."""

    def __init__(self, cfg: UNetConfig, schedule_len: int):
        super().__init__()
        self.cfg = cfg
        self.schedule_len = schedule_len
        s = cfg.negative_slope
        temb = cfg.base_width * 4
        self.temb_dim = temb
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        widths = cfg.widths()
        chans = [cfg.base_width] + widths
        self.stem = nn.Conv2d(cfg.in_channels, cfg.base_width, 3, padding=1)
        self.downs = nn.ModuleList(_TimeBlock(chans[i], chans[i + 1], temb, s, stride=2) for i in range(cfg.depth))
        attn_levels = {cfg.depth, cfg.depth - 1} if cfg.use_attention else set()
        self.down_attn = nn.ModuleList(
            _SelfAttention(chans[i + 1]) if (i + 1) in attn_levels else nn.Identity() for i in range(cfg.depth)
        )
        self.ups = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.ups.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 4, stride=2, padding=1))
            self.up_convs.append(_TimeBlock(2 * chans[i], chans[i], temb, s))
        self.head = nn.Conv2d(cfg.base_width, cfg.out_channels, 3, padding=1)

    def forward(self, x, t):
        _check_spatial(x, self.cfg.depth)
        t = torch.as_tensor(t, device=x.device).reshape(-1)
        if t.numel() == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        if torch.any(t < 0) or torch.any(t >= self.schedule_len):
            raise ValueError(f"step index outside [0, {self.schedule_len})")
        te = self.time_mlp(timestep_embedding(t, self.temb_dim))
        h = self.stem(x)
        feats = [h]
        for down, attn in zip(self.downs, self.down_attn):
            h = attn(down(h, te))
            feats.append(h)
        for up, conv, skip in zip(self.ups, self.up_convs, reversed(feats[:-1])):
            h = conv(torch.cat([up(h), skip], dim=1), te)
        return self.head(h)


class MLPDenoiser(nn.Module):
    """Residual MLP denoiser for low-dimensional vector data."""

    def __init__(self, dim: int, hidden: int = 128, layers: int = 3):
        super().__init__()
        mods, w = [], dim
        for _ in range(layers):
            mods += [nn.Linear(w, hidden), nn.SiLU()]
            w = hidden
        self.body = nn.Sequential(*mods)
        self.head = nn.Linear(hidden, dim)
        nn.init.normal_(self.head.weight, std=1e-4)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return x + self.head(self.body(x))


def _seeded(seed, fn):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


def build_unet(cfg: UNetConfig, seed: int = 0, residual: bool = True) -> UNet:
    """Reconstruction U-net with outputs in ``[-1, 1]``.

    ``residual=True`` adds the input to the head and clamps, so a fresh net
    starts near the identity map; ``residual=False`` ends in ``tanh``.
    """
    act = "clamp" if residual else "tanh"
    return _seeded(seed, lambda: UNet(cfg, skips=True, out_activation=act, residual=residual))


def build_autoencoder(cfg: UNetConfig, seed: int = 0, residual: bool = True) -> UNet:
    return _seeded(seed, lambda: UNet(cfg, skips=False, out_activation="none", residual=residual))


def build_diffusion_net(cfg: UNetConfig, schedule_len: int, seed: int = 0) -> DiffusionUNet:
    return _seeded(seed, lambda: DiffusionUNet(cfg, schedule_len))


def build_mlp_denoiser(dim: int, hidden: int = 128, layers: int = 3, seed: int = 0) -> MLPDenoiser:
    return _seeded(seed, lambda: MLPDenoiser(dim, hidden, layers))


def forward_with_latent(net: UNet, y: torch.Tensor):
    """Reconstruction plus the flattened deepest encoder activation per sample."""
    return net.forward_with_latent(y)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_hash(net) -> str:
    """SHA-256 over parameter and buffer bytes in name order."""
    h = hashlib.sha256()
    state = net.state_dict() if isinstance(net, nn.Module) else {}
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, net: nn.Module, kind: str, cfg: UNetConfig | None = None,
                    schedule=None, step: int = 0, extra: dict | None = None) -> None:
    """Archive with keys ``kind, config, state_dict, schedule, step, extra``.

    ``state_dict`` holds parameters and normalization running statistics under
    their module names.
    """
    torch.save(
        {
            "format": "sud2-checkpoint-v1",
            "kind": kind,
            "config": asdict(cfg) if cfg is not None else None,
            "state_dict": net.state_dict(),
            "schedule": schedule.to_record() if schedule is not None else None,
            "step": int(step),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path):
    """Rebuild the network stored by :func:`save_checkpoint`.

    Returns ``(net, record)``; ``record["schedule"]`` is a
    :class:`~sud2.denoisers.NoiseSchedule` or ``None``.
    """
    from .denoisers import NoiseSchedule

    rec = torch.load(path, map_location="cpu", weights_only=False)
    if rec.get("format") != "sud2-checkpoint-v1":
        raise ConfigError(f"{path}: not a sud2 checkpoint")
    kind = rec["kind"]
    extra = rec.get("extra") or {}
    cfg = UNetConfig(**rec["config"]) if rec["config"] else None
    schedule = NoiseSchedule.from_record(rec["schedule"]) if rec["schedule"] else None
    if kind == "unet":
        residual = extra.get("residual", True)
        net = UNet(cfg, skips=True, out_activation="clamp" if residual else "tanh", residual=residual)
    elif kind == "autoencoder":
        net = UNet(cfg, skips=False, out_activation="none", residual=extra.get("residual", True))
    elif kind == "diffusion":
        net = DiffusionUNet(cfg, len(schedule))
    elif kind == "mlp_denoiser":
        net = MLPDenoiser(extra["dim"], extra["hidden"], extra["layers"])
    else:
        raise ConfigError(f"{path}: unknown network kind {kind!r}")
    net.load_state_dict(rec["state_dict"])
    net.eval()
    rec["schedule"] = schedule
    rec["config"] = cfg
    return net, rec
