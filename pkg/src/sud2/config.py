"""Experiment configuration files.

A config is an INI-style file of ``key = value`` lines grouped under
``[section]`` headers. Unknown sections or keys, unparsable values and
missing required entries raise :class:`~sud2.errors.ConfigError` with a
``path:line:`` prefix. See ``docs/formats.md`` for the full key list.
"""

from __future__ import annotations

import configparser
import hashlib
import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .models import UNetConfig
from .trainer import TrainConfig

__all__ = [
    "ExperimentSection",
    "DataSection",
    "ModelSection",
    "SupervisorSection",
    "PretrainSection",
    "TrainSection",
    "AblationSection",
    "ExperimentConfig",
    "load_config",
    "OUTPUT_ROOT_ENV",
    "THREADS_ENV",
]

OUTPUT_ROOT_ENV = "SUD2_OUTPUT_ROOT"
THREADS_ENV = "SUD2_THREADS"


@dataclass
class ExperimentSection:
    name: str = "run"
    task: str = "inpaint"
    seed: int = 0
    output_dir: str = ""
    grid_every: int = 10


@dataclass
class DataSection:
    source: str = "generator"
    family: str = ""
    path: str = ""
    size: int = 64
    n_paired: int = 5
    n_unpaired_clean: int = 1000
    n_unpaired: int = 200
    n_heldout: int = 0
    seed: int = 0


@dataclass
class ModelSection:
    depth: int = 4
    base_width: int = 16
    residual: bool = True
    attention: bool = False


@dataclass
class SupervisorSection:
    kind: str = "ddpm"
    checkpoint: str = ""
    roundtrip_steps: int = 20
    sigma: float = 0.5
    kernel_variance: float = 0.01


@dataclass
class PretrainSection:
    kind: str = "ddpm"
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    sigma_min: float = 0.05
    sigma_max: float = 0.4
    schedule_length: int = 100
    depth: int = 3
    base_width: int = 8
    attention: bool = True
    checkpoint: str = "supervisor.pt"


@dataclass
class TrainSection:
    lambda1: float = 0.01
    lambda2: float = 10.0
    sigma2: float = 0.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    paired_fraction: float = 0.25
    perceptual_weight: float = 0.0
    collapse_warning: float = 0.05


@dataclass
class AblationSection:
    noise_injection: bool = True
    correlation_loss: bool = True
    supervisor_kind: str = ""


_SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "model": ModelSection,
    "supervisor": SupervisorSection,
    "pretrain": PretrainSection,
    "train": TrainSection,
    "ablation": AblationSection,
}

_CHOICES = {
    ("experiment", "task"): ("inpaint", "dehaze"),
    ("data", "source"): ("generator", "bundle"),
    ("supervisor", "kind"): ("analytic", "autoencoder", "ddpm", "identity"),
    ("pretrain", "kind"): ("autoencoder", "ddpm"),
    ("ablation", "supervisor_kind"): ("", "analytic", "autoencoder", "ddpm", "identity"),
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    supervisor: SupervisorSection = field(default_factory=SupervisorSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    source_path: Path | None = None
    text: str = ""

    @property
    def supervisor_kind(self) -> str:
        return self.ablation.supervisor_kind or self.supervisor.kind

    @property
    def family(self) -> str:
        return self.data.family or {"inpaint": "faces", "dehaze": "rooms"}[self.experiment.task]

    def output_dir(self) -> Path:
        """Run directory; relative paths resolve against ``$SUD2_OUTPUT_ROOT`` if set."""
        out = Path(self.experiment.output_dir or Path("runs") / self.experiment.name)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if not out.is_absolute():
            out = Path(root) / out if root else (self.base_dir() / out)
        return out

    def base_dir(self) -> Path:
        return self.source_path.parent if self.source_path else Path.cwd()

    def resolve(self, p: str) -> Path:
        """A path from the config, relative to the config file's directory."""
        q = Path(p)
        return q if q.is_absolute() else self.base_dir() / q

    def loss_weights(self) -> LossWeights:
        t = self.train
        return LossWeights(
            lambda1=t.lambda1,
            lambda2=t.lambda2 if self.ablation.correlation_loss else 0.0,
            sigma2=t.sigma2 if self.ablation.noise_injection else 0.0,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            weights=self.loss_weights(), diffusion_steps=self.supervisor.roundtrip_steps,
            learning_rate=t.learning_rate, weight_decay=t.weight_decay, batch_size=t.batch_size,
            epochs=t.epochs, seed=self.experiment.seed, paired_fraction=t.paired_fraction,
            perceptual_weight=t.perceptual_weight, collapse_warning=t.collapse_warning,
        )

    def recon_config(self, channels: int = 3) -> UNetConfig:
        m = self.model
        return UNetConfig(channels, channels, m.depth, m.base_width, m.attention)

    def pretrain_net_config(self, channels: int = 3) -> UNetConfig:
        p = self.pretrain
        return UNetConfig(channels, channels, p.depth, p.base_width, p.attention)

    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]


_KEY_RE = re.compile(r"^\s*([^=:\s][^=:]*?)\s*[=:]")
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    idx = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip().lower()
            idx.setdefault((section, None), n)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            idx.setdefault((section, m.group(1).strip().lower()), n)
    return idx


def _convert(raw: str, typ, where: str):
    try:
        if typ is bool or typ == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        lineno = getattr(e, "lineno", None)
        prefix = f"{path}:{lineno}" if lineno else str(path)
        raise ConfigError(f"{prefix}: {e.message.splitlines()[0] if hasattr(e, 'message') else e}") from None
    lines = _line_index(text)
    cfg = ExperimentConfig(source_path=path, text=text)
    for section in parser.sections():
        where = f"{path}:{lines.get((section.lower(), None), '?')}"
        cls = _SECTIONS.get(section.lower())
        if cls is None:
            raise ConfigError(f"{where}: unknown section [{section}]")
        obj = getattr(cfg, section.lower())
        known = {f.name: f.type for f in fields(cls)}
        for key, raw in parser.items(section):
            kwhere = f"{path}:{lines.get((section.lower(), key), '?')}"
            if key not in known:
                raise ConfigError(f"{kwhere}: unknown key {key!r} in [{section}]")
            value = _convert(raw, known[key], kwhere)
            choices = _CHOICES.get((section.lower(), key))
            if choices is not None and value not in choices:
                raise ConfigError(f"{kwhere}: {key} must be one of {', '.join(c for c in choices if c)}; got {value!r}")
            setattr(obj, key, value)
    _validate(cfg, lines, path)
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict, path: Path) -> None:
    def fail(section, key, msg, alt=None):
        line = lines.get((section, key)) or (alt and lines.get(alt)) or lines.get((section, None), "?")
        raise ConfigError(f"{path}:{line}: {msg}")

    if cfg.data.source == "bundle":
        if not cfg.data.path:
            fail("data", "source", "data source 'bundle' needs a path")
        if not cfg.resolve(cfg.data.path).is_dir():
            fail("data", "path", f"dataset path {cfg.data.path!r} does not exist")
    if cfg.data.size < 8:
        fail("data", "size", "image size must be at least 8")
    if cfg.data.n_paired < 1 or cfg.data.n_unpaired < 2:
        fail("data", "n_paired", "need at least one paired and two unpaired samples")
    if cfg.data.size % (2 ** cfg.model.depth):
        fail("model", "depth", f"image size {cfg.data.size} not divisible by 2**{cfg.model.depth}", alt=("data", "size"))
    for key in ("lambda1", "lambda2", "sigma2", "learning_rate", "weight_decay"):
        if getattr(cfg.train, key) < 0:
            fail("train", key, f"{key} must be nonnegative")
    if cfg.train.batch_size < 2:
        fail("train", "batch_size", "batch_size must be at least 2")
    if not 0 < cfg.train.paired_fraction < 1:
        fail("train", "paired_fraction", "paired_fraction must lie in (0, 1)")
    if cfg.supervisor.kernel_variance <= 0:
        fail("supervisor", "kernel_variance", "kernel_variance must be positive")
    if cfg.supervisor.sigma <= 0:
        fail("supervisor", "sigma", "sigma must be positive")
    if cfg.supervisor.roundtrip_steps < 1:
        fail("supervisor", "roundtrip_steps", "roundtrip_steps must be at least 1")
    if cfg.pretrain.sigma_min <= 0 or cfg.pretrain.sigma_max < cfg.pretrain.sigma_min:
        fail("pretrain", "sigma_min", "need 0 < sigma_min <= sigma_max")
