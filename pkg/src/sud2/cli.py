"""Command-line experiment runner.

Subcommands: ``pretrain``, ``train``, ``verify``, ``eval``, ``plot`` and
``make-data``. Exit status is 0 on success, 1 when a verification check
fails, 2 on a configuration error and 3 on a numerical failure.

Environment: ``SUD2_OUTPUT_ROOT`` prefixes relative output directories and
``SUD2_THREADS`` sets the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import platform
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from . import verify as V
from .config import OUTPUT_ROOT_ENV, THREADS_ENV, ExperimentConfig, load_config
from .denoisers import AnalyticDenoiser, AutoencoderDenoiser, DiffusionDenoiser, IdentityDenoiser, linear_schedule
from .distributions import GaussianMixture
from .errors import ConfigError, NumericalError
from .models import build_autoencoder, build_diffusion_net, build_unet, load_checkpoint, save_checkpoint
from .tasks import DatasetBundle, load_bundle, make_toy_dataset, save_bundle, to_uint8
from .trainer import (ddpm_eps_mse, evaluate, fit_sud2, pretrain_ddpm, pretrain_denoiser, reconstruct,
                      to_images)

log = logging.getLogger("sud2")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


# helpers --------------------------------------------------------------------

def code_version() -> str:
    """Package version plus the git revision of the source tree when available."""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def write_manifest(out: Path, command: str, cfg: ExperimentConfig | None = None, **extra) -> Path:
    rec = {
        "command": command,
        "code_version": code_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "argv": sys.argv,
    }
    if cfg is not None:
        rec.update(config_path=str(cfg.source_path), config_hash=cfg.config_hash(),
                   seed=cfg.experiment.seed, data_seed=cfg.data.seed, config_text=cfg.text)
    rec.update(extra)
    path = out / ("manifest.json" if command == "train" else f"{command}_manifest.json")
    path.write_text(json.dumps(rec, indent=2, sort_keys=True, default=str))
    return path


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return v


def build_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    d = cfg.data
    if d.source == "bundle":
        return load_bundle(cfg.resolve(d.path))
    return make_toy_dataset(
        cfg.experiment.task, cfg.family, counts=(d.n_paired, d.n_unpaired_clean, d.n_unpaired),
        seed=d.seed, size=d.size, n_heldout=d.n_heldout or None,
    )


def supervisor_checkpoint(cfg: ExperimentConfig) -> Path:
    if cfg.supervisor.checkpoint:
        return cfg.resolve(cfg.supervisor.checkpoint)
    return cfg.output_dir() / cfg.pretrain.checkpoint


def build_supervisor(cfg: ExperimentConfig, bundle: DatasetBundle):
    kind = cfg.supervisor_kind
    if kind == "identity":
        return IdentityDenoiser()
    if kind == "analytic":
        clean = bundle.unpaired_clean
        if clean is None or len(clean) == 0:
            raise ConfigError("analytic supervisor needs clean unpaired images")
        gmm = GaussianMixture.from_samples(clean.transpose(0, 3, 1, 2), cfg.supervisor.kernel_variance)
        return AnalyticDenoiser(gmm, cfg.supervisor.sigma)
    path = supervisor_checkpoint(cfg)
    if not path.is_file():
        raise ConfigError(f"supervisor checkpoint {path} does not exist (run pretrain first)")
    net, rec = load_checkpoint(path)
    if kind == "autoencoder":
        if rec["kind"] != "autoencoder":
            raise ConfigError(f"{path} holds a {rec['kind']!r} network, expected an autoencoder")
        return AutoencoderDenoiser(net)
    if rec["kind"] != "diffusion":
        raise ConfigError(f"{path} holds a {rec['kind']!r} network, expected a diffusion net")
    steps = cfg.supervisor.roundtrip_steps
    if steps > len(rec["schedule"]):
        raise ConfigError(f"roundtrip_steps {steps} exceeds schedule length {len(rec['schedule'])}")
    return DiffusionDenoiser(net, rec["schedule"], steps)


def sample_grid(inputs, outputs, refs, n: int = 4) -> np.ndarray:
    """Rows of (input | reconstruction | reference) as one uint8 image."""
    n = min(n, len(inputs))
    rows = [np.concatenate([to_uint8(inputs[i]), to_uint8(outputs[i]), to_uint8(refs[i])], axis=1)
            for i in range(n)]
    return np.concatenate(rows, axis=0)


def _grid_split(bundle: DatasetBundle):
    if bundle.heldout_y is not None and len(bundle.heldout_y):
        return bundle.heldout_y, bundle.heldout_x
    return bundle.unpaired_measure, bundle.unpaired_truth


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    out = cfg.output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from None
    return cfg, out


# subcommands ------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg, out = _prepare(args)
    p = cfg.pretrain
    bundle = build_bundle(cfg)
    clean = bundle.unpaired_clean
    if clean is None or len(clean) == 0:
        raise ConfigError("pre-training needs clean unpaired images (data n_unpaired_clean)")
    seed = cfg.experiment.seed
    net_cfg = cfg.pretrain_net_config(clean.shape[-1])
    n_val = max(1, len(clean) // 10)
    train_x, val_x = clean[n_val:], clean[:n_val]
    schedule = None
    if p.kind == "ddpm":
        schedule = linear_schedule(p.schedule_length)
        net = build_diffusion_net(net_cfg, len(schedule), seed)
        net, report = pretrain_ddpm(train_x, net, schedule, p.epochs, seed, p.batch_size, p.learning_rate,
                                    p.weight_decay)
        report["heldout_eps_mse"] = ddpm_eps_mse(net, val_x, schedule, seed)
        kind = "diffusion"
    else:
        net = build_autoencoder(net_cfg, seed)
        net, report = pretrain_denoiser(train_x, net, (p.sigma_min, p.sigma_max), p.epochs, seed,
                                        p.batch_size, p.learning_rate, p.weight_decay)
        kind = "autoencoder"
    ckpt = out / p.checkpoint
    save_checkpoint(ckpt, net, kind, net_cfg, schedule, step=len(report["step_loss"]),
                    extra={"residual": True, "pretrain": p.kind})
    write_csv(out / "pretrain_loss.csv", [{"epoch": i + 1, "loss": v} for i, v in enumerate(report["loss"])])
    summary = {k: v for k, v in report.items() if k != "step_loss"}
    summary["final_loss"] = report["loss"][-1] if report["loss"] else float("nan")
    summary["checkpoint"] = str(ckpt)
    (out / "pretrain_report.json").write_text(json.dumps(summary, indent=2, default=str))
    write_manifest(out, "pretrain", cfg, bundle_hash=bundle.content_hash(), checkpoint=str(ckpt),
                   network=net_cfg.__dict__, kind=kind)
    print(f"pretrained {kind}: final loss {summary['final_loss']:.6g} -> {ckpt}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    bundle = build_bundle(cfg)
    tcfg = cfg.train_config()
    supervisor = None if tcfg.supervised_only else build_supervisor(cfg, bundle)
    channels = bundle.paired_y.shape[-1]
    net = build_unet(cfg.recon_config(channels), cfg.experiment.seed, residual=cfg.model.residual)
    grids = out / "grids"
    ckdir = out / "checkpoints"
    grids.mkdir(exist_ok=True)
    ckdir.mkdir(exist_ok=True)
    gy, gx = _grid_split(bundle)
    every = max(1, cfg.experiment.grid_every)

    def emit(epoch, model):
        if gy is None:
            return
        recon = to_images(reconstruct(model, gy[:4]))
        Image.fromarray(sample_grid(gy, recon, gx)).save(grids / f"epoch_{epoch:04d}.png")

    def on_epoch(epoch, model, row):
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        if epoch % every == 0 or epoch == tcfg.epochs:
            emit(epoch, model)
            save_checkpoint(ckdir / f"epoch_{epoch:04d}.pt", model, "unet", cfg.recon_config(channels),
                            step=row["step"], extra={"residual": cfg.model.residual})

    emit(0, net)
    result = fit_sud2(bundle, net, supervisor, tcfg, on_epoch=on_epoch)
    save_checkpoint(out / "final.pt", net, "unet", cfg.recon_config(channels),
                    step=len(result.steps), extra={"residual": cfg.model.residual})
    write_csv(out / "metrics.csv", result.epochs)
    write_csv(out / "steps.csv", result.steps)
    (out / "warnings.txt").write_text("\n".join(result.warnings) + ("\n" if result.warnings else ""))
    for w in result.warnings:
        if w.startswith("collapse"):
            print(f"warning: {w}", file=sys.stderr)
            break
    write_manifest(
        out, "train", cfg, bundle_hash=bundle.content_hash(), supervisor=cfg.supervisor_kind,
        supervisor_checkpoint=str(supervisor_checkpoint(cfg)) if cfg.supervisor_kind in ("ddpm", "autoencoder") else None,
        supervisor_hash=result.supervisor_hash_before, weights=tcfg.weights.__dict__,
        final=result.final, initial_collapse=result.initial_collapse, n_warnings=len(result.warnings),
    )
    f = result.final
    print(f"trained {tcfg.epochs} epochs: held-out PSNR {f.get('eval_psnr', float('nan')):.3f} dB, "
          f"collapse {f.get('collapse_metric', float('nan')):.4g} (initial {result.initial_collapse:.4g})")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.suite != "theorems" and args.suite not in V.SUITES:
        raise ConfigError(f"unknown suite {args.suite!r}; choose from theorems, {', '.join(V.SUITES)}")
    if not args.sigma > 0:
        raise ConfigError("--sigma must be positive")
    reports = V.run_suite(args.suite, sigma=args.sigma, seed=args.seed)
    out = Path(args.out) if args.out else _default_root() / f"verify_{args.suite}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(r.to_line() + "\n" for r in reports))
    for r in reports:
        print(r)
    failed = [r for r in reports if r.hard and not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; report: {out}")
    return EXIT_FAIL if failed else EXIT_OK


def _default_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def _eval_data(args):
    if args.data:
        bundle = load_bundle(args.data)
    elif args.config:
        bundle = build_bundle(load_config(args.config))
    else:
        raise ConfigError("eval needs --data or --config")
    if args.split == "heldout":
        ys, xs = bundle.heldout_y, bundle.heldout_x
    else:
        ys, xs = bundle.unpaired_measure, bundle.unpaired_truth
    if ys is None or xs is None or len(ys) == 0:
        raise ConfigError(f"dataset has no {args.split} split with references")
    return bundle, ys, xs


def _load_recon(path) -> torch.nn.Module:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint {p} does not exist")
    net, rec = load_checkpoint(p)
    if rec["kind"] not in ("unet", "autoencoder"):
        raise ConfigError(f"{p} holds a {rec['kind']!r} network, not a reconstruction net")
    return net


def _summary(ev: dict) -> dict:
    return {"n": len(ev["psnr"]), "psnr_mean": ev["psnr_mean"], "psnr_median": ev["psnr_median"],
            "ssim_mean": ev["ssim_mean"], "ssim_median": ev["ssim_median"],
            "collapse_metric": ev["collapse_metric"]}


def cmd_eval(args) -> int:
    bundle, ys, xs = _eval_data(args)
    out = Path(args.out) if args.out else _default_root() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    ev = evaluate(_load_recon(args.checkpoint), ys, xs)
    rows = [{"index": i, "psnr": float(p), "ssim": float(s)} for i, (p, s) in enumerate(zip(ev["psnr"], ev["ssim"]))]
    summary = {"checkpoint": str(args.checkpoint), "split": args.split, **_summary(ev)}
    if args.compare:
        ev_b = evaluate(_load_recon(args.compare), ys, xs)
        for r, p, s in zip(rows, ev_b["psnr"], ev_b["ssim"]):
            r.update(psnr_b=float(p), ssim_b=float(s), psnr_delta=float(p) - r["psnr"], ssim_delta=float(s) - r["ssim"])
        sb = _summary(ev_b)
        delta = [
            {"metric": m, "a": summary[m], "b": sb[m], "delta": sb[m] - summary[m]}
            for m in ("psnr_mean", "psnr_median", "ssim_mean", "ssim_median")
        ]
        write_csv(out / "delta.csv", delta)
        summary["compare"] = {"checkpoint": str(args.compare), **sb}
        print(f"{'metric':<12} {'a':>10} {'b':>10} {'b - a':>10}")
        for d in delta:
            print(f"{d['metric']:<12} {d['a']:>10.4f} {d['b']:>10.4f} {d['delta']:>+10.4f}")
    write_csv(out / "per_image.csv", rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "eval", None, bundle_hash=bundle.content_hash(), checkpoint=str(args.checkpoint),
                   compare=str(args.compare) if args.compare else None)
    print(f"PSNR mean {summary['psnr_mean']:.4f} median {summary['psnr_median']:.4f} | "
          f"SSIM mean {summary['ssim_mean']:.4f} median {summary['ssim_median']:.4f} (n={summary['n']})")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [Path(r) for r in args.run]
    for r in runs:
        if not (r / "metrics.csv").is_file():
            raise ConfigError(f"{r} has no metrics.csv")
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for r in runs:
        ep = read_csv(r / "metrics.csv")
        label = r.name
        x = [e["epoch"] for e in ep]
        axes[0].plot(x, [e.get("eval_psnr", np.nan) for e in ep], label=label)
        axes[1].plot(x, [e.get("collapse_metric", np.nan) for e in ep], label=label)
        steps_path = r / "steps.csv"
        if steps_path.is_file():
            st = read_csv(steps_path)
            if st:
                axes[2].plot([s["step"] for s in st], [s["loss_total"] for s in st], label=label, lw=0.8)
    axes[0].set(xlabel="epoch", ylabel="held-out PSNR (dB)")
    axes[1].set(xlabel="epoch", ylabel="collapse metric")
    axes[2].set(xlabel="step", ylabel="total loss", yscale="log")
    for ax in axes:
        ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(args.out) if args.out else runs[0] / "curves.png"
    fig.savefig(out, dpi=110)
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    cfg = load_config(args.config)
    bundle = build_bundle(cfg)
    root = save_bundle(bundle, args.out)
    print(f"wrote bundle {bundle.content_hash()[:12]} to {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sud2", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pre-train the denoising autoencoder or diffusion model")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the reconstruction network")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify", help="run analytic verification checks")
    p.add_argument("--suite", default="theorems", help="theorems, tweedie, theorem1, mode_shift or kl")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report file (one JSON record per line)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="per-image PSNR/SSIM of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare", help="second checkpoint; emits a delta table")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", help="dataset bundle directory")
    g.add_argument("--config", help="experiment config whose data section defines the dataset")
    p.add_argument("--split", choices=("heldout", "unpaired"), default="heldout")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="training curves of one or more runs")
    p.add_argument("--run", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("make-data", help="render a toy dataset bundle to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"error: {THREADS_ENV}={threads!r} is not an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
