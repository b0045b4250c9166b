"""Command-line entry point: ``fesr <command> [flags]``.

Exit codes: 0 ok, 2 invalid config (or checkpoint/config mismatch),
3 data error (manifest, fold index, missing files), 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import labelcodes as lc
from . import metrics as M
from .datamodel import ExperimentConfig, validate_config
from .datasets import ImageSet, ManifestError, load_manifest, make_folds
from .networks import format_shape_table, shape_table
from .rdbp import branch_gradient_norms, rdbp_gradients
from .toyfaces import generate_dataset, save_png
from .trainer import CheckpointMismatch, ConfigError, DivergenceError, Trainer, restore, run

log = logging.getLogger("fesr")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
SWEEP_STEPS = 5


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig() if args.config is None else ExperimentConfig.load(args.config)
    except (OSError, ValueError, TypeError) as err:
        raise ConfigError([f"cannot load {args.config}: {err}"]) from err
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _manifest(path):
    if path is None:
        raise DataError("--manifest is required for this command")
    return load_manifest(path)


def _fold_data(cfg, manifest, fold: int, part: str) -> ImageSet:
    split = make_folds(manifest, cfg.fold_count, cfg.seed)
    if not 0 <= fold < cfg.fold_count:
        raise DataError(f"fold index {fold} outside [0, {cfg.fold_count})")
    entries = split.test_entries(fold) if part == "test" else split.train_entries(fold)
    return ImageSet.load(manifest, entries)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_grid(rows: list[list[np.ndarray]], path) -> None:
    """Tile [c, H, W] images row by row into one PNG."""
    grid = np.concatenate([np.concatenate(r, axis=2) for r in rows], axis=1)
    save_png(grid, path)


# ----------------------------------------------------------------- commands

def cmd_toydata(args, cfg, out: Path):
    intensities = [float(v) for v in args.intensities.split(",")]
    m = generate_dataset(args.identities, cfg.num_classes, intensities, cfg.image_size,
                         cfg.seed, out, cfg.channels)
    print(f"wrote {len(m.entries)} images and {out / 'manifest.tsv'}")
    return {"images": len(m.entries)}


def _train(args, cfg, out: Path, stop_at=None):
    manifest = _manifest(args.manifest)
    data = _fold_data(cfg, manifest, args.fold, "train")

    def progress(trainer, report, totals):
        if trainer.t % args.log_every == 0:
            shown = " ".join(f"{k}={v:.4g}" for k, v in totals.items() if v is not None)
            log.info("t=%d %s %s", trainer.t, trainer.stage_label(trainer.t - 1), shown)

    trainer = run(cfg, manifest, args.fold, out, data=data, progress=progress, stop_at=stop_at,
                  save_at_stop=stop_at is not None)
    return trainer, manifest


def cmd_pretrain(args, cfg, out: Path):
    trainer, _ = _train(args, cfg, out, stop_at=cfg.p_pre)
    print(f"stage-1 checkpoint at t={trainer.t} in {out}")
    return {"t": trainer.t}


def cmd_train(args, cfg, out: Path):
    trainer, manifest = _train(args, cfg, out)
    test = _fold_data(cfg, manifest, args.fold, "test")
    report = evaluate_trainer(trainer, test, cfg.seed)
    report.write(out)
    print(f"fold {args.fold}: accuracy {report.accuracy:.4f}")
    return {"t": trainer.t, "accuracy": report.accuracy}


def evaluate_trainer(trainer: Trainer, test: ImageSet, seed: int) -> M.EvalReport:
    cfg, v = trainer.cfg, trainer.variant
    K = cfg.num_classes
    notes = []
    if v.recognizer:
        if trainer.t <= trainer.p_pre:
            notes.append(f"recognizer has not been trained (t={trainer.t}, P_pre={trainer.p_pre})")
            log.warning(notes[-1])
        report = M.recognition_report(trainer.nets["R"], test.images, test.labels, K)
    else:
        notes.append(f"variant {v.name} trains no recognizer; accuracy not measured")
        report = M.EvalReport(float("nan"), np.zeros((K, K), dtype=np.int64), [float("nan")] * K)
    if v.synthesis:
        G = trainer.nets["G"]
        report.psnr_mean, report.ssim_mean = M.synthesis_quality(
            G, test.images, test.labels, test.subjects, K)
        if report.psnr_mean is None:
            notes.append("no same-subject ground truth in the test fold; PSNR/SSIM skipped")
        try:
            pairs = M.build_verification_pairs(G, test.images, test.subjects, trainer.embedder, K,
                                               seed=seed)
            report.verification_rate, report.verification_threshold = M.verification_rate(pairs)
        except ValueError as err:
            notes.append(f"verification skipped: {err}")
    else:
        notes.append(f"variant {v.name} has no generator; synthesis metrics skipped")
    for n in notes:
        log.info(n)
    report.notes = notes
    return report


def cmd_evaluate(args, cfg, out: Path):
    trainer = _restore(args.checkpoint)
    test = _fold_data(trainer.cfg, _manifest(args.manifest), args.fold, "test")
    report = evaluate_trainer(trainer, test, trainer.cfg.seed)
    report.write(out)
    print((out / "eval.txt").read_text(), end="")
    return {"accuracy": report.accuracy}


def _restore(path) -> Trainer:
    if path is None:
        raise DataError("--checkpoint is required for this command")
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    return restore(path)


@torch.no_grad()
def cmd_synthesize(args, cfg, out: Path):
    trainer = _restore(args.checkpoint)
    tcfg = trainer.cfg
    if args.config is not None and cfg.hash != tcfg.hash:
        raise CheckpointMismatch(f"--config hash {cfg.hash} differs from checkpoint's {tcfg.hash}")
    G = trainer.nets["G"].eval()
    K = tcfg.num_classes
    ones = torch.ones(K, K)
    all_k = torch.arange(K)
    written = []
    if args.mode == "prior":
        gen = torch.Generator().manual_seed(args.seed if args.seed is not None else tcfg.seed)
        z = lc.prior_batch(args.count, tcfg.latent_dim, generator=gen)
        rows = [list(G.dec(zi.expand(K, -1), lc.intensity_codes(all_k, K, v=ones)).numpy())
                for zi in z]
        _write_grid(rows, out / "prior.png")
        written.append("prior.png")
    else:
        manifest = _manifest(args.manifest)
        data = _fold_data(tcfg, manifest, args.fold, "test")
        for i in range(min(args.count, len(data))):
            x = torch.from_numpy(data.images[i:i + 1])
            g = G.enc(x)
            if args.mode == "relabel":
                fakes = G.dec(g.expand(K, -1), lc.intensity_codes(all_k, K, v=ones))
                rows = [[data.images[i], *fakes.numpy()]]
            else:
                rows = []
                for k in range(K):
                    u = -torch.ones(SWEEP_STEPS, K)
                    u[:, k] = torch.linspace(-1, 1, SWEEP_STEPS)
                    rows.append([data.images[i], *G.dec(g.expand(SWEEP_STEPS, -1), u).numpy()])
            name = f"{args.mode}_{i:03d}.png"
            _write_grid(rows, out / name)
            written.append(name)
    print(f"wrote {len(written)} grid(s) to {out}")
    return {"files": written}


def cmd_shapes(args, cfg, out: Path):
    text = format_shape_table(shape_table(cfg))
    (out / "shapes.txt").write_text(text + "\n")
    print(text)
    return {}


def cmd_grad_audit(args, cfg, out: Path):
    """Compare intra-class gradients with and without anchor detaching on one batch."""
    data = _fold_data(cfg, _manifest(args.manifest), args.fold, "train")
    trainer = Trainer(cfg, data)
    batch = trainer.stream.get(0)
    x, x_pr = torch.from_numpy(batch.images), torch.from_numpy(batch.pair_images)
    y = torch.from_numpy(batch.labels)
    torch.manual_seed(cfg.seed)
    with torch.no_grad():
        z = lc.prior_batch(len(y), cfg.latent_dim)
        x_pf = trainer.nets["G"].dec(z, lc.intensity_codes(y, cfg.num_classes))
    R = trainer.nets["R"].eval()
    result = {}
    flat = {}
    for mode, flag in (("rdbp", True), ("full", False)):
        result[mode] = branch_gradient_norms(R.extract, x, x_pr, x_pf, rdbp=flag)
        grads = rdbp_gradients(R.extract, x, x_pr, x_pf, rdbp=flag, params=R.trainable_parameters())
        flat[mode] = torch.cat([g.reshape(-1) for g in grads["total"]])
    a, b = flat["rdbp"], flat["full"]
    result["parameter_grad_cosine"] = float(a @ b / (a.norm() * b.norm()).clamp_min(1e-12))
    (out / "grad_audit.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, indent=2, sort_keys=True))
    return result


def cmd_plots(args, cfg, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if args.metrics:
        rows = _read_metrics(args.metrics)
        for total in ("L_G", "L_Dimg", "L_Dz", "L_R"):
            pts = [(int(r["t"]), float(r[total])) for r in rows if r.get(total)]
            if not pts:
                continue
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.plot(*zip(*pts), lw=0.8)
            ax.set_xlabel("iteration")
            ax.set_ylabel(total)
            fig.tight_layout()
            fig.savefig(out / f"curve_{total}.png", dpi=100)
            plt.close(fig)
            written.append(f"curve_{total}.png")
    if args.reports:
        names, accs = [], []
        for spec in args.reports:
            name, _, path = spec.partition("=")
            names.append(name)
            accs.append(_read_accuracy(path))
        fig, ax = plt.subplots(figsize=(max(4, len(names)), 3))
        ax.bar(names, [100 * a for a in accs])
        ax.set_ylabel("accuracy (%)")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(out / "variant_accuracy.png", dpi=100)
        plt.close(fig)
        written.append("variant_accuracy.png")
    if not written:
        raise DataError("nothing to plot: pass --metrics and/or --reports")
    print(f"wrote {', '.join(written)}")
    return {"files": written}


def _read_metrics(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path} not found")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "t" not in reader.fieldnames:
            raise DataError(f"{path}: missing header")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no rows")
    return rows


def _read_accuracy(path) -> float:
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and row[0] == "accuracy":
                return float(row[1])
    raise DataError(f"{path}: no accuracy row")


COMMANDS = {
    "toydata": cmd_toydata,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "shapes": cmd_shapes,
    "grad-audit": cmd_grad_audit,
    "plots": cmd_plots,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fesr", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="experiment config JSON (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = add("toydata", "render the procedural face dataset")
    sp.add_argument("--identities", type=int, default=200)
    sp.add_argument("--intensities", default="0.6,0.8,1.0")

    for name, text in (("pretrain", "stage-1 training only (up to P_pre)"),
                       ("train", "full training on one fold, then evaluate it")):
        sp = add(name, text)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--log-every", type=int, default=100)

    sp = add("synthesize", "render relabel / prior / intensity-sweep grids")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("relabel", "prior", "intensity_sweep"), default="relabel")
    sp.add_argument("--manifest")
    sp.add_argument("--fold", type=int, default=0)
    sp.add_argument("--count", type=int, default=4)

    sp = add("evaluate", "accuracy, PSNR/SSIM and verification on a held-out fold")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fold", type=int, default=0)

    add("shapes", "per-layer shape table of all networks")

    sp = add("grad-audit", "gradient norms per feature branch with and without anchor detaching")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fold", type=int, default=0)

    sp = add("plots", "loss curves from metrics.csv and variant accuracy bars")
    sp.add_argument("--metrics", help="metrics.csv of a run")
    sp.add_argument("--reports", nargs="*", help="NAME=eval.csv pairs for the bar chart")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    start = time.time()
    try:
        cfg = load_config(args)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, cfg, out)
    except (ConfigError, CheckpointMismatch) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, ValueError, IndexError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    run_info = {
        "command": args.command,
        "argv": sys.argv[1:] if argv is None else list(argv),
        "config_hash": cfg.hash,
        "git_describe": _git_describe(),
        "wall_time_s": round(time.time() - start, 3),
        "summary": summary,
    }
    (out / "run.json").write_text(json.dumps(run_info, indent=2, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
