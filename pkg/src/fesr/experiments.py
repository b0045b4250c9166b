"""Desk-scale variant runs on the toy face dataset.

Shared by ``scripts/reproduce_ablation.py`` and the acceptance tests: build
the toy dataset once, train one variant on one fold, and report held-out
accuracy plus the real-to-synthetic feature distance at every checkpoint.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import labelcodes as lc
from .datamodel import ExperimentConfig
from .datasets import ImageSet, load_manifest, make_folds
from .metrics import recognition_report
from .toyfaces import generate_dataset
from .trainer import Trainer, run

log = logging.getLogger(__name__)

# 200 identities, K=4, 32x32 grey faces; one fold of a subject-independent 5-fold split
TOY_DATA = dict(n_identities=200, num_classes=4, intensities=(0.6, 0.8, 1.0), size=32, seed=7)

DESK_CONFIG = ExperimentConfig(
    num_classes=4, image_size=32, channels=1,
    base_width=32, recognizer_widths=(64, 128), recognizer_hidden=512,
    p_pre=2000, p_max=10000, checkpoint_every=500, fold_count=5,
)

PROBE_SIZE = 256


def toy_manifest(root) -> Path:
    """Generate the desk dataset under ``root`` unless it already exists."""
    root = Path(root)
    path = root / "manifest.tsv"
    if not path.exists():
        d = TOY_DATA
        generate_dataset(d["n_identities"], d["num_classes"], list(d["intensities"]), d["size"],
                         d["seed"], root)
    return path


@torch.no_grad()
def feature_distance(trainer: Trainer, probe: ImageSet, seed: int = 0) -> float:
    """Mean ||R_ext(x) - R_ext(x_pf)|| over real probe images and same-class prior samples.

    Uses its own generator, so calling it never perturbs the training RNG.
    """
    G, R = trainer.nets["G"], trainer.nets["R"]
    was_training = (G.training, R.training)
    G.eval()
    R.eval()
    gen = torch.Generator().manual_seed(seed)
    x = torch.from_numpy(probe.images)
    y = torch.from_numpy(probe.labels)
    z = lc.prior_batch(len(y), trainer.cfg.latent_dim, generator=gen)
    x_pf = G.dec(z, lc.intensity_codes(y, trainer.cfg.num_classes, generator=gen))
    d = (R.extract(x) - R.extract(x_pf)).norm(dim=1).mean().item()
    G.train(was_training[0])
    R.train(was_training[1])
    return d


@dataclass
class VariantResult:
    variant: str
    seed: int
    accuracy: float
    distances: list[tuple[int, float]] = field(default_factory=list)
    curve: list[tuple[int, float]] = field(default_factory=list)  # held-out accuracy per checkpoint
    seconds: float = 0.0

    def contraction(self) -> float | None:
        """Final checkpoint distance over the first joint-stage checkpoint distance."""
        if len(self.distances) < 2:
            return None
        return self.distances[-1][1] / self.distances[0][1]


def run_variant(variant: str, seed: int, manifest_path, out_dir, base: ExperimentConfig = DESK_CONFIG,
                fold: int = 0) -> VariantResult:
    """Train ``variant`` on ``fold`` and evaluate on its held-out subjects.

    Results are written to ``out_dir/result.json``; an existing result for
    the same config is returned as is.
    """
    cfg = base.replace(variant=variant, seed=seed)
    out = Path(out_dir)
    result_path = out / "result.json"
    if result_path.exists():
        saved = json.loads(result_path.read_text())
        if saved.get("config_hash") == cfg.hash:
            saved.pop("config_hash")
            saved["distances"] = [tuple(d) for d in saved["distances"]]
            saved["curve"] = [tuple(d) for d in saved["curve"]]
            return VariantResult(**saved)
    manifest = load_manifest(manifest_path)
    # folds are drawn from the data seed, so every training seed sees the same split
    split = make_folds(manifest, cfg.fold_count, TOY_DATA["seed"])
    train = ImageSet.load(manifest, split.train_entries(fold))
    test = ImageSet.load(manifest, split.test_entries(fold))
    probe_idx = np.random.default_rng(0).choice(len(train), min(PROBE_SIZE, len(train)), replace=False)
    probe = ImageSet(train.images[probe_idx], train.labels[probe_idx],
                     [train.subjects[i] for i in probe_idx])

    distances: list[tuple[int, float]] = []
    curve: list[tuple[int, float]] = []

    def progress(trainer, report, totals):
        v, t = trainer.variant, trainer.t
        if not (cfg.checkpoint_every and v.recognizer and t > trainer.p_pre
                and t % cfg.checkpoint_every == 0):
            return
        if v.synthesis:
            distances.append((t, feature_distance(trainer, probe)))
        acc = recognition_report(trainer.nets["R"], test.images, test.labels, cfg.num_classes)
        curve.append((t, acc.accuracy))
        log.info("%s seed %d t=%d accuracy %.4f", variant, seed, t, acc.accuracy)

    start = time.time()
    trainer = run(cfg, manifest, fold, out, data=train, progress=progress, resume=False)
    acc = recognition_report(trainer.nets["R"], test.images, test.labels, cfg.num_classes).accuracy
    # keep disk use bounded: only the first joint-stage and the final checkpoints stay
    keep = {f"ckpt_{cfg.p_max}.pt"} | {f"ckpt_{t}.pt" for t, _ in curve[:1]}
    for ckpt in out.glob("ckpt_*.pt"):
        if ckpt.name not in keep:
            ckpt.unlink()
    res = VariantResult(variant, seed, acc, distances, curve, round(time.time() - start, 1))
    result_path.write_text(json.dumps({**asdict(res), "config_hash": cfg.hash}, indent=2) + "\n")
    return res


def summary_table(results: list[VariantResult]) -> str:
    """Per-variant mean and spread of held-out accuracy, one line each."""
    by_variant: dict[str, list[float]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r.accuracy)
    lines = [f"{'variant':<14} {'seeds':>5} {'mean acc (%)':>12} {'std':>6}"]
    for name, accs in by_variant.items():
        a = 100 * np.array(accs)
        lines.append(f"{name:<14} {len(a):>5} {a.mean():>12.2f} {a.std():>6.2f}")
    return "\n".join(lines)
