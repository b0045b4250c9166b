"""Two-stage training loop: pre-train the synthesis GAN, then train it jointly with R.

Each iteration updates, in order: D_z, D_img, then (joint stage only) R on
triplets built from a prior-sampled synthetic image, and finally G.

All randomness inside an iteration comes from the global torch RNG reseeded
from (seed, t) and from numpy generators keyed by (seed, t), so a run resumed
from a checkpoint replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import labelcodes as lc
from . import losses as L
from .datamodel import ExperimentConfig, validate_config
from .datasets import BatchStream, ImageSet, make_folds
from .networks import IdentityEmbedder, build_networks, toy_embedder_net
from .rdbp import intra_class_loss
from .variants import get_variant

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
NETWORKS = ("G", "D_img", "D_z", "R")
CSV_TERMS = L.TERM_NAMES


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = list(problems)


class DivergenceError(RuntimeError):
    def __init__(self, t, term, value, report):
        dump = ", ".join(f"{k}={v:.4g}" for k, v in report.items() if v is not None)
        super().__init__(f"t={t}: loss term {term} = {value} diverged ({dump})")
        self.t, self.term, self.value = t, term, value


class CheckpointMismatch(RuntimeError):
    pass


def step_seed(seed: int, t: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, t, stream]).generate_state(1)[0])


def make_optimizers(cfg: ExperimentConfig, nets: dict[str, nn.Module]) -> dict:
    opts = {}
    for name, net in nets.items():
        params = [p for p in net.parameters() if p.requires_grad]
        opts[name] = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    return opts


@contextlib.contextmanager
def frozen(*nets: nn.Module):
    """Temporarily stop parameter gradients of ``nets`` (inputs still get gradient)."""
    saved = [(p, p.requires_grad) for n in nets for p in n.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def pretrain_toy_embedder(data: ImageSet, cfg: ExperimentConfig, seed: int = 0) -> IdentityEmbedder:
    """Fit a small identity classifier on the training subjects, then freeze its trunk."""
    torch.manual_seed(step_seed(seed, 0, 1))
    net = toy_embedder_net(cfg.image_size, cfg.channels, cfg.embed_dim, cfg.embed_width)
    subjects = sorted(set(data.subjects))
    sid = torch.tensor([subjects.index(s) for s in data.subjects])
    head = nn.Linear(cfg.embed_dim, len(subjects))
    opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=1e-3)
    images = torch.from_numpy(data.images)
    rng = np.random.default_rng([seed, 99])
    bs = min(64, len(data))
    for _ in range(cfg.embed_steps):
        idx = torch.from_numpy(rng.choice(len(data), bs, replace=False))
        loss = nn.functional.cross_entropy(head(net(images[idx])), sid[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return IdentityEmbedder(net, cfg.embed_dim)


class Trainer:
    """Owns the four trainable networks, their optimizers and the iteration counter."""

    def __init__(self, cfg: ExperimentConfig, data: ImageSet, embedder: IdentityEmbedder | None = None):
        problems = validate_config(cfg)
        if problems:
            raise ConfigError(problems)
        self.cfg = cfg
        self.variant = get_variant(cfg.variant)
        self.data = data
        self.p_pre = cfg.p_pre if self.variant.pretrain_stage else 0
        torch.manual_seed(step_seed(cfg.seed, 0, 2))
        self.nets = build_networks(cfg)
        if embedder is None:
            embedder = pretrain_toy_embedder(data, cfg, cfg.seed)
        self.embedder = embedder
        self.opts = make_optimizers(cfg, self.nets)
        self.stream = BatchStream(data, cfg.batch_size, cfg.seed, cfg.pair_same_subject)
        self.t = 0

    # ------------------------------------------------------------------ stages
    def stage(self, t: int | None = None) -> str:
        t = self.t if t is None else t
        return "joint" if self.variant.recognizer and t >= self.p_pre else "pretrain"

    def stage_label(self, t: int | None = None) -> str:
        s = self.stage(t)
        if s == "joint" and not self.variant.joint:
            return "separate"
        return s

    def gan_active(self, stage: str) -> bool:
        v = self.variant
        return v.synthesis and (stage == "pretrain" or v.joint)

    # ----------------------------------------------------------------- updates
    def _update(self, name: str, loss: torch.Tensor):
        for opt in self.opts.values():
            opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.debug_isolation:
            for other, net in self.nets.items():
                if other == name:
                    continue
                leaked = [p for p in net.parameters() if p.grad is not None and p.grad.abs().sum() > 0]
                if leaked:
                    raise AssertionError(f"update of {name} leaked gradient into {other}")
        self.opts[name].step()
        for opt in self.opts.values():
            opt.zero_grad(set_to_none=True)

    def _check(self, report: dict, totals: dict):
        for k, v in list(report.items()) + list(totals.items()):
            if v is not None and not (math.isfinite(v) and abs(v) <= DIVERGENCE_LIMIT):
                raise DivergenceError(self.t, k, v, {**report, **totals})

    def train_step(self):
        """Run iteration ``self.t``; returns (report, totals) as float dicts."""
        try:
            return self._train_step()
        except L.NonFiniteError as err:
            raise DivergenceError(self.t, "logits", float("nan"), {}) from err

    def _train_step(self):
        cfg, v = self.cfg, self.variant
        t = self.t
        stage = self.stage(t)
        torch.manual_seed(step_seed(cfg.seed, t))
        batch = self.stream.get(t)
        x = torch.from_numpy(batch.images)
        y = torch.from_numpy(batch.labels)
        x_pr = torch.from_numpy(batch.pair_images)
        K, lam = cfg.num_classes, cfg.lambdas
        G, D_img, D_z, R = (self.nets[n] for n in NETWORKS)
        for net in self.nets.values():
            net.train()
        terms: dict[str, torch.Tensor] = {}
        totals: dict[str, float | None] = dict.fromkeys(L.TOTAL_NAMES)
        gan = self.gan_active(stage)
        B = x.shape[0]

        z = lc.prior_batch(B, cfg.latent_dim)
        y_t = u_t = u_y = None
        if v.synthesis:
            y_t = lc.target_labels(y, K)
            u_t = lc.intensity_codes(y_t, K)
            u_y = lc.intensity_codes(y, K)

        if gan:
            # D_z
            g = G.enc(x)
            if v.latent_disc:
                terms["adv_d_z"] = L.adv_d_z(D_z(z), D_z(g.detach()))
                self._update("D_z", terms["adv_d_z"])
                totals["L_Dz"] = terms["adv_d_z"].item()
            # D_img
            x_hat = G.dec(g, u_t)
            if v.image_disc:
                for _ in range(cfg.d_steps):
                    real_adv, real_cls = D_img(x)
                    fake_adv, _ = D_img(x_hat.detach())
                    terms["adv_d_img"] = L.adv_d_img(real_adv, fake_adv)
                    terms["gp"] = L.gradient_penalty(D_img, x, x_hat, cfg.gp_coeff)
                    if v.image_disc_cls:
                        terms["cls_D_r"] = L.cls_ce(real_cls, y)
                    l_dimg = L.image_disc_objective(terms, lam, v)
                    self._update("D_img", l_dimg)
                totals["L_Dimg"] = l_dimg.item()

        if stage == "joint":
            x_pf, y_pf = self._synthesize_for_r(x, y, z, u_y, no_grad=not v.joint)
            # R
            f_x, logits_x = R(x)
            terms["cls_R_r"] = L.cls_ce(logits_x, y)
            if v.synthesis:
                f_pf, logits_pf = R(x_pf.detach())
                terms["cls_R_f_R"] = L.cls_ce(logits_pf, y_pf)
                terms["cls_R"] = L.cls_ce(torch.cat([logits_x, logits_pf]), torch.cat([y, y_pf]))
                if v.intra_loss:
                    f_pr = R.extract(x_pr)
                    intra = intra_class_loss(f_x, f_pr, f_pf, rdbp=v.rdbp)
                    terms.update(intra=intra.total, dist_r=intra.dist_r, dist_rf=intra.dist_rf)
            else:
                terms["cls_R"] = terms["cls_R_r"]
            l_r = L.recognizer_objective(terms, lam, v)
            self._update("R", l_r)
            totals["L_R"] = l_r.item()
            terms.pop("cls_R_f_R", None)

        if gan:
            x_rec = G.dec(g, u_y)
            with frozen(D_img, D_z, R):
                if v.image_disc:
                    fake_adv, fake_cls = D_img(x_hat)
                    terms["adv_g_img"] = L.adv_g_img(fake_adv)
                    if v.image_disc_cls:
                        terms["cls_D_f"] = L.cls_ce(fake_cls, y_t)
                if v.latent_disc:
                    terms["adv_g_z"] = L.adv_g_z(D_z(g))
                if v.content_losses:
                    terms["rec"] = L.recon_l1(x, x_rec)
                    if v.identity_loss:
                        f_real = self.embedder(x)
                        id_loss = L.identity_l1(f_real, self.embedder(x_rec))
                        if cfg.identity_on_synth:
                            id_loss = 0.5 * (id_loss + L.identity_l1(f_real, self.embedder(x_hat)))
                        terms["id"] = id_loss
                if stage == "joint":
                    # R was just updated; re-score the synthetic images for G
                    _, logits_pf = R(x_pf)
                    terms["cls_R_f"] = L.cls_ce(logits_pf, y_pf)
                l_g = L.generator_objective(terms, lam, stage, v)
                self._update("G", l_g)
            totals["L_G"] = l_g.item()
        elif stage == "joint" and v.synthesis:
            with torch.no_grad():
                _, logits_pf = R(x_pf)
                terms["cls_R_f"] = L.cls_ce(logits_pf, y_pf)

        report = {k: val.item() for k, val in terms.items()}
        self._check(report, totals)
        self.t += 1
        return report, totals

    def _synthesize_for_r(self, x, y, z, u_y, no_grad: bool):
        """x_pf and its labels: prior samples decoded with u(y), or all-K relabels of g(x)."""
        v, K = self.variant, self.cfg.num_classes
        if not v.synthesis:
            return None, None
        G = self.nets["G"]
        ctx = torch.no_grad() if no_grad else contextlib.nullcontext()
        with ctx:
            if v.prior_synthesis:
                return G.dec(z, u_y), y
            B = x.shape[0]
            g = G.enc(x).repeat_interleave(K, dim=0)
            y_all = torch.arange(K).repeat(B)
            return G.dec(g, lc.intensity_codes(y_all, K)), y_all

    # ------------------------------------------------------------- persistence
    def state_dict(self) -> dict:
        return {
            "config": self.cfg.to_json(),
            "config_hash": self.cfg.hash,
            "t": self.t,
            "stage": self.stage_label(max(self.t - 1, 0)),
            "nets": {n: net.state_dict() for n, net in self.nets.items()},
            "embedder": self.embedder.net.state_dict(),
            "opts": {n: o.state_dict() for n, o in self.opts.items()},
            "betas": (self.cfg.beta1, self.cfg.beta2),
            "rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict):
        if state["config_hash"] != self.cfg.hash:
            raise CheckpointMismatch(
                f"checkpoint config hash {state['config_hash']} != current {self.cfg.hash}")
        for n, net in self.nets.items():
            net.load_state_dict(state["nets"][n])
        self.embedder.net.load_state_dict(state["embedder"])
        for n, o in self.opts.items():
            o.load_state_dict(state["opts"][n])
        torch.set_rng_state(state["rng"])
        self.t = int(state["t"])

    def save(self, path) -> None:
        torch.save(self.state_dict(), path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def restore(path, data: ImageSet | None = None) -> Trainer:
    """Rebuild a Trainer (networks, embedder, optimizers, counter) from a checkpoint."""
    state = load_checkpoint(path)
    cfg = ExperimentConfig.from_json(state["config"])
    if cfg.hash != state["config_hash"]:
        raise CheckpointMismatch("stored config does not match its stored hash")
    trainer = Trainer.__new__(Trainer)
    trainer.cfg, trainer.variant = cfg, get_variant(cfg.variant)
    trainer.p_pre = cfg.p_pre if trainer.variant.pretrain_stage else 0
    trainer.nets = build_networks(cfg)
    trainer.embedder = IdentityEmbedder(
        toy_embedder_net(cfg.image_size, cfg.channels, cfg.embed_dim, cfg.embed_width), cfg.embed_dim)
    trainer.opts = make_optimizers(cfg, trainer.nets)
    trainer.data = data
    trainer.stream = None if data is None else BatchStream(data, cfg.batch_size, cfg.seed,
                                                          cfg.pair_same_subject)
    trainer.load_state_dict(state)
    trainer.embedder.freeze()
    return trainer


# ------------------------------------------------------------------------ run

def _csv_header():
    return ["t", "stage", *CSV_TERMS, *L.TOTAL_NAMES]


def _fmt(v):
    return "" if v is None else repr(float(v))


def _latest_checkpoint(out_dir: Path):
    found = []
    for p in out_dir.glob("ckpt_*.pt"):
        try:
            found.append((int(p.stem.split("_")[1]), p))
        except ValueError:
            continue
    return max(found)[1] if found else None


def run(cfg: ExperimentConfig, manifest, fold: int, out_dir, resume: bool = True,
        stop_at: int | None = None, embedder: IdentityEmbedder | None = None,
        data: ImageSet | None = None, progress=None, save_at_stop: bool = False) -> Trainer:
    """Train on the training part of ``fold`` for p_max iterations.

    Writes ``metrics.csv`` (one row per iteration), ``ckpt_<t>.pt`` every
    ``checkpoint_every`` iterations and at the end, and ``config.json``.
    ``stop_at`` ends the loop early; with ``save_at_stop`` a checkpoint is
    written there too (otherwise it simulates an interruption).
    """
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        split = make_folds(manifest, cfg.fold_count, cfg.seed)
        data = ImageSet.load(manifest, split.train_entries(fold))
    cfg.save(out / "config.json")

    ckpt = _latest_checkpoint(out) if resume else None
    if ckpt is not None:
        trainer = restore(ckpt, data)
        if trainer.cfg.hash != cfg.hash:
            raise CheckpointMismatch(f"{ckpt} was written with a different config")
        log.info("resuming from %s at t=%d", ckpt, trainer.t)
    else:
        trainer = Trainer(cfg, data, embedder)

    metrics = out / "metrics.csv"
    rows = []
    if ckpt is not None and metrics.exists():
        with open(metrics, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) < trainer.t]
    with open(metrics, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_csv_header())
        w.writerows(rows)
        end = cfg.p_max if stop_at is None else min(stop_at, cfg.p_max)
        while trainer.t < end:
            t = trainer.t
            label = trainer.stage_label(t)
            report, totals = trainer.train_step()
            w.writerow([t, label, *(_fmt(report.get(k)) for k in CSV_TERMS),
                        *(_fmt(totals[k]) for k in L.TOTAL_NAMES)])
            if progress is not None:
                progress(trainer, report, totals)
            every = cfg.checkpoint_every
            if (every and trainer.t % every == 0) or trainer.t == cfg.p_max:
                fh.flush()
                trainer.save(out / f"ckpt_{trainer.t}.pt")
    if save_at_stop and not (out / f"ckpt_{trainer.t}.pt").exists():
        trainer.save(out / f"ckpt_{trainer.t}.pt")
    return trainer
