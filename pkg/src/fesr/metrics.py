"""Image quality, recognition and identity-verification metrics, plus feature export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import labelcodes as lc

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _unit(img) -> np.ndarray:
    """[-1, 1] -> [0, 1] as float64."""
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def psnr(a, b) -> float:
    """PSNR in dB of two [-1, 1] images, measured on the [0, 1] scale."""
    a, b = _unit(a), _unit(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", view, win)


def ssim(a, b) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows, channel-averaged.

    Inputs are [-1, 1] arrays shaped [H, W] or [c, H, W].
    """
    a, b = _unit(a), _unit(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    vals = []
    for ca, cb in zip(a, b):
        mu_a, mu_b = _filter_valid(ca, win), _filter_valid(cb, win)
        var_a = _filter_valid(ca * ca, win) - mu_a**2
        var_b = _filter_valid(cb * cb, win) - mu_b**2
        cov = _filter_valid(ca * cb, win) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    return float(np.mean(p == y))


def confusion(predictions, labels, num_classes: int) -> np.ndarray:
    """Counts indexed [true, predicted]."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (y, p), 1)
    return m


def cosine_similarity(a, b) -> np.ndarray:
    a, b = np.atleast_2d(a).astype(np.float64), np.atleast_2d(b).astype(np.float64)
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.maximum(den, 1e-12)


def verification_rate(pairs) -> tuple[float, float]:
    """Best accuracy of "same identity iff similarity >= threshold", and that threshold.

    ``pairs`` holds (embedding_a, embedding_b, same) triples, or
    (similarity, same) tuples when embeddings were already compared.
    """
    sims, same = [], []
    for p in pairs:
        if len(p) == 3:
            sims.append(float(cosine_similarity(p[0], p[1])[0]))
            same.append(bool(p[2]))
        else:
            sims.append(float(p[0]))
            same.append(bool(p[1]))
    return threshold_sweep(np.array(sims), np.array(same, dtype=bool))


def threshold_sweep(sims: np.ndarray, same: np.ndarray) -> tuple[float, float]:
    n = len(sims)
    if n == 0 or same.all() or not same.any():
        raise ValueError("need at least one positive and one negative pair")
    order = np.argsort(-sims, kind="stable")
    s, lab = sims[order], same[order]
    # predicting "same" for the top j pairs: correct = positives in top j + negatives below
    tp = np.concatenate([[0], np.cumsum(lab)])
    fp = np.concatenate([[0], np.cumsum(~lab)])
    n_neg = int((~same).sum())
    correct = tp + (n_neg - fp)
    # only cut between distinct similarity values (ties share a prediction)
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[:-1] != s[1:]
    correct = np.where(valid, correct, -1)
    j = int(np.argmax(correct))
    threshold = float(s[j - 1]) if j > 0 else float(np.inf)
    return float(correct[j]) / n, threshold


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    per_class_accuracy: list[float]
    psnr_mean: float | None = None
    ssim_mean: float | None = None
    verification_rate: float | None = None
    verification_threshold: float | None = None
    notes: list[str] = field(default_factory=list)

    def rows(self):
        yield "accuracy", self.accuracy
        for k, acc in enumerate(self.per_class_accuracy):
            yield f"accuracy_class_{k}", acc
        yield "psnr_mean", self.psnr_mean
        yield "ssim_mean", self.ssim_mean
        yield "verification_rate", self.verification_rate
        yield "verification_threshold", self.verification_threshold

    def write(self, out_dir, stem: str = "eval") -> None:
        out = Path(out_dir)
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in self.rows():
                w.writerow([k, "" if v is None else repr(float(v))])
        lines = [f"{k}: {'n/a' if v is None else f'{v:.6f}'}" for k, v in self.rows()]
        lines.append("confusion [true, predicted]:")
        lines += ["  " + " ".join(f"{c:5d}" for c in row) for row in self.confusion]
        lines += [f"note: {n}" for n in self.notes]
        (out / f"{stem}.txt").write_text("\n".join(lines) + "\n")


@torch.no_grad()
def predict(recognizer, images, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(predicted classes, features) in evaluation mode."""
    recognizer.eval()
    preds, feats = [], []
    x = torch.as_tensor(images)
    for i in range(0, len(x), batch_size):
        f, logits = recognizer(x[i:i + batch_size])
        preds.append(logits.argmax(1).numpy())
        feats.append(f.numpy())
    return np.concatenate(preds), np.concatenate(feats)


def recognition_report(recognizer, images, labels, num_classes: int) -> EvalReport:
    preds, _ = predict(recognizer, images)
    cm = confusion(preds, labels, num_classes)
    per_class = [float(cm[k, k] / cm[k].sum()) if cm[k].sum() else float("nan")
                 for k in range(num_classes)]
    return EvalReport(accuracy(preds, labels), cm, per_class)


@torch.no_grad()
def synthesis_quality(generator, images, labels, subjects, num_classes: int):
    """Mean PSNR/SSIM of relabelled syntheses against the real same-(subject, class) image.

    Returns (None, None) when no ground-truth pair exists.
    """
    generator.eval()
    lookup = {}
    for i, (s, k) in enumerate(zip(subjects, labels)):
        lookup.setdefault((s, int(k)), i)
    ps, ss = [], []
    x = torch.as_tensor(images)
    ones = torch.ones(1, num_classes)
    for i in range(len(x)):
        g = generator.enc(x[i:i + 1])
        for k in range(num_classes):
            if k == int(labels[i]) or (subjects[i], k) not in lookup:
                continue
            u = lc.intensity_codes(torch.tensor([k]), num_classes, v=ones)
            fake = generator.dec(g, u)[0].numpy()
            real = images[lookup[(subjects[i], k)]]
            ps.append(psnr(fake, real))
            ss.append(ssim(fake, real))
    if not ps:
        return None, None
    return float(np.mean(ps)), float(np.mean(ss))


@torch.no_grad()
def build_verification_pairs(generator, images, subjects, embedder, num_classes: int,
                             per_subject: int = 1, seed: int = 0):
    """Pairs (F_id(real), F_id(synthetic), same_identity).

    For each chosen real image: one same-identity synthesis per class from its
    own latent code, and one different-identity synthesis per class from a
    prior sample -- 2K pairs per real image.
    """
    if num_classes < 2:
        raise ValueError("need K >= 2")
    rng = np.random.default_rng(seed)
    by_subject: dict[str, list[int]] = {}
    for i, s in enumerate(subjects):
        by_subject.setdefault(s, []).append(i)
    if not by_subject:
        raise ValueError("no images to build verification pairs from")
    chosen = []
    for s in sorted(by_subject):
        idx = by_subject[s]
        chosen += list(rng.choice(idx, size=min(per_subject, len(idx)), replace=False))
    generator.eval()
    gen = torch.Generator().manual_seed(seed)
    ks = torch.arange(num_classes)
    u = lc.intensity_codes(ks, num_classes, v=torch.ones(num_classes, num_classes))
    pairs = []
    for i in chosen:
        x = torch.as_tensor(images[i:i + 1])
        f_real = embedder(x)[0].numpy()
        g = generator.enc(x).repeat(num_classes, 1)
        z = lc.prior_batch(num_classes, g.shape[1], generator=gen)
        same = embedder(generator.dec(g, u)).numpy()
        diff = embedder(generator.dec(z, u)).numpy()
        pairs += [(f_real, f, True) for f in same]
        pairs += [(f_real, f, False) for f in diff]
    return pairs


def export_features(recognizer, images, labels, out_path, synthetic=None) -> int:
    """CSV with label, synthetic flag and the feature vector per image; returns row count."""
    _, feats = predict(recognizer, images)
    synthetic = np.zeros(len(labels), dtype=bool) if synthetic is None else np.asarray(synthetic)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "synthetic", *(f"f{j}" for j in range(feats.shape[1]))])
        for lab, syn, f in zip(labels, synthetic, feats):
            w.writerow([int(lab), int(bool(syn)), *(repr(float(v)) for v in f)])
    return len(feats)


def read_features(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = np.array([int(r[0]) for r in rows])
    synthetic = np.array([bool(int(r[1])) for r in rows])
    feats = np.array([[float(v) for v in r[2:]] for r in rows])
    return labels, synthetic, feats
