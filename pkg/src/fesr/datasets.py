"""Manifest I/O, subject-independent folds, same-class pairs and batch streams."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .datamodel import DatasetManifest, ManifestEntry, rescale_to_unit

log = logging.getLogger(__name__)

_HEADER = re.compile(r"^#K=(\d+)\s+size=(\d+)\s+channels=(\d+)\s*$")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"#K={manifest.num_classes} size={manifest.image_size} channels={manifest.channels}"]
    lines += [f"{e.path}\t{e.subject_id}\t{e.class_index}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError("manifest file not found", path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError("empty manifest", path, 1)
    m = _HEADER.match(lines[0])
    if not m:
        raise ManifestError(f"bad header {lines[0]!r}; expected '#K=<int> size=<int> channels=<int>'",
                            path, 1)
    k, size, channels = map(int, m.groups())
    entries, seen = [], set()
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"expected 3 tab-separated fields, got {len(parts)}", path, lineno)
        p, subject, cls = parts
        if not subject:
            raise ManifestError("empty subject_id", path, lineno)
        try:
            cls = int(cls)
        except ValueError:
            raise ManifestError(f"class index {cls!r} is not an integer", path, lineno) from None
        if not 0 <= cls < k:
            raise ManifestError(f"class index {cls} outside [0, {k})", path, lineno)
        if p in seen:
            raise ManifestError(f"duplicate path {p!r}", path, lineno)
        seen.add(p)
        entries.append(ManifestEntry(p, subject, cls))
    return DatasetManifest(tuple(entries), k, size, channels, root=str(path.parent))


def load_image(path, channels: int) -> np.ndarray:
    with PILImage.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im)
    arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
    return rescale_to_unit(arr)


@dataclass
class ImageSet:
    """Decoded images of a list of manifest entries, kept in memory."""

    images: np.ndarray            # [N, c, H, W] float32 in [-1, 1]
    labels: np.ndarray            # [N] int64
    subjects: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def load(cls, manifest: DatasetManifest, entries=None) -> "ImageSet":
        entries = list(manifest.entries if entries is None else entries)
        if not entries:
            raise ValueError("no entries to load")
        imgs = np.stack([load_image(manifest.resolve(e), manifest.channels) for e in entries])
        if imgs.shape[-1] != manifest.image_size or imgs.shape[-2] != manifest.image_size:
            raise ValueError(f"images are {imgs.shape[-2:]}, manifest says {manifest.image_size}")
        labels = np.array([e.class_index for e in entries], dtype=np.int64)
        return cls(imgs, labels, [e.subject_id for e in entries], entries)


@dataclass
class FoldSplit:
    fold_count: int
    fold_assignments: dict[str, int]
    entries: tuple[ManifestEntry, ...]

    def test_entries(self, fold: int) -> list[ManifestEntry]:
        self._check(fold)
        return [e for e in self.entries if self.fold_assignments[e.subject_id] == fold]

    def train_entries(self, fold: int) -> list[ManifestEntry]:
        self._check(fold)
        return [e for e in self.entries if self.fold_assignments[e.subject_id] != fold]

    def subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_assignments.items() if f == fold)

    def _check(self, fold):
        if not 0 <= fold < self.fold_count:
            raise IndexError(f"fold {fold} outside [0, {self.fold_count})")

    def export(self, path) -> None:
        rows = [f"{s}\t{f}" for s, f in sorted(self.fold_assignments.items())]
        Path(path).write_text("\n".join(rows) + "\n")


def make_folds(manifest: DatasetManifest, fold_count: int, seed: int = 0) -> FoldSplit:
    """Partition subjects (never images) into folds of near-equal size."""
    subjects = manifest.subjects
    if fold_count < 2:
        raise ValueError("fold_count must be >= 2")
    if fold_count > len(subjects):
        raise ValueError(f"fold_count {fold_count} exceeds the {len(subjects)} distinct subjects")
    order = np.random.default_rng(seed).permutation(len(subjects))
    assignments = {subjects[j]: int(pos % fold_count) for pos, j in enumerate(order)}
    return FoldSplit(fold_count, assignments, manifest.entries)


class PairIndex:
    """Lookup of same-class (optionally same-subject) partners for pair sampling."""

    def __init__(self, labels, subjects=None, same_subject: bool = False):
        self.labels = np.asarray(labels)
        self.subjects = None if subjects is None else np.asarray(subjects)
        self.same_subject = same_subject
        keys = self._keys(np.arange(len(self.labels)))
        self.groups: dict = {}
        for i, key in enumerate(keys):
            self.groups.setdefault(key, []).append(i)
        self.groups = {k: np.array(v) for k, v in self.groups.items()}
        self._warned = set()

    def _keys(self, idx):
        if self.same_subject:
            return [(int(self.labels[i]), self.subjects[i]) for i in idx]
        return [int(self.labels[i]) for i in idx]

    def partner(self, anchor: int, rng) -> int:
        group = self.groups[self._keys([anchor])[0]]
        if len(group) < 2:
            if anchor not in self._warned:
                log.warning("entry %d is alone in its class; pairing it with itself", anchor)
                self._warned.add(anchor)
            return anchor
        j = int(rng.integers(len(group) - 1))
        pos = int(np.searchsorted(group, anchor))
        return int(group[j + 1 if j >= pos else j])


def sample_pair(entries, anchor_index: int, rng, same_subject: bool = False):
    """Return (anchor_index, partner_index): a uniformly drawn other entry of the same class."""
    labels = [e.class_index for e in entries]
    subjects = [e.subject_id for e in entries]
    return anchor_index, PairIndex(labels, subjects, same_subject).partner(anchor_index, rng)


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    pair_indices: np.ndarray
    pair_images: np.ndarray


class BatchStream:
    """Batches addressed by iteration number, so a resumed run sees the same data.

    Epoch ``e`` uses the permutation seeded by (seed, e); the incomplete tail
    of every epoch is dropped.
    """

    def __init__(self, data: ImageSet, batch_size: int, seed: int = 0, same_subject: bool = False):
        if len(data) == 0:
            raise ValueError("cannot batch an empty entry list")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if batch_size > len(data):
            raise ValueError(f"batch_size {batch_size} exceeds the {len(data)} entries")
        self.data = data
        self.batch_size = batch_size
        self.seed = seed
        self.pairs = PairIndex(data.labels, data.subjects, same_subject)
        self.per_epoch = len(data) // batch_size
        self._perm_cache: tuple[int, np.ndarray] | None = None

    def permutation(self, epoch: int) -> np.ndarray:
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.data))
            self._perm_cache = (epoch, perm)
        return self._perm_cache[1]

    def get(self, t: int) -> Batch:
        epoch, pos = divmod(t, self.per_epoch)
        idx = self.permutation(epoch)[pos * self.batch_size:(pos + 1) * self.batch_size]
        rng = np.random.default_rng([self.seed, t, 7])
        pair = np.array([self.pairs.partner(int(i), rng) for i in idx])
        d = self.data
        return Batch(idx, d.images[idx], d.labels[idx], pair, d.images[pair])

    def epoch(self, epoch: int = 0):
        for pos in range(self.per_epoch):
            yield self.get(epoch * self.per_epoch + pos)


def batches(data: ImageSet, batch_size: int, seed: int = 0, epoch: int = 0):
    """One epoch of (images, labels, pair images) tuples."""
    for b in BatchStream(data, batch_size, seed).epoch(epoch):
        yield b.images, b.labels, b.pair_images
