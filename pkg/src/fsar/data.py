"""Episodic data: synthetic video datasets, M-way K-shot sampling, file IO.

A "video" here is a sequence of patch-feature grids: shape
(frames, grid_rows, grid_cols, patch_dim) float32.  The synthetic generator
places class identity in one half of the patch dimensions and a per-video
temporal random walk in the other half, so classes are exactly separable by
a nearest-centroid rule at zero noise while raw per-frame features can be
dominated by drift.

Manifests are immutable after construction; samplers take explicit RNGs so
concurrent samplers with independent streams are safe.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class InputError(ValueError):
    """A request cannot be satisfied by the available data."""


class FormatError(ValueError):
    """An embedding file is malformed; the message carries the byte offset."""


MAGIC = b"FSAR"
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")
# class-wise split proportions, train/val/test
SPLIT_WEIGHTS = (64, 12, 24)


@dataclass(frozen=True)
class VideoRecord:
    """One video: per-frame patch grids plus its class and split tags."""

    frames: np.ndarray  # (frame_count, grid_rows, grid_cols, patch_dim) float32
    class_id: int
    split: str

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[VideoRecord, ...]
    class_vocabulary: dict[int, str]
    split_assignment: dict[int, str]

    def classes_in_split(self, split: str) -> list[int]:
        return sorted(c for c, s in self.split_assignment.items() if s == split)

    def records_for_class(self, class_id: int) -> list[VideoRecord]:
        return [r for r in self.records if r.class_id == class_id]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.records[0].grid_shape

    def validate(self) -> None:
        by_split: dict[str, set[int]] = {s: set() for s in SPLITS}
        for c, s in self.split_assignment.items():
            by_split[s].add(c)
        for a in SPLITS:
            for b in SPLITS:
                if a < b and by_split[a] & by_split[b]:
                    raise InputError(f"splits {a!r} and {b!r} share classes")
        shape = self.grid_shape
        for r in self.records:
            if r.grid_shape != shape:
                raise FormatError(
                    f"grid shape mismatch: {r.grid_shape} vs {shape}"
                )


@dataclass(frozen=True)
class Episode:
    """One M-way K-shot task: support videos per class plus query videos."""

    support: dict[int, tuple[VideoRecord, ...]]  # class_id -> K records
    queries: tuple[VideoRecord, ...]
    class_ids: tuple[int, ...]  # the M support classes, episode order
    way: int
    shot: int
    frames: int

    def query_labels(self) -> list[int]:
        """Index of each query's true class within ``class_ids``."""
        return [self.class_ids.index(q.class_id) for q in self.queries]


def tsn_sample(frame_count: int, t: int, mode: str, rng: np.random.Generator | None = None) -> list[int]:
    """Segment-based frame selection: one index per segment of t equal parts.

    Segment i covers [floor(frame_count*i/t), floor(frame_count*(i+1)/t)).
    Train mode draws uniformly inside each segment; eval mode takes the
    segment center (floor convention).  Indices are strictly increasing.
    """
    if t < 1 or frame_count < t:
        raise InputError(f"cannot pick {t} segment frames from {frame_count} frames")
    if mode not in ("train", "eval"):
        raise InputError(f"unknown sampling mode {mode!r}")
    out = []
    for i in range(t):
        lo = frame_count * i // t
        hi = frame_count * (i + 1) // t
        if mode == "eval":
            out.append((lo + hi) // 2)
        else:
            if rng is None:
                raise InputError("train-mode tsn_sample needs an rng")
            out.append(int(rng.integers(lo, hi)))
    return out


def flip_augment(frames: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Horizontal-flip hook: reverses the grid-column axis with probability p."""
    if rng.random() < p:
        return np.ascontiguousarray(frames[:, :, ::-1, :])
    return frames


def synth_dataset(
    classes: int,
    videos_per_class: int,
    frames: int,
    grid: tuple[int, int, int] = (2, 2, 16),
    seed: int = 0,
    noise: float = 0.0,
    drift: float = 3.0,
) -> DatasetManifest:
    """Generate a deterministic synthetic dataset.

    Patch vector for (class m, video v, frame t, patch p):

        x = latent[m] + offset[p] + walk_v(t) + noise * eps

    latent[m] lives in the first half of the patch dims, the per-video
    random walk (step scale ``drift``) in the second half, so the class
    signal and the temporal nuisance occupy orthogonal subspaces.  Classes
    are split 64/12/24-style into train/val/test, class-wise.
    """
    if classes < 1 or videos_per_class < 1 or frames < 1:
        raise InputError("classes, videos_per_class and frames must all be >= 1")
    rows, cols, dim = grid
    if dim < 2:
        raise InputError("patch dim must be >= 2 to hold latent and drift subspaces")
    half = dim // 2
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))

    latents = np.zeros((classes, dim))
    raw = rng.standard_normal((classes, half))
    latents[:, :half] = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    offsets = rng.standard_normal((rows * cols, dim)) * 0.3

    # class-wise split by shuffled position, proportions 64/12/24
    order = rng.permutation(classes)
    n_train = max(1, round(classes * SPLIT_WEIGHTS[0] / 100))
    n_test = min(classes - n_train, max(1, round(classes * SPLIT_WEIGHTS[2] / 100))) if classes >= 2 else 0
    split_assignment: dict[int, str] = {}
    for pos, c in enumerate(order):
        if pos < n_train:
            split_assignment[int(c)] = "train"
        elif pos < n_train + n_test:
            split_assignment[int(c)] = "test"
        else:
            split_assignment[int(c)] = "val"

    records: list[VideoRecord] = []
    for c in range(classes):
        for _ in range(videos_per_class):
            steps = rng.standard_normal((frames, dim - half)) * drift
            walk = np.cumsum(steps, axis=0)
            walk -= walk.mean(axis=0)  # zero temporal mean: video descriptor keeps only the latent
            vid = np.zeros((frames, rows * cols, dim))
            vid += latents[c]
            vid += offsets[None, :, :]
            vid[:, :, half:] += walk[:, None, :]
            if noise > 0:
                vid += rng.standard_normal(vid.shape) * noise
            frames_grid = vid.reshape(frames, rows, cols, dim).astype(np.float32)
            records.append(VideoRecord(frames=frames_grid, class_id=c, split=split_assignment[c]))

    vocabulary = {c: f"class_{c:03d}" for c in range(classes)}
    manifest = DatasetManifest(
        records=tuple(records),
        class_vocabulary=vocabulary,
        split_assignment=split_assignment,
    )
    manifest.validate()
    return manifest


def sample_episode(
    manifest: DatasetManifest,
    way: int,
    shot: int,
    queries: int,
    t: int,
    split: str,
    rng: np.random.Generator,
    mode: str = "eval",
) -> Episode:
    """Draw one M-way K-shot episode from ``split``.

    ``queries`` is the total query count for the episode; each query's class
    is drawn uniformly from the M selected classes.  No video appears in
    both support and query.
    """
    classes = manifest.classes_in_split(split)
    if len(classes) < way:
        raise InputError(
            f"split {split!r} has {len(classes)} classes, needs {way} (short by {way - len(classes)})"
        )
    chosen = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    query_slots = [int(rng.integers(0, way)) for _ in range(queries)]
    need = {c: shot + sum(1 for s in query_slots if chosen[s] == c) for c in chosen}

    support: dict[int, tuple[VideoRecord, ...]] = {}
    pools: dict[int, list[VideoRecord]] = {}
    for c in chosen:
        pool = manifest.records_for_class(c)
        if len(pool) < need[c]:
            raise InputError(
                f"class {c} has {len(pool)} videos, needs {need[c]} (short by {need[c] - len(pool)})"
            )
        picked = [pool[i] for i in rng.choice(len(pool), size=need[c], replace=False)]
        support[c] = tuple(picked[:shot])
        pools[c] = picked[shot:]

    query_records = tuple(pools[chosen[s]].pop() for s in query_slots)

    def subsample(record: VideoRecord) -> VideoRecord:
        idx = tsn_sample(record.frame_count, t, mode, rng)
        return VideoRecord(
            frames=np.ascontiguousarray(record.frames[idx]),
            class_id=record.class_id,
            split=record.split,
        )

    episode = Episode(
        support={c: tuple(subsample(r) for r in vids) for c, vids in support.items()},
        queries=tuple(subsample(r) for r in query_records),
        class_ids=tuple(chosen),
        way=way,
        shot=shot,
        frames=t,
    )
    return episode


# -- embedding file format ------------------------------------------------------
#
# magic "FSAR" (4 bytes), version u16 LE, record count u32 LE, then per record:
# class_id u32, frame count u16, grid rows u16, grid cols u16, dim u16,
# payload frames*rows*cols*dim float32 LE.  A UTF-8 sidecar at <path>.manifest
# holds lines "class_id<TAB>class_name<TAB>split".


def save_embedding_file(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(manifest.records)))
        for r in manifest.records:
            f, rows, cols, dim = r.frames.shape
            fh.write(struct.pack("<IHHHH", r.class_id, f, rows, cols, dim))
            fh.write(np.ascontiguousarray(r.frames, dtype="<f4").tobytes())
    with open(path.with_name(path.name + ".manifest"), "w", encoding="utf-8") as fh:
        for c in sorted(manifest.class_vocabulary):
            fh.write(f"{c}\t{manifest.class_vocabulary[c]}\t{manifest.split_assignment[c]}\n")


def load_embedding_file(path: str | Path) -> DatasetManifest:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    (version, count) = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    offset = 10
    records: list[VideoRecord] = []
    grid_shape: tuple[int, int, int] | None = None
    for i in range(count):
        if offset + 12 > len(blob):
            raise FormatError(f"truncated header for record {i} at offset {offset}")
        class_id, f, rows, cols, dim = struct.unpack_from("<IHHHH", blob, offset)
        offset += 12
        n = f * rows * cols * dim
        end = offset + 4 * n
        if end > len(blob):
            raise FormatError(f"truncated payload for record {i} at offset {offset}")
        frames = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(f, rows, cols, dim)
        offset = end
        if grid_shape is None:
            grid_shape = (rows, cols, dim)
        elif (rows, cols, dim) != grid_shape:
            raise FormatError(
                f"grid shape mismatch in record {i}: {(rows, cols, dim)} vs {grid_shape}"
            )
        records.append(VideoRecord(frames=frames.copy(), class_id=class_id, split=""))
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")

    sidecar = path.with_name(path.name + ".manifest")
    if not sidecar.exists():
        raise FormatError(f"missing manifest sidecar {sidecar}")
    vocabulary: dict[int, str] = {}
    split_assignment: dict[int, str] = {}
    for line in sidecar.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        cid, name, split = line.split("\t")
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r} in sidecar")
        vocabulary[int(cid)] = name
        split_assignment[int(cid)] = split

    records = [
        VideoRecord(frames=r.frames, class_id=r.class_id, split=split_assignment[r.class_id])
        for r in records
    ]
    manifest = DatasetManifest(
        records=tuple(records),
        class_vocabulary=vocabulary,
        split_assignment=split_assignment,
    )
    manifest.validate()
    return manifest
