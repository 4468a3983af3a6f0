"""Frame-pair sampling, train/val split, and batch assembly over a manifest."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dataprep import ManifestEntry, load_rgba_frame
from .errors import DuplicateVideoInBatch, IneligibleEntry, TooFewFrames
from .text import PAD_ID


def sample_frame_pair(num_frames: int, rng: np.random.Generator, min_gap: int = 0) -> tuple[int, int]:
    """Draw ``(t1, t2)`` with ``t1 < t2`` uniformly over all admissible pairs."""
    if num_frames < 2:
        raise TooFewFrames(f"need at least 2 frames, got {num_frames}")
    gap = max(1, min_gap)
    if gap >= num_frames:
        raise TooFewFrames(f"min_gap {min_gap} leaves no pair among {num_frames} frames")
    while True:
        a, b = sorted(int(x) for x in rng.choice(num_frames, size=2, replace=False))
        if b - a >= gap:
            return a, b


def split(entries: Sequence[ManifestEntry] | Sequence[str], ratios=(0.9, 0.1), salt: str = "") -> tuple[list[str], list[str]]:
    """Assign each video to train or val by a salted hash of its id.

    Assignment of a given id never depends on which other ids are present.
    """
    if len(ratios) != 2 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be two non-negative numbers summing to 1, got {ratios}")
    train, val = [], []
    for e in entries:
        vid = e if isinstance(e, str) else e.video_id
        h = hashlib.sha256(f"{salt}:{vid}".encode()).digest()
        u = int.from_bytes(h[:8], "big") / 2**64
        (train if u < ratios[0] else val).append(vid)
    return train, val


@dataclass
class BatchConfig:
    image_size: int = 32
    context_length: int = 16
    min_gap: int = 0


@dataclass
class Batch:
    video_ids: list[str]
    t1: np.ndarray
    t2: np.ndarray
    images1: np.ndarray
    images2: np.ndarray
    tokens: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.video_ids)


class FrameStore:
    """Memoizes RGBA frames at encoder resolution; read-only over the corpus."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self._cache: dict[tuple[str, str, int], np.ndarray] = {}

    def get(self, entry: ManifestEntry, index: int) -> np.ndarray:
        key = (entry.frame_dir, entry.mask_dir, index)
        if key not in self._cache:
            self._cache[key] = load_rgba_frame(entry, index, self.image_size)
        return self._cache[key]


def make_batch(entries: Sequence[ManifestEntry], indices: Sequence[int], rng: np.random.Generator,
               config: BatchConfig, store: FrameStore | None = None) -> Batch:
    store = store or FrameStore(config.image_size)
    chosen = [entries[i] for i in indices]
    ids = [e.video_id for e in chosen]
    if len(set(ids)) != len(ids):
        raise DuplicateVideoInBatch(f"batch repeats a video: {ids}")
    for e in chosen:
        if not e.eligible:
            raise IneligibleEntry(f"{e.video_id} is flagged {e.flags} or too short")
    L = config.context_length
    B = len(chosen)
    tokens = np.full((B, L), PAD_ID, dtype=np.int64)
    masks = np.zeros((B, L), dtype=np.float32)
    t1 = np.zeros(B, dtype=np.int64)
    t2 = np.zeros(B, dtype=np.int64)
    im1, im2 = [], []
    for b, e in enumerate(chosen):
        if len(e.tokens) > L:
            raise ValueError(f"{e.video_id}: {len(e.tokens)} tokens exceed context length {L}")
        tokens[b, : len(e.tokens)] = e.tokens
        masks[b, : len(e.action_token_mask)] = e.action_token_mask
        a, c = sample_frame_pair(e.num_frames, rng, config.min_gap)
        assert a < c
        t1[b], t2[b] = a, c
        im1.append(store.get(e, a))
        im2.append(store.get(e, c))
    return Batch(ids, t1, t2, np.stack(im1), np.stack(im2), tokens, masks)


def batch_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 2**31 - 1]).permutation(n)


def iterate_epoch(entries: Sequence[ManifestEntry], batch_size: int, seed: int, epoch: int,
                  config: BatchConfig, store: FrameStore | None = None, start: int = 0) -> Iterator[Batch]:
    """Batches of one epoch; each is a pure function of ``(seed, epoch, batch index)``."""
    order = epoch_order(len(entries), seed, epoch)
    for k in range(start, len(entries) // batch_size):
        idx = order[k * batch_size : (k + 1) * batch_size]
        yield make_batch(entries, idx, batch_rng(seed, epoch, k), config, store)
