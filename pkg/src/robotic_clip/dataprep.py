"""Corpus preparation: prompt parsing, object masks, RGBA frames, and the JSONL manifest.

Corpus layout::

    <root>/<dataset>/<video_id>/prompt.txt
    <root>/<dataset>/<video_id>/frames/000000.png ...

Masks are written beside the manifest as ``masks/<dataset>/<video_id>/%06d.png``
(single channel, values 0 or 255); the corpus is only read.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .errors import NoRecords, SegmenterFailure, ShapeMismatch, TaggerFailure, EmptyPrompt
from .jsonfmt import dumps_sig
from .text import PosTagger, PromptAnnotation, Tokenizer, extract_queries

log = logging.getLogger(__name__)

FLAG_DEGRADED = "degraded"
FLAG_EMPTY_MASK = "empty_mask"


class Segmenter(Protocol):
    name: str
    version: str

    def segment(self, frame: np.ndarray, query: str) -> np.ndarray:
        """Binary ``(H, W)`` mask of ``query`` in the ``(H, W, 3)`` frame."""
        ...


class FullImageSegmenter:
    name = "stub-full"
    version = "1"

    def segment(self, frame, query):
        return np.ones(frame.shape[:2], dtype=bool)

    def describe(self) -> dict:
        return {"name": self.name, "version": self.version}


class CenteredBoxSegmenter:
    """Axis-aligned box covering ``fraction`` of each side.

    The box is centred on the image unless ``centers`` maps the query to a
    relative ``(row, col)`` centre in ``[0, 1]``.
    """

    name = "stub-box"
    version = "1"

    def __init__(self, fraction: float = 0.5, centers: dict[str, tuple[float, float]] | None = None):
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        self.fraction = fraction
        self.centers = dict(centers or {})

    def segment(self, frame, query):
        H, W = frame.shape[:2]
        cy, cx = self.centers.get(query, (0.5, 0.5))
        bh, bw = max(1, round(H * self.fraction)), max(1, round(W * self.fraction))
        top = min(max(round(cy * H - bh / 2), 0), H - bh)
        left = min(max(round(cx * W - bw / 2), 0), W - bw)
        mask = np.zeros((H, W), dtype=bool)
        mask[top : top + bh, left : left + bw] = True
        return mask

    def describe(self) -> dict:
        return {"name": self.name, "version": self.version, "fraction": self.fraction,
                "centers": {k: list(v) for k, v in sorted(self.centers.items())}}


SEGMENTERS: dict[str, Callable[[], Segmenter]] = {
    "stub-full": FullImageSegmenter,
    "stub-box": CenteredBoxSegmenter,
}


def register_segmenter(name: str, factory: Callable[[], Segmenter]) -> None:
    """Plug in an external segmenter (e.g. a detector + SAM wrapper) under ``name``."""
    SEGMENTERS[name] = factory


def make_segmenter(kind: str) -> Segmenter:
    if kind not in SEGMENTERS:
        if kind == "external":
            raise SegmenterFailure(
                "no external segmenter registered; call robotic_clip.dataprep.register_segmenter('external', ...)"
            )
        raise ValueError(f"unknown segmenter {kind!r}")
    return SEGMENTERS[kind]()


def mask_union(masks: Sequence[np.ndarray], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= m.astype(bool)
    return out


def generate_alpha_mask(frame: np.ndarray, objects: Sequence[str], segmenter: Segmenter) -> np.ndarray:
    """Pixelwise union of the segmenter's masks for every object; all zeros when ``objects`` is empty."""
    H, W = frame.shape[:2]
    masks = []
    for obj in objects:
        try:
            m = np.asarray(segmenter.segment(frame, obj))
        except Exception as exc:
            raise SegmenterFailure(f"segmenter failed on {obj!r}: {exc}") from exc
        if m.shape != (H, W):
            raise SegmenterFailure(f"segmenter returned {m.shape} mask for {(H, W)} frame")
        masks.append(m)
    return mask_union(masks, (H, W))


def assemble_rgba(frame: np.ndarray, mask: np.ndarray, size: int | None = None) -> np.ndarray:
    """Stack colour (scaled to [0, 1]) and mask into an ``(H, W, 4)`` float32 frame.

    With ``size`` the frame is resampled to ``size x size``: area averaging for
    colour, nearest neighbour for the mask so alpha stays binary.
    """
    frame = np.asarray(frame)
    mask = np.asarray(mask)
    if frame.ndim != 3 or frame.shape[2] != 3 or mask.shape != frame.shape[:2]:
        raise ShapeMismatch(f"frame {frame.shape} and mask {mask.shape} disagree")
    if size is not None and frame.shape[:2] != (size, size):
        rgb = Image.fromarray(_to_uint8(frame), "RGB").resize((size, size), Image.BOX)
        alpha = Image.fromarray(mask.astype(np.uint8) * 255, "L").resize((size, size), Image.NEAREST)
        color = np.asarray(rgb, dtype=np.float32) / 255.0
        a = (np.asarray(alpha, dtype=np.float32) / 255.0)[..., None]
    else:
        color = frame.astype(np.float32) / 255.0 if frame.dtype == np.uint8 else frame.astype(np.float32)
        a = mask.astype(np.float32)[..., None]
    return np.concatenate([color, a], axis=-1)


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    if frame.dtype == np.uint8:
        return frame
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, "L").save(path, format="PNG", optimize=False)


@dataclass
class RawVideoRecord:
    video_id: str
    source_dataset: str
    prompt: str
    frame_paths: list[Path]

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)


@dataclass
class ManifestEntry:
    video_id: str
    source_dataset: str
    prompt: str
    objects: list[str]
    actions: list[str]
    tokens: list[int]
    action_token_mask: list[int]
    frame_dir: str
    mask_dir: str
    num_frames: int
    fingerprint: str
    flags: list[str] = field(default_factory=list)

    @property
    def eligible(self) -> bool:
        return not self.flags and self.num_frames >= 2

    def annotation(self) -> PromptAnnotation:
        return PromptAnnotation(self.prompt, list(self.tokens), list(self.objects), list(self.actions),
                                list(self.action_token_mask))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(**d)


@dataclass
class PrepConfig:
    vocab_size: int = 512
    context_length: int = 16
    workers: int = 1
    seed: int = 0


@dataclass
class CorpusStats:
    videos: dict[str, int]
    action_categories: dict[str, int]
    frames: int
    skipped: int

    @property
    def total_videos(self) -> int:
        return sum(self.videos.values())

    def to_dict(self) -> dict:
        return {
            "datasets": [
                {"dataset": k, "videos": self.videos[k], "action_categories": self.action_categories[k]}
                for k in sorted(self.videos)
            ],
            "total_videos": self.total_videos,
            "total_action_categories": sum(self.action_categories.values()),
            "frames": self.frames,
            "skipped": self.skipped,
        }

    def table(self) -> str:
        rows = [f"{'Dataset':<32}{'#Videos':>10}{'#Action Categories':>20}"]
        for k in sorted(self.videos):
            rows.append(f"{k:<32}{self.videos[k]:>10,}{self.action_categories[k]:>20}")
        rows.append(f"{'Total':<32}{self.total_videos:>10,}{sum(self.action_categories.values()):>20}")
        return "\n".join(rows)


@dataclass
class PrepResult:
    manifest_path: Path
    entries: list[ManifestEntry]
    stats: CorpusStats
    skipped: list[dict]


def discover_corpus(root: str | os.PathLike) -> list[RawVideoRecord]:
    root = Path(root)
    records = []
    if not root.is_dir():
        return records
    for ds in sorted(p for p in root.iterdir() if p.is_dir()):
        for vid in sorted(p for p in ds.iterdir() if p.is_dir()):
            prompt_file = vid / "prompt.txt"
            frames = sorted((vid / "frames").glob("*.png")) if (vid / "frames").is_dir() else []
            if not prompt_file.exists() and not frames:
                continue
            prompt = prompt_file.read_text(encoding="utf-8").strip() if prompt_file.exists() else ""
            records.append(RawVideoRecord(vid.name, ds.name, prompt, frames))
    return records


def preprocessing_fingerprint(cfg: PrepConfig, tagger: PosTagger, segmenter: Segmenter, tokenizer: Tokenizer) -> str:
    seg_desc = segmenter.describe() if hasattr(segmenter, "describe") else {
        "name": getattr(segmenter, "name", type(segmenter).__name__), "version": getattr(segmenter, "version", "?")}
    payload = {
        "package": __version__,
        "config": {k: v for k, v in asdict(cfg).items() if k != "workers"},
        "tagger": [getattr(tagger, "name", type(tagger).__name__), getattr(tagger, "version", "?")],
        "segmenter": seg_desc,
        "tokenizer": [tokenizer.name, tokenizer.version, tokenizer.vocab_size, tokenizer.context_length],
        "resample": {"color": "area", "alpha": "nearest"},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _relpath(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p.resolve(), base.resolve())).as_posix()


def process_video(record: RawVideoRecord, tagger: PosTagger, segmenter: Segmenter, tokenizer: Tokenizer,
                  fingerprint: str, manifest_dir: Path) -> ManifestEntry:
    """Annotate one video and write its masks under ``manifest_dir/masks/<dataset>/<video_id>/``.

    The corpus itself is never written to. Tagger errors propagate so the caller can skip the record.
    """
    ann = extract_queries(record.prompt, tagger, tokenizer)
    if not record.frame_paths:
        raise ValueError(f"video {record.video_id} has no frames")
    video_dir = record.frame_paths[0].parent.parent
    mask_dir = Path(manifest_dir) / "masks" / record.source_dataset / record.video_id
    mask_dir.mkdir(parents=True, exist_ok=True)
    flags = set()
    prev = None
    for k, fp in enumerate(record.frame_paths):
        frame = load_rgb(fp)
        try:
            mask = generate_alpha_mask(frame, ann.objects, segmenter)
        except SegmenterFailure as exc:
            log.warning("%s frame %d: %s; reusing previous mask", record.video_id, k, exc)
            flags.add(FLAG_DEGRADED)
            mask = prev if prev is not None and prev.shape == frame.shape[:2] else np.zeros(frame.shape[:2], bool)
        if not mask.any():
            flags.add(FLAG_EMPTY_MASK)
        save_mask(mask_dir / f"{k:06d}.png", mask)
        prev = mask
    return ManifestEntry(
        video_id=record.video_id,
        source_dataset=record.source_dataset,
        prompt=record.prompt,
        objects=ann.objects,
        actions=ann.actions,
        tokens=ann.tokens,
        action_token_mask=ann.action_token_mask,
        frame_dir=_relpath(video_dir / "frames", manifest_dir),
        mask_dir=_relpath(mask_dir, manifest_dir),
        num_frames=record.num_frames,
        fingerprint=fingerprint,
        flags=sorted(flags),
    )


def build_manifest(corpus_root, out_path, tagger: PosTagger, segmenter: Segmenter,
                   config: PrepConfig | None = None) -> PrepResult:
    """Process every video under ``corpus_root`` and write a JSONL manifest to ``out_path``.

    Per-record failures go to the skip report; :class:`NoRecords` is raised
    only when nothing succeeds.
    """
    cfg = config or PrepConfig()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tokenizer = Tokenizer(cfg.vocab_size, cfg.context_length)
    fp = preprocessing_fingerprint(cfg, tagger, segmenter, tokenizer)
    records = discover_corpus(corpus_root)
    if not records:
        raise NoRecords(f"no videos found under {corpus_root}")

    def work(rec):
        try:
            return process_video(rec, tagger, segmenter, tokenizer, fp, out_path.parent), None
        except (TaggerFailure, EmptyPrompt, ValueError, OSError) as exc:
            log.warning("skipping %s/%s: %s", rec.source_dataset, rec.video_id, exc)
            return None, {"video_id": rec.video_id, "source_dataset": rec.source_dataset,
                          "error": type(exc).__name__, "message": str(exc)}

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]

    entries, skipped, seen = [], [], set()
    for entry, err in results:
        if err is not None:
            skipped.append(err)
        elif entry.video_id in seen:
            skipped.append({"video_id": entry.video_id, "source_dataset": entry.source_dataset,
                            "error": "DuplicateVideoId", "message": "video_id already used by another dataset"})
        else:
            seen.add(entry.video_id)
            entries.append(entry)
    if not entries:
        raise NoRecords(f"all {len(records)} records failed preprocessing")
    entries.sort(key=lambda e: e.video_id)
    write_manifest(out_path, entries)

    videos: Counter = Counter()
    actions: dict[str, set] = defaultdict(set)
    for e in entries:
        videos[e.source_dataset] += 1
        actions[e.source_dataset].update(e.actions)
    stats = CorpusStats(
        videos=dict(videos),
        action_categories={k: len(actions[k]) for k in videos},
        frames=sum(e.num_frames for e in entries),
        skipped=len(skipped),
    )
    return PrepResult(out_path, entries, stats, skipped)


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(dumps_sig(e.to_dict()) + "\n")


def load_manifest(path) -> list[ManifestEntry]:
    """Read a manifest; entry directories are resolved against the manifest's own directory."""
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            e = ManifestEntry.from_dict(json.loads(line))
            e.frame_dir = str((base / e.frame_dir).resolve())
            e.mask_dir = str((base / e.mask_dir).resolve())
            entries.append(e)
    return entries


def load_rgba_frame(entry: ManifestEntry, index: int, size: int | None = None) -> np.ndarray:
    frame = load_rgb(Path(entry.frame_dir) / f"{index:06d}.png")
    mask = load_mask(Path(entry.mask_dir) / f"{index:06d}.png")
    return assemble_rgba(frame, mask, size)
