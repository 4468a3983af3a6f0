"""Procedural action videos: a coloured shape slides toward a named target landmark, leaving a trail."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
}
SHAPES = ("square", "circle", "triangle")
TARGETS = ("bowl", "plate", "box", "cup")
DATASET = "synthetic"
TRAIL = (255, 255, 255)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float, fill) -> None:
    if shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    else:
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)


def _draw_target(draw: ImageDraw.ImageDraw, target: str, cx: float, cy: float, r: float) -> None:
    light, dark = (235, 235, 235), (120, 120, 120)
    if target == "bowl":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=light, width=3)
    elif target == "plate":
        draw.ellipse([cx - r, cy - r * 0.5, cx + r, cy + r * 0.5], fill=dark, outline=light, width=2)
    elif target == "box":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], outline=light, width=3)
    else:
        draw.rectangle([cx - r * 0.6, cy - r, cx + r * 0.6, cy + r], fill=dark)


def render_video(rng: np.random.Generator, num_frames: int = 8, size: int = 64,
                 background: tuple[int, int] = (0, 200)):
    """Return ``(prompt, frames)`` for one random video; frames are ``(size, size, 3)`` uint8."""
    color = list(COLORS)[rng.integers(len(COLORS))]
    shape = SHAPES[rng.integers(len(SHAPES))]
    target = TARGETS[rng.integers(len(TARGETS))]
    r = size * 0.14
    margin = size * 0.2
    # each target name owns one corner; the shape starts near the opposite one
    corner = TARGETS.index(target)
    sx, sy = corner % 2, corner // 2
    lo, hi = margin, size - margin
    tx = (lo if sx == 0 else hi) + rng.uniform(-0.04, 0.04) * size
    ty = (lo if sy == 0 else hi) + rng.uniform(-0.04, 0.04) * size
    x0 = (hi if sx == 0 else lo) + rng.uniform(-0.12, 0.12) * size
    y0 = (hi if sy == 0 else lo) + rng.uniform(-0.12, 0.12) * size
    bg = tuple(int(v) for v in rng.integers(background[0], background[1], size=3))
    frames = []
    for t in range(num_frames):
        a = t / (num_frames - 1)
        cx, cy = (1 - a) * x0 + a * tx, (1 - a) * y0 + a * ty
        im = Image.new("RGB", (size, size), bg)
        d = ImageDraw.Draw(im)
        _draw_target(d, target, tx, ty, size * 0.16)
        # drag trail: the visible change accumulates with progress
        d.line([(x0, y0), (cx, cy)], fill=TRAIL, width=max(1, round(r)))
        _draw_shape(d, shape, cx, cy, r, COLORS[color])
        frames.append(np.asarray(im))
    return f"move {color} {shape} to {target}", frames


def make_corpus(root, num_videos: int = 64, num_frames: int = 8, size: int = 64, seed: int = 0,
                background: tuple[int, int] = (0, 200)) -> Path:
    """Write ``num_videos`` videos under ``root/synthetic/`` in the corpus layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(num_videos):
        prompt, frames = render_video(rng, num_frames, size, background)
        vdir = root / DATASET / f"vid{i:04d}"
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        (vdir / "prompt.txt").write_text(prompt + "\n", encoding="utf-8")
        for t, fr in enumerate(frames):
            Image.fromarray(fr).save(vdir / "frames" / f"{t:06d}.png", format="PNG", optimize=False)
    return root
