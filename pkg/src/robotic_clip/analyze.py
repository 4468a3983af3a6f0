"""Text-frame similarity curves, triplet ablation comparison, and feature export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from .dataprep import ManifestEntry, load_rgba_frame
from .errors import ProfileMismatch
from .jsonfmt import dumps_sig
from .model import RoboticClip, to_tensor
from .text import PromptAnnotation


@dataclass
class SimilarityCurve:
    video_id: str
    prompt: str
    similarities: list[float]
    kendall_tau: float
    degenerate: bool = False

    @property
    def first(self) -> float:
        return self.similarities[0]

    @property
    def last(self) -> float:
        return self.similarities[-1]


def kendall_trend(values: Sequence[float]) -> tuple[float, bool]:
    """Kendall tau between frame index and value; ``(0.0, True)`` when undefined."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2 or np.ptp(values) == 0:
        return 0.0, True
    tau = stats.kendalltau(np.arange(len(values)), values).statistic
    if not np.isfinite(tau):
        return 0.0, True
    return float(tau), False


def _model_dtype(model: RoboticClip) -> torch.dtype:
    return next(model.parameters()).dtype


def prompt_embedding(model: RoboticClip, frames: np.ndarray, annotation: PromptAnnotation,
                     pair: tuple[int, int] = (0, -1)) -> torch.Tensor:
    """Prompt embedding with the action slot filled from the frame pair ``pair`` (default first, last)."""
    dtype = _model_dtype(model)
    with torch.no_grad():
        f = to_tensor(frames, dtype)
        e_action = model.action_embedding(f[pair[0]], f[pair[1]])
        tokens = torch.tensor(annotation.tokens, dtype=torch.long)
        mask = torch.tensor(annotation.action_token_mask, dtype=dtype)
        return model.encode_prompt_with_action(tokens, mask, e_action)


def similarity_curve(model: RoboticClip, frames: np.ndarray, annotation: PromptAnnotation,
                     video_id: str = "", pair: tuple[int, int] = (0, -1)) -> SimilarityCurve:
    """Cosine similarity between the action-injected prompt and every frame, with its Kendall trend."""
    p = prompt_embedding(model, frames, annotation, pair).double().numpy()
    v = model.encode_image(to_tensor(frames, _model_dtype(model))).double().numpy()
    sims = v @ p / (np.linalg.norm(v, axis=1) * np.linalg.norm(p))
    tau, degenerate = kendall_trend(sims)
    return SimilarityCurve(video_id, annotation.prompt, sims.tolist(), tau, degenerate)


def load_video_frames(entry: ManifestEntry, image_size: int) -> np.ndarray:
    return np.stack([load_rgba_frame(entry, t, image_size) for t in range(entry.num_frames)])


def curves_for_entries(model: RoboticClip, entries: Sequence[ManifestEntry],
                       pair: tuple[int, int] = (0, -1)) -> list[SimilarityCurve]:
    out = []
    for e in entries:
        frames = load_video_frames(e, model.cfg.image_size)
        out.append(similarity_curve(model, frames, e.annotation(), e.video_id, pair))
    return out


def write_curves_csv(path, curves: Sequence[SimilarityCurve]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["video_id", "frame_index", "similarity"])
        for c in curves:
            for t, s in enumerate(c.similarities):
                w.writerow([c.video_id, t, f"{s:.6g}"])


@dataclass
class AblationReport:
    video_ids: list[str]
    tau_with: list[float]
    tau_without: list[float]
    final_with: list[float]
    final_without: list[float]
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "video_ids": self.video_ids,
            "tau_with": self.tau_with,
            "tau_without": self.tau_without,
            "final_similarity_with": self.final_with,
            "final_similarity_without": self.final_without,
            **self.summary,
        }

    def to_json(self) -> str:
        return dumps_sig(self.to_dict(), indent=2)


def _sign_test(diffs: np.ndarray) -> float:
    nz = diffs[diffs != 0]
    if len(nz) == 0:
        return 1.0
    return float(stats.binomtest(int((nz > 0).sum()), len(nz), 0.5).pvalue)


def ablation_compare(model_with: RoboticClip, model_without: RoboticClip,
                     eval_set: Sequence[tuple[str, np.ndarray, PromptAnnotation]]) -> AblationReport:
    """Paired per-video comparison of two adapters trained with and without the triplet term."""
    if model_with.cfg != model_without.cfg:
        raise ProfileMismatch("ablation checkpoints use different model configurations")
    if not eval_set:
        raise ValueError("ablation evaluation set is empty")
    ids, tw, to, fw, fo = [], [], [], [], []
    for vid, frames, ann in eval_set:
        a = similarity_curve(model_with, frames, ann, vid)
        b = similarity_curve(model_without, frames, ann, vid)
        ids.append(vid)
        tw.append(a.kendall_tau)
        to.append(b.kendall_tau)
        fw.append(a.last)
        fo.append(b.last)
    d_tau = np.asarray(tw) - np.asarray(to)
    d_fin = np.asarray(fw) - np.asarray(fo)
    summary = {
        "mean_tau_with": float(np.mean(tw)),
        "mean_tau_without": float(np.mean(to)),
        "mean_final_similarity_with": float(np.mean(fw)),
        "mean_final_similarity_without": float(np.mean(fo)),
        "tau_differences": d_tau.tolist(),
        "final_similarity_differences": d_fin.tolist(),
        "mean_tau_difference": float(d_tau.mean()),
        "mean_final_similarity_difference": float(d_fin.mean()),
        "sign_test_p_tau": _sign_test(d_tau),
        "sign_test_p_final_similarity": _sign_test(d_fin),
    }
    return AblationReport(ids, tw, to, fw, fo, summary)


# feature export ----------------------------------------------------------------


def export_features(model: RoboticClip, out_path, images: np.ndarray | None = None,
                    image_names: Sequence[str] | None = None,
                    prompts: Sequence[PromptAnnotation] | None = None) -> Path:
    """Write embeddings as raw row-major little-endian float32 plus a ``.json`` index sidecar.

    Image rows come first, then prompt rows (plain text encoding, no action injection).
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dtype = _model_dtype(model)
    rows, index = [], []
    if images is not None and len(images):
        v = model.encode_image(to_tensor(images, dtype)).double().numpy()
        names = list(image_names) if image_names is not None else [f"image{i}" for i in range(len(v))]
        rows.append(v)
        index += [{"kind": "image", "name": n} for n in names]
    if prompts:
        ctx = model.cfg.context_length
        toks = torch.zeros((len(prompts), ctx), dtype=torch.long)
        for i, a in enumerate(prompts):
            toks[i, : len(a.tokens)] = torch.tensor(a.tokens)
        rows.append(model.encode_prompt(toks).double().numpy())
        index += [{"kind": "prompt", "name": a.prompt} for a in prompts]
    D = model.cfg.embed_dim
    mat = np.concatenate(rows).astype("<f4") if rows else np.zeros((0, D), "<f4")
    out_path.write_bytes(np.ascontiguousarray(mat).tobytes())
    sidecar = {"rows": len(index), "dim": D, "dtype": "float32-le", "order": "row-major", "index": index}
    Path(str(out_path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return out_path


def read_features(path) -> tuple[np.ndarray, list[dict]]:
    meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    mat = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(meta["rows"], meta["dim"])
    return mat.copy(), meta["index"]
