"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, missing files, invalid
config or data), 2 internal error. JSON summaries go to stdout with
``--json``; logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import RoboticClipError

SEED_ENV = "ROBOTIC_CLIP_SEED"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("robotic_clip.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def resolve_seed(flag: int | None, config_value: int | None = None, default: int = 0) -> int:
    """Seed precedence: command-line flag, then the environment variable, then the config file."""
    if flag is not None:
        return flag
    env = _env_seed()
    if env is not None:
        return env
    return default if config_value is None else config_value


def _emit(args, summary: dict) -> None:
    from .jsonfmt import dumps_sig

    if args.json:
        sys.stdout.write(dumps_sig(summary) + "\n")
    elif args.command not in ("config", "version"):
        for k, v in summary.items():
            print(f"{k}: {v}", file=sys.stderr)


# subcommands -------------------------------------------------------------------


def cmd_prepare(args) -> dict:
    from .dataprep import PrepConfig, build_manifest, make_segmenter
    from .text import make_tagger

    cfg = PrepConfig(workers=args.workers, seed=resolve_seed(args.seed))
    res = build_manifest(args.corpus, args.out, make_tagger(args.tagger), make_segmenter(args.segmenter), cfg)
    return {
        "manifest": str(res.manifest_path),
        "entries": len(res.entries),
        "eligible": sum(e.eligible for e in res.entries),
        "skipped": res.skipped,
        "stats": res.stats.to_dict(),
        "fingerprint": res.entries[0].fingerprint,
    }


def _train_config(args):
    from .train import load_config

    cfg = load_config(args.config)
    seed = resolve_seed(getattr(args, "seed", None), cfg.seed)
    if seed != cfg.seed:
        from dataclasses import replace

        cfg = replace(cfg, seed=seed)
    return cfg


def cmd_train(args) -> dict:
    from .train import run_finetune

    cfg = _train_config(args)
    res = run_finetune(cfg, args.manifest, args.out, resume_from=args.resume)
    last = res.history[-1] if res.history else {}
    return {
        "out": str(res.out_dir),
        "final_checkpoint": str(res.final_checkpoint),
        "metrics": str(res.metrics_path),
        "steps": len(res.history),
        "seed": cfg.seed,
        "final": {k: last[k] for k in ("L_total", "L_contrastive", "L_triplet") if k in last},
    }


def cmd_config(args) -> dict:
    cfg = _train_config(args)
    if not args.json:
        sys.stdout.write(cfg.dumps())
    return {"config": cfg.to_dict()}


def cmd_analyze(args) -> dict:
    from .analyze import ablation_compare, curves_for_entries, load_video_frames, write_curves_csv
    from .dataprep import load_manifest
    from .train import model_from_checkpoint

    entries = [e for e in load_manifest(args.manifest) if e.eligible]
    if args.limit:
        entries = entries[: args.limit]
    if not entries:
        raise UsageError("manifest has no eligible entries to analyze")
    model = model_from_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = curves_for_entries(model, entries)
    write_curves_csv(out / "curves.csv", curves)
    summary = {
        "videos": len(curves),
        "mean_kendall_tau": float(np.mean([c.kendall_tau for c in curves])),
        "fraction_last_above_first": float(np.mean([c.last > c.first for c in curves])),
        "degenerate": sum(c.degenerate for c in curves),
        "curves": str(out / "curves.csv"),
    }
    if args.without:
        other = model_from_checkpoint(args.without)
        eval_set = [(e.video_id, load_video_frames(e, model.cfg.image_size), e.annotation()) for e in entries]
        report = ablation_compare(model, other, eval_set)
        (out / "ablation.json").write_text(report.to_json() + "\n", encoding="utf-8")
        summary["ablation"] = {k: v for k, v in report.summary.items() if not k.endswith("differences")}
    from .jsonfmt import dumps_sig

    (out / "summary.json").write_text(dumps_sig(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def _load_image_dir(path: Path, size: int) -> tuple[np.ndarray, list[str]]:
    from PIL import Image

    from .dataprep import assemble_rgba

    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise UsageError(f"no .png images in {path}")
    frames = []
    for f in files:
        with Image.open(f) as im:
            arr = np.asarray(im.convert("RGBA"))
        # images without an alpha channel get a full-frame mask
        frames.append(assemble_rgba(arr[..., :3], arr[..., 3] >= 128, size))
    return np.stack(frames), [f.name for f in files]


def cmd_export(args) -> dict:
    from .analyze import export_features
    from .text import Tokenizer, extract_queries, make_tagger
    from .train import model_from_checkpoint

    model = model_from_checkpoint(args.checkpoint)
    images, names = (None, None)
    if args.images:
        images, names = _load_image_dir(Path(args.images), model.cfg.image_size)
    prompts = []
    if args.prompts:
        tok = Tokenizer(model.cfg.vocab_size, model.cfg.context_length)
        tagger = make_tagger("rule")
        lines = Path(args.prompts).read_text(encoding="utf-8").splitlines()
        prompts = [extract_queries(line, tagger, tok) for line in lines if line.strip()]
    if images is None and not prompts:
        raise UsageError("export needs --images and/or --prompts")
    path = export_features(model, args.out, images, names, prompts)
    rows = (0 if images is None else len(images)) + len(prompts)
    return {"features": str(path), "index": str(path) + ".json", "rows": rows, "dim": model.cfg.embed_dim}


def cmd_synth(args) -> dict:
    from .synthetic import make_corpus

    seed = resolve_seed(args.seed)
    root = make_corpus(args.out, args.videos, args.frames, seed=seed)
    return {"corpus": str(root), "videos": args.videos, "frames": args.frames, "seed": seed}


def cmd_version(args) -> dict:
    info = {"version": __version__}
    if args.manifest:
        from .dataprep import load_manifest

        info["fingerprints"] = sorted({e.fingerprint for e in load_manifest(args.manifest)})
    else:
        from .dataprep import PrepConfig, make_segmenter, preprocessing_fingerprint
        from .text import Tokenizer, make_tagger

        cfg = PrepConfig(seed=resolve_seed(None))
        tok = Tokenizer(cfg.vocab_size, cfg.context_length)
        info["fingerprint"] = preprocessing_fingerprint(cfg, make_tagger("rule"), make_segmenter("stub-box"), tok)
    if not args.json:
        print(__version__)
    return info


# parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robotic-clip", description="Action-aware adapter fine-tuning for a frozen dual encoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
        p.set_defaults(func=func)
        return p

    p = add("prepare", cmd_prepare, "annotate a video corpus, write alpha masks and a JSONL manifest")
    p.add_argument("--corpus", required=True, help="corpus root (<dataset>/<video_id>/frames, prompt.txt)")
    p.add_argument("--out", required=True, help="manifest path; masks go to masks/ next to it")
    p.add_argument("--segmenter", default="stub-box", choices=["stub-full", "stub-box", "external"])
    p.add_argument("--tagger", default="rule", choices=["rule", "external"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = add("train", cmd_train, "fine-tune the adapter")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help=f"overrides {SEED_ENV} and the config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = add("config", cmd_config, "print the resolved training config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = add("analyze", cmd_analyze, "per-frame similarity curves and optional triplet ablation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--without", default=None, help="checkpoint trained without the triplet term")
    p.add_argument("--limit", type=int, default=0, help="analyze only the first N eligible videos")

    p = add("export", cmd_export, "write image and prompt embeddings for downstream use")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", default=None, help="directory of .png images (alpha channel used as mask)")
    p.add_argument("--prompts", default=None, help="text file, one prompt per line")
    p.add_argument("--out", required=True, help="raw float32 output file; index goes to <out>.json")

    p = add("synth", cmd_synth, "generate a procedural action-video corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)

    p = add("version", cmd_version, "print the package version and preprocessing fingerprint")
    p.add_argument("--manifest", default=None, help="report the fingerprints recorded in a manifest")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("robotic-clip: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        summary = args.func(args)
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USER
    except (RoboticClipError, FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    _emit(args, summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
