"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import hashlib
import math
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from robotic_clip.analyze import ablation_compare, curves_for_entries, load_video_frames
from robotic_clip.dataprep import CenteredBoxSegmenter, build_manifest, load_manifest
from robotic_clip.dataset import BatchConfig, FrameStore, make_batch, sample_frame_pair
from robotic_clip.loss import LossConfig, alignment_scores, compute_losses, contrastive_loss, total_loss, triplet_loss
from robotic_clip.model import ModelConfig, RoboticClip, get_profile, inject_action
from robotic_clip.synthetic import make_corpus
from robotic_clip.text import RuleTagger, Tokenizer, extract_queries
from robotic_clip.train import TrainConfig, forward_batch, model_from_checkpoint, run_finetune, verify_freeze

RESULTS: list[str] = []

# synthetic experiment setup shared by criteria 6-8
CORPUS_VIDEOS, HELD_OUT = 64, 16
ABLATION_SEEDS = (0, 1, 2)
EXPERIMENT = TrainConfig(seed=0, epochs=1000, max_steps=200, batch_size=16, lr=3e-3, log_every=0)


def report(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    RESULTS.append(line)
    print(line)


def f64(x):
    return torch.tensor(x, dtype=torch.float64)


# 1 --------------------------------------------------------------------------------------


def check_loss_identities():
    start = time.perf_counter()
    checks = {}
    s1 = alignment_scores(f64([[0.4]]), 0.07)
    checks["B=1 contrastive = 0"] = contrastive_loss(s1, s1).item() == 0.0
    s4 = alignment_scores(torch.full((4, 4), 0.3, dtype=torch.float64), 0.07)
    checks["uniform B=4 contrastive = 2 ln 4"] = abs(contrastive_loss(s4, s4).item() - 2 * math.log(4)) <= 1e-6
    v = f64([[0.2, -1.0, 0.5], [1.0, 2.0, 3.0]])
    p = f64([[1.0, 0.0, 0.0], [0.0, 1.0, -1.0]])
    checks["v1 = v2 gives margin"] = abs(triplet_loss(v, v.clone(), p, 0.2).item() - 0.2) <= 1e-12
    v1 = p + f64([[1.0, 1.0, 0.0], [0.0, 2.0, 0.0]])  # distances sqrt(2) and 2
    v2 = p + f64([[0.5, 0.0, 0.0], [0.0, 0.0, 1.5]])  # distances 0.5 and 1.5: both satisfy d2 + 0.2 <= d1
    checks["satisfied ordering gives 0"] = triplet_loss(v1, v2, p, 0.2).item() == 0.0
    rep = compute_losses(v1, v, p, LossConfig())
    hand = 0.1 * rep.contrastive.item() + rep.triplet.item()
    checks["total = 0.1 L_con + L_tri"] = (
        abs(rep.total.item() - hand) <= 1e-9 and abs(total_loss(2.0, 0.5, 0.1) - 0.7) <= 1e-9
    )
    elapsed = time.perf_counter() - start
    passed = all(checks.values()) and elapsed < 1.0
    failed = [k for k, ok in checks.items() if not ok]
    return passed, f"{len(checks) - len(failed)}/{len(checks)} identities hold, {elapsed * 1e3:.1f} ms" + (
        f"; failed: {failed}" if failed else "")


# 2 --------------------------------------------------------------------------------------


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _tensor_rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


def _hinge_gaps(v1, v2, p, margin=0.2):
    return ((v2 - p).norm(dim=-1) - (v1 - p).norm(dim=-1) + margin).detach()


GRAD_CFG = ModelConfig(image_size=16, patch_size=8, embed_dim=8, vision_width=8, vision_layers=2, vision_heads=2,
                       text_layers=2, text_heads=2, context_length=8, adapter_width=8, adapter_layers=2,
                       adapter_heads=2)


def check_gradients(instances: int = 20, coords: int = 8, directions: int = 3, h: float = 1e-6, min_gap: float = 0.05):
    start = time.perf_counter()
    cfg = LossConfig()
    worst_inputs, worst_params, done, tries = 0.0, 0.0, 0, 0
    tok = Tokenizer(context_length=GRAD_CFG.context_length)
    ann = extract_queries("move red square to bowl", tokenizer=tok)
    tokens = torch.zeros(3, GRAD_CFG.context_length, dtype=torch.long)
    mask = torch.zeros(3, GRAD_CFG.context_length, dtype=torch.float64)
    tokens[:, : len(ann.tokens)] = torch.tensor(ann.tokens)
    mask[:, : len(ann.tokens)] = torch.tensor(ann.action_token_mask, dtype=torch.float64)
    while done < instances:
        tries += 1
        g = torch.Generator().manual_seed(tries)
        rng = np.random.default_rng(tries)

        # gradient w.r.t. the embeddings
        v1, v2, p = (torch.randn(3, 8, generator=g, dtype=torch.float64) for _ in range(3))
        v2 = v1 + 0.5 * v2  # keeps both sides of the hinge in play
        if _hinge_gaps(v1, v2, p).abs().min() < min_gap:
            continue
        xs = [t.clone().requires_grad_() for t in (v1, v2, p)]
        compute_losses(*xs, cfg).total.backward()
        for k, x in enumerate(xs):
            numeric = torch.zeros_like(x)
            for i in range(3):
                for j in range(8):
                    plus = [t.detach().clone() for t in xs]
                    minus = [t.detach().clone() for t in xs]
                    plus[k][i, j] += h
                    minus[k][i, j] -= h
                    numeric[i, j] = (compute_losses(*plus, cfg).total - compute_losses(*minus, cfg).total) / (2 * h)
            # error over the whole gradient: single near-zero coordinates are dominated by rounding
            worst_inputs = max(worst_inputs, _tensor_rel_err(x.grad, numeric))

        # gradient w.r.t. adapter parameters
        model = RoboticClip(GRAD_CFG, adapter_seed=tries).double()
        im1 = torch.rand(3, 16, 16, 4, generator=g, dtype=torch.float64)
        im2 = torch.rand(3, 16, 16, 4, generator=g, dtype=torch.float64)
        params = model.trainable_parameters()

        def loss_value():
            with torch.no_grad():
                return compute_losses(*model(im1, im2, tokens, mask), cfg).total.item()

        out = model(im1, im2, tokens, mask)
        if _hinge_gaps(*out).abs().min() < min_gap:
            continue
        model.zero_grad()
        compute_losses(*out, cfg).total.backward()
        grads = [prm.grad.detach().clone() for prm in params]
        flat = torch.cat([gr.flatten() for gr in grads])
        probes = [torch.from_numpy(rng.standard_normal(flat.numel())) for _ in range(directions)]
        for idx in rng.choice(flat.numel(), coords, replace=False):
            e = torch.zeros(flat.numel(), dtype=torch.float64)
            e[idx] = 1.0
            probes.append(e)
        base = [prm.detach().clone() for prm in params]
        for d in probes:
            d = d / d.norm()
            vals = []
            for sign in (1.0, -1.0):
                offset = 0
                with torch.no_grad():
                    for prm, b in zip(params, base):
                        n = prm.numel()
                        prm.copy_(b + sign * h * d[offset : offset + n].view_as(b))
                        offset += n
                vals.append(loss_value())
            with torch.no_grad():
                for prm, b in zip(params, base):
                    prm.copy_(b)
            num = (vals[0] - vals[1]) / (2 * h)
            ana = float(flat @ d)
            if abs(ana) < 1e-9 and abs(num) < 1e-9:
                continue  # parameter with no influence (e.g. masked positions)
            worst_params = max(worst_params, _rel_err(ana, num))
        done += 1
    elapsed = time.perf_counter() - start
    passed = worst_inputs < 1e-4 and worst_params < 1e-4 and elapsed < 30
    return passed, (f"{done} instances, max rel err embeddings {worst_inputs:.2e}, adapter {worst_params:.2e}, "
                    f"{elapsed:.1f} s")


# 3 --------------------------------------------------------------------------------------


def check_freeze(manifest: Path, workdir: Path):
    start = time.perf_counter()
    cfg = TrainConfig(seed=0, epochs=10, max_steps=10, batch_size=8, lr=1e-3, checkpoint_every=10, log_every=0)
    res = run_finetune(cfg, manifest, workdir / "freeze")
    rep = verify_freeze(res.init_checkpoint, workdir / "freeze" / "checkpoints" / "step_000010.ckpt")
    enc = [k for k in rep.blobs if k.startswith("encoder.")]
    ada = [k for k in rep.blobs if k.startswith("adapter.")]
    n_ada_diff = sum(rep.blobs[k] == "differ" for k in ada)
    elapsed = time.perf_counter() - start
    passed = rep.passed and elapsed < 30
    return passed, (f"{sum(rep.blobs[k] == 'match' for k in enc)}/{len(enc)} encoder blobs identical, "
                    f"{n_ada_diff}/{len(ada)} adapter blobs changed, {elapsed:.1f} s")


# 4 --------------------------------------------------------------------------------------


def check_injection(trials: int = 200):
    g = torch.Generator().manual_seed(0)
    ok = True
    for _ in range(trials):
        B, L, D = (int(x) for x in torch.randint(1, 10, (3,), generator=g))
        e = torch.randn(B, L, D, generator=g)
        m = (torch.rand(B, L, generator=g) > 0.5).float()
        ea = torch.randn(B, D, generator=g)
        out = inject_action(e, m, ea)
        keep = m == 0
        ok &= torch.equal(out[keep], e[keep])
        ok &= torch.equal(out[~keep], ea.unsqueeze(1).expand(B, L, D)[~keep])
    model = RoboticClip(get_profile("toy"))
    ann = extract_queries("move red square to bowl")
    tokens = torch.zeros(16, dtype=torch.long)
    tokens[: len(ann.tokens)] = torch.tensor(ann.tokens)
    with torch.no_grad():
        p0 = model.encode_prompt_with_action(tokens, torch.zeros(16), torch.randn(64, generator=g))
    ok &= torch.equal(p0, model.encode_prompt(tokens))
    return bool(ok), f"{trials} random (e, m, e_action) draws bit-exact; zero mask reproduces the plain prompt encoding"


# 5 --------------------------------------------------------------------------------------


def check_sampler(draws: int = 10_000, n: int = 10):
    rng = np.random.default_rng(12345)
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    counts = dict.fromkeys(pairs, 0)
    ordered = True
    for _ in range(draws):
        t1, t2 = sample_frame_pair(n, rng)
        ordered &= t1 < t2
        counts[(t1, t2)] = counts.get((t1, t2), 0) + 1
    observed = np.array([counts[p] for p in pairs])
    pval = stats.chisquare(observed, np.full(len(pairs), draws / len(pairs))).pvalue
    return bool(ordered and pval > 0.01 and sum(counts.values()) == draws), (
        f"chi-square over {len(pairs)} pairs p = {pval:.3f}, t1 < t2 in every draw: {ordered}")


# 6-8: synthetic experiment ----------------------------------------------------------------------


@dataclass
class RunOutcome:
    seed: int
    triplet: bool
    initial_loss: float
    final_loss: float
    fraction_rising: float
    mean_tau: float
    seconds: float
    metrics: Path
    final_checkpoint: Path


def prepare_corpus(workdir: Path) -> Path:
    make_corpus(workdir / "corpus", num_videos=CORPUS_VIDEOS, seed=0)
    build_manifest(workdir / "corpus", workdir / "prep" / "manifest.jsonl", RuleTagger(), CenteredBoxSegmenter())
    return workdir / "prep" / "manifest.jsonl"


def split_entries(manifest: Path):
    entries = load_manifest(manifest)
    return entries[:-HELD_OUT], entries[-HELD_OUT:]


def mean_loss(model, cfg: TrainConfig, entries, repeats: int = 4) -> float:
    """Mean L_total over fixed evaluation batches of training videos (same batch size as training)."""
    store = FrameStore(model.cfg.image_size)
    B = cfg.batch_size
    values = []
    for r in range(repeats):
        for k in range(len(entries) // B):
            batch = make_batch(entries, range(k * B, (k + 1) * B), np.random.default_rng([99, r, k]), BatchConfig(),
                               store)
            with torch.no_grad():
                values.append(compute_losses(*forward_batch(model, batch), cfg.loss_config()).total.item())
    return float(np.mean(values))


def run_experiment(manifest: Path, out_dir: Path, seed: int, triplet: bool) -> RunOutcome:
    train, held_out = split_entries(manifest)
    cfg = replace(EXPERIMENT, seed=seed, use_triplet=triplet)
    start = time.perf_counter()
    res = run_finetune(cfg, train, out_dir)
    seconds = time.perf_counter() - start
    initial = mean_loss(model_from_checkpoint(res.init_checkpoint), cfg, train)
    trained = model_from_checkpoint(res.final_checkpoint)
    final = mean_loss(trained, cfg, train)
    curves = curves_for_entries(trained, held_out)
    return RunOutcome(seed, triplet, initial, final, float(np.mean([c.last > c.first for c in curves])),
                      float(np.mean([c.kendall_tau for c in curves])), seconds, res.metrics_path,
                      res.final_checkpoint)


class Experiment:
    def __init__(self, workdir: Path):
        self.workdir = workdir
        self.manifest = prepare_corpus(workdir)
        self._runs: dict[tuple[int, bool], RunOutcome] = {}

    def run(self, seed: int, triplet: bool) -> RunOutcome:
        key = (seed, triplet)
        if key not in self._runs:
            self._runs[key] = run_experiment(self.manifest, self.workdir / f"run_s{seed}_{'on' if triplet else 'off'}",
                                             seed, triplet)
        return self._runs[key]


def check_end_to_end(exp: Experiment):
    r = exp.run(0, True)
    ratio = r.final_loss / r.initial_loss
    passed = ratio <= 0.5 and r.fraction_rising >= 0.8 and r.mean_tau > 0 and r.seconds < 300
    return passed, (f"L_total {r.initial_loss:.4f} -> {r.final_loss:.4f} (ratio {ratio:.3f}); held-out last > first in "
                    f"{r.fraction_rising:.0%}; mean tau {r.mean_tau:.3f}; {EXPERIMENT.max_steps} steps in "
                    f"{r.seconds:.1f} s")


def check_ablation(exp: Experiment):
    parts, ok = [], True
    for seed in ABLATION_SEEDS:
        on, off = exp.run(seed, True), exp.run(seed, False)
        ok &= on.mean_tau >= off.mean_tau
        parts.append(f"seed {seed}: {on.mean_tau:.3f} vs {off.mean_tau:.3f}")
    # paired per-video view for the first seed
    _, held_out = split_entries(exp.manifest)
    eval_set = [(e.video_id, load_video_frames(e, 32), e.annotation()) for e in held_out]
    rep = ablation_compare(model_from_checkpoint(exp.run(0, True).final_checkpoint),
                           model_from_checkpoint(exp.run(0, False).final_checkpoint), eval_set)
    return bool(ok), "mean held-out tau with vs without triplet: " + "; ".join(parts) + (
        f" (seed 0 sign test p = {rep.summary['sign_test_p_tau']:.2g})")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def check_determinism(exp: Experiment):
    other = exp.workdir / "repeat"
    manifest2 = prepare_corpus(other)
    same_manifest = _digest(exp.manifest) == _digest(manifest2)
    masks = sorted((exp.manifest.parent / "masks").rglob("*.png"))
    same_masks = all(_digest(m) == _digest(manifest2.parent / m.relative_to(exp.manifest.parent)) for m in masks)
    first = exp.run(0, True)
    second = run_experiment(manifest2, other / "run", 0, True)
    same_metrics = _digest(first.metrics) == _digest(second.metrics)
    same_ckpt = _digest(first.final_checkpoint) == _digest(second.final_checkpoint)
    passed = same_manifest and same_masks and same_metrics and same_ckpt
    return passed, (f"manifest {'identical' if same_manifest else 'differs'}, {len(masks)} masks "
                    f"{'identical' if same_masks else 'differ'}, metrics log {'identical' if same_metrics else 'differs'}, "
                    f"final checkpoint {'identical' if same_ckpt else 'differs'}")


# pytest wiring ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    return Experiment(tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="module")
def small_run_manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("freeze_corpus")
    make_corpus(d / "corpus", num_videos=16, num_frames=4, seed=1)
    build_manifest(d / "corpus", d / "m.jsonl", RuleTagger(), CenteredBoxSegmenter())
    return d / "m.jsonl", d


def _gate(number, title, outcome):
    passed, detail = outcome
    report(number, title, passed, detail)
    assert passed, detail


def test_criterion_1_loss_identities():
    _gate(1, "loss identities", check_loss_identities())


def test_criterion_2_gradient_oracle():
    _gate(2, "gradient oracle", check_gradients())


def test_criterion_3_freeze_contract(small_run_manifest):
    manifest, workdir = small_run_manifest
    _gate(3, "freeze contract", check_freeze(manifest, workdir))


def test_criterion_4_injection_locality():
    _gate(4, "injection locality", check_injection())


def test_criterion_5_sampler():
    _gate(5, "sampler correctness", check_sampler())


def test_criterion_6_synthetic_end_to_end(experiment):
    _gate(6, "synthetic end-to-end", check_end_to_end(experiment))


def test_criterion_7_triplet_ablation(experiment):
    _gate(7, "triplet ablation direction", check_ablation(experiment))


def test_criterion_8_determinism(experiment):
    _gate(8, "determinism", check_determinism(experiment))


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        make_corpus(tmp / "small" / "corpus", num_videos=16, num_frames=4, seed=1)
        build_manifest(tmp / "small" / "corpus", tmp / "small" / "m.jsonl", RuleTagger(), CenteredBoxSegmenter())
        exp = Experiment(tmp / "exp")
        checks = [
            (1, "loss identities", check_loss_identities),
            (2, "gradient oracle", check_gradients),
            (3, "freeze contract", lambda: check_freeze(tmp / "small" / "m.jsonl", tmp / "small")),
            (4, "injection locality", check_injection),
            (5, "sampler correctness", check_sampler),
            (6, "synthetic end-to-end", lambda: check_end_to_end(exp)),
            (7, "triplet ablation direction", lambda: check_ablation(exp)),
            (8, "determinism", lambda: check_determinism(exp)),
        ]
        ok = True
        for number, title, fn in checks:
            passed, detail = fn()
            report(number, title, passed, detail)
            ok &= passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
