"""Adapter fine-tuning loop with deterministic batches, checkpoints, and resume."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataprep import ManifestEntry, load_manifest
from .dataset import Batch, BatchConfig, FrameStore, batch_rng, epoch_order, make_batch
from .errors import ConfigError, NonFiniteLoss, ProfileMismatch
from .jsonfmt import dumps_sig
from .loss import LossConfig, LossReport, compute_losses
from .model import ModelConfig, RoboticClip, get_profile, to_tensor

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 1
    max_steps: int = 0  # 0 = no cap
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.9
    schedule: str = "cosine"
    tau: float = 0.07
    margin: float = 0.2
    lam: float = 0.1
    use_contrastive: bool = True
    use_triplet: bool = True
    symmetric_infonce: bool = False
    profile: str = "toy"
    model_seed: int = 0
    dtype: str = "float32"
    min_gap: int = 0
    checkpoint_every: int = 0  # 0 = init and final only
    val_ratio: float = 0.0
    split_salt: str = ""
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.use_contrastive and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the contrastive loss is enabled")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.epochs < 0 or self.max_steps < 0 or self.lr < 0:
            raise ConfigError("epochs, max_steps and lr must be non-negative")
        self.loss_config()  # validates tau/margin/lam

    def loss_config(self) -> LossConfig:
        try:
            return LossConfig(self.tau, self.margin, self.lam, self.use_contrastive, self.use_triplet,
                              self.symmetric_infonce)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return get_profile(self.profile, init_seed=self.model_seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, typ):
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), **overrides)


@dataclass
class TrainState:
    config: TrainConfig
    model: RoboticClip
    optimizer: torch.optim.Optimizer
    total_steps: int
    steps_per_epoch: int
    step: int = 0
    loss_ema: float | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    def lr_at(self, step: int) -> float:
        if self.config.schedule == "constant" or self.total_steps <= 0:
            return self.config.lr
        return self.config.lr * 0.5 * (1 + math.cos(math.pi * step / self.total_steps))


def _make_optimizer(cfg: TrainConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                                weight_decay=cfg.weight_decay, foreach=False)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                                 weight_decay=cfg.weight_decay, foreach=False)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, foreach=False)


def plan_steps(cfg: TrainConfig, num_train: int) -> tuple[int, int]:
    spe = num_train // cfg.batch_size
    if cfg.epochs > 0 and spe == 0:
        raise ConfigError(f"{num_train} eligible videos cannot fill a batch of {cfg.batch_size}")
    total = cfg.epochs * spe
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    return total, max(spe, 1)


def init_state(cfg: TrainConfig, num_train: int, model: RoboticClip | None = None) -> TrainState:
    model = model or RoboticClip(cfg.model_config(), adapter_seed=cfg.seed)
    model = model.to(_DTYPES[cfg.dtype])
    total, spe = plan_steps(cfg, num_train)
    opt = _make_optimizer(cfg, model.trainable_parameters())
    return TrainState(cfg, model, opt, total, spe)


def forward_batch(model: RoboticClip, batch: Batch, dtype=torch.float32):
    return model(
        to_tensor(batch.images1, dtype),
        to_tensor(batch.images2, dtype),
        torch.from_numpy(batch.tokens),
        to_tensor(batch.masks, dtype),
    )


def train_step(state: TrainState, batch: Batch) -> LossReport:
    """One optimizer update of the adapter on ``batch``."""
    model = state.model
    model.train()
    lr = state.lr_at(state.step)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    v1, v2, p = forward_batch(model, batch, state.dtype)
    report = compute_losses(v1, v2, p, state.config.loss_config())
    if not torch.isfinite(report.total):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}: {report.scalars()}", batch.video_ids)
    state.optimizer.zero_grad(set_to_none=True)
    if report.total.requires_grad:
        report.total.backward()
    state.optimizer.step()
    for prm in model.trainable_parameters():
        if not torch.isfinite(prm).all():
            raise NonFiniteLoss(f"non-finite adapter parameter after step {state.step}", batch.video_ids)
    total = float(report.total.detach())
    state.loss_ema = total if state.loss_ema is None else 0.9 * state.loss_ema + 0.1 * total
    report.extra["lr"] = lr
    state.step += 1
    return report


def batch_for_step(state: TrainState, entries: Sequence[ManifestEntry], step: int, store: FrameStore) -> Batch:
    cfg = state.config
    epoch, k = divmod(step, state.steps_per_epoch)
    order = epoch_order(len(entries), cfg.seed, epoch)
    idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
    mc = state.model.cfg
    bc = BatchConfig(mc.image_size, mc.context_length, cfg.min_gap)
    return make_batch(entries, idx, batch_rng(cfg.seed, epoch, k), bc, store)


def evaluate_loss(state: TrainState, batch: Batch) -> LossReport:
    with torch.no_grad():
        v1, v2, p = forward_batch(state.model, batch, state.dtype)
        return compute_losses(v1, v2, p, state.config.loss_config())


# checkpoints ---------------------------------------------------------------


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {}
    for name, prm in state.model.encoder.named_parameters():
        tensors[f"encoder.{name}"] = prm
    for name, prm in state.model.adapter.named_parameters():
        tensors[f"adapter.{name}"] = prm
    for idx, st in state.optimizer.state_dict()["state"].items():
        for key, val in st.items():
            tensors[f"optim.{idx}.{key}"] = val if torch.is_tensor(val) else torch.tensor(float(val))
    return tensors


def save_state(state: TrainState, path) -> str:
    groups = state.optimizer.state_dict()["param_groups"]
    meta = {
        "package": __version__,
        "config": state.config.to_dict(),
        "model": state.model.cfg.to_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "steps_per_epoch": state.steps_per_epoch,
        "loss_ema": state.loss_ema,
        "param_groups": groups,
    }
    return save_checkpoint(path, state_tensors(state), meta)


def model_from_checkpoint(ckpt: Checkpoint | str | Path, dtype=torch.float32) -> RoboticClip:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    mcfg = ModelConfig(**ckpt.meta["model"])
    model = RoboticClip(mcfg).to(dtype)
    load_encoder_weights(model, ckpt)
    with torch.no_grad():
        for name, prm in model.adapter.named_parameters():
            prm.copy_(torch.from_numpy(ckpt.array(f"adapter.{name}")))
    return model


def load_encoder_weights(model: RoboticClip, source) -> None:
    """Copy ``encoder.*`` tensors from a checkpoint-format file into the frozen encoders."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    with torch.no_grad():
        for name, prm in model.encoder.named_parameters():
            arr = ckpt.array(f"encoder.{name}")
            if tuple(arr.shape) != tuple(prm.shape):
                raise ProfileMismatch(f"encoder.{name}: {arr.shape} vs {tuple(prm.shape)}")
            prm.copy_(torch.from_numpy(arr))


def resume_state(path, num_train: int | None = None) -> TrainState:
    ckpt = load_checkpoint(path)
    cfg = TrainConfig(**ckpt.meta["config"])
    model = model_from_checkpoint(ckpt, _DTYPES[cfg.dtype])
    opt = _make_optimizer(cfg, model.trainable_parameters())
    sd = {"state": {}, "param_groups": ckpt.meta["param_groups"]}
    for name in ckpt.names():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            t = torch.from_numpy(ckpt.array(name))
            if key != "step":
                t = t.to(_DTYPES[cfg.dtype])
            sd["state"].setdefault(int(idx), {})[key] = t
    opt.load_state_dict(sd)
    state = TrainState(cfg, model, opt, ckpt.meta["total_steps"], ckpt.meta["steps_per_epoch"],
                       step=ckpt.meta["step"], loss_ema=ckpt.meta["loss_ema"])
    if num_train is not None:
        total, spe = plan_steps(cfg, num_train)
        if (total, spe) != (state.total_steps, state.steps_per_epoch):
            raise ProfileMismatch("checkpoint was trained on a different number of videos")
    return state


# full run --------------------------------------------------------------------


@dataclass
class FinetuneResult:
    out_dir: Path
    init_checkpoint: Path
    final_checkpoint: Path
    metrics_path: Path
    history: list[dict]
    train_ids: list[str]
    val_ids: list[str]


def select_training_entries(cfg: TrainConfig, entries: Sequence[ManifestEntry]):
    from .dataset import split

    eligible = [e for e in entries if e.eligible]
    if cfg.val_ratio > 0:
        train_ids, val_ids = split(eligible, (1 - cfg.val_ratio, cfg.val_ratio), cfg.split_salt)
    else:
        train_ids, val_ids = [e.video_id for e in eligible], []
    keep = set(train_ids)
    return [e for e in eligible if e.video_id in keep], train_ids, val_ids


def run_finetune(cfg: TrainConfig, manifest, out_dir, resume_from=None, stop_at: int | None = None) -> FinetuneResult:
    """Train the adapter over ``manifest`` (a path or a list of entries) and write outputs under ``out_dir``.

    Writes ``checkpoints/init.ckpt``, periodic ``checkpoints/step_XXXXXX.ckpt``,
    ``checkpoints/final.ckpt`` (omitted when there are no steps to run),
    ``metrics.jsonl`` and ``config.txt``.
    """
    entries = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    train_entries, train_ids, val_ids = select_training_entries(cfg, entries)
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    metrics_path = out_dir / "metrics.jsonl"
    init_path = ckpt_dir / "init.ckpt"

    if resume_from is not None:
        state = resume_state(resume_from, len(train_entries))
        lines = metrics_path.read_text(encoding="utf-8").splitlines(keepends=True) if metrics_path.exists() else []
        kept = lines[: state.step]
        metrics_path.write_text("".join(kept), encoding="utf-8")
    else:
        if cfg.epochs > 0 and len(train_entries) < cfg.batch_size:
            raise ConfigError(f"{len(train_entries)} eligible videos < batch size {cfg.batch_size}")
        state = init_state(cfg, len(train_entries))
        save_state(state, init_path)
        metrics_path.write_text("", encoding="utf-8")

    store = FrameStore(state.model.cfg.image_size)
    end = state.total_steps if stop_at is None else min(stop_at, state.total_steps)
    history = []
    with open(metrics_path, "a", encoding="utf-8", newline="\n") as mf:
        while state.step < end:
            step = state.step
            batch = batch_for_step(state, train_entries, step, store)
            report = train_step(state, batch)
            rec = {"step": step + 1, "epoch": step // state.steps_per_epoch, "lr": report.extra["lr"],
                   **report.scalars()}
            history.append(rec)
            if cfg.log_every and (step % cfg.log_every == 0):
                log.info("step %d  L_total %.4f  L_con %.4f  L_tri %.4f", step + 1, rec["L_total"],
                         rec["L_contrastive"], rec["L_triplet"])
            mf.write(dumps_sig(rec) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, ckpt_dir / f"step_{state.step:06d}.ckpt")
    if state.total_steps == 0:
        # nothing to train: the init checkpoint is the result
        final_path = init_path
    else:
        final_path = ckpt_dir / "final.ckpt"
        save_state(state, final_path)
    return FinetuneResult(out_dir, init_path, final_path, metrics_path, history, train_ids, val_ids)


# freeze verification -----------------------------------------------------------


@dataclass
class FreezeReport:
    blobs: dict[str, str]
    encoder_unchanged: bool
    adapter_changed: bool

    @property
    def passed(self) -> bool:
        return self.encoder_unchanged and self.adapter_changed

    def to_dict(self) -> dict:
        return {"blobs": self.blobs, "encoder_unchanged": self.encoder_unchanged,
                "adapter_changed": self.adapter_changed, "passed": self.passed}


def verify_freeze(before, after) -> FreezeReport:
    """Byte-compare parameter blobs of two checkpoints from the same profile."""
    a = before if isinstance(before, Checkpoint) else load_checkpoint(before)
    b = after if isinstance(after, Checkpoint) else load_checkpoint(after)
    if a.meta["model"] != b.meta["model"]:
        raise ProfileMismatch("checkpoints come from different model configurations")
    names_a = [n for n in a.names() if not n.startswith("optim.")]
    names_b = [n for n in b.names() if not n.startswith("optim.")]
    if names_a != names_b:
        raise ProfileMismatch("checkpoints hold different parameter sets")
    blobs = {n: "match" if a.raw(n) == b.raw(n) else "differ" for n in names_a}
    enc = all(v == "match" for n, v in blobs.items() if n.startswith("encoder."))
    ada = any(v == "differ" for n, v in blobs.items() if n.startswith("adapter."))
    return FreezeReport(blobs, enc, ada)


def encoder_digest(model: RoboticClip) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, prm in model.encoder.named_parameters():
        h.update(name.encode())
        h.update(prm.detach().cpu().numpy().tobytes())
    return h.hexdigest()
