"""Frame/prompt alignment losses.

Contrastive term over cosine correlations of (frame, prompt) pairs, a triplet
hinge that orders the later frame closer to the prompt than the earlier one,
and their weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ZeroNormEmbedding
from .jsonfmt import dumps_sig


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    margin: float = 0.2
    lam: float = 0.1
    use_contrastive: bool = True
    use_triplet: bool = True
    symmetric_infonce: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")


@dataclass
class LossReport:
    F1: torch.Tensor
    F2: torch.Tensor
    S1: torch.Tensor
    S2: torch.Tensor
    contrastive: torch.Tensor
    triplet: torch.Tensor
    total: torch.Tensor
    extra: dict = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {
            "L_contrastive": float(self.contrastive.detach()),
            "L_triplet": float(self.triplet.detach()),
            "L_total": float(self.total.detach()),
        }

    def to_dict(self) -> dict:
        d = self.scalars()
        d.update(
            F1=self.F1.detach().tolist(),
            F2=self.F2.detach().tolist(),
            S1=self.S1.detach().tolist(),
            S2=self.S2.detach().tolist(),
        )
        return d

    def to_json(self) -> str:
        return dumps_sig(self.to_dict())


def correlation_matrix(V: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every frame row of ``V`` and prompt row of ``P``."""
    if V.shape[-1] != P.shape[-1]:
        raise ValueError(f"embedding dims differ: {V.shape} vs {P.shape}")
    vn = V.norm(dim=-1, keepdim=True)
    pn = P.norm(dim=-1, keepdim=True)
    if bool((vn == 0).any()) or bool((pn == 0).any()):
        raise ZeroNormEmbedding("zero-norm embedding row in correlation input")
    return (V / vn) @ (P / pn).T


def alignment_scores(F: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax probability of the matching prompt (the diagonal) for each row."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return _log_alignment_scores(F, tau).exp()


def _log_alignment_scores(F: torch.Tensor, tau: float) -> torch.Tensor:
    # logsumexp subtracts the row max internally
    logits = F / tau
    return torch.diagonal(logits) - torch.logsumexp(logits, dim=1)


def contrastive_loss(S1: torch.Tensor, S2: torch.Tensor) -> torch.Tensor:
    B = S1.shape[0]
    return -(torch.log(S1) + torch.log(S2)).sum() / B


def triplet_loss(v1: torch.Tensor, v2: torch.Tensor, p: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinge on ``|v2 - p| - |v1 - p| + margin``; ``v2`` is the later (positive) frame."""
    gap = (v2 - p).norm(dim=-1) - (v1 - p).norm(dim=-1) + margin
    return torch.relu(gap).mean()  # relu: zero subgradient at the kink


def total_loss(l_contrastive, l_triplet, lam: float = 0.1):
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    return lam * l_contrastive + l_triplet


def compute_losses(v1: torch.Tensor, v2: torch.Tensor, p: torch.Tensor, cfg: LossConfig) -> LossReport:
    """Full objective for one batch of embedding triples (rows are videos)."""
    F1 = correlation_matrix(v1, p)
    F2 = correlation_matrix(v2, p)
    # log-space keeps gradients finite when a score underflows
    log_s1 = _log_alignment_scores(F1, cfg.tau)
    log_s2 = _log_alignment_scores(F2, cfg.tau)
    B = v1.shape[0]
    zero = v1.new_zeros(())
    if cfg.use_contrastive:
        l_con = -(log_s1 + log_s2).sum() / B
        if cfg.symmetric_infonce:
            back = _log_alignment_scores(F1.T, cfg.tau) + _log_alignment_scores(F2.T, cfg.tau)
            l_con = 0.5 * (l_con - back.sum() / B)
    else:
        l_con = zero
    l_tri = triplet_loss(v1, v2, p, cfg.margin) if cfg.use_triplet else zero
    return LossReport(
        F1=F1,
        F2=F2,
        S1=log_s1.exp(),
        S2=log_s2.exp(),
        contrastive=l_con,
        triplet=l_tri,
        total=total_loss(l_con, l_tri, cfg.lam),
    )

