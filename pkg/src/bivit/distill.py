"""Ranking-aware attention distillation and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import TinyViT

RANKING_STAGES = ("pre_softmax", "post_softmax")


def psi(A):
    """Circular first difference over the row (query) axis.

    ``psi(A)[..., n, :] = A[..., n, :] - A[..., n - 1, :]`` with row 0 paired
    against the last row. Works on ``(h, N, N)`` or batched ``(B, h, N, N)``.
    """
    A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-2] < 2:
        raise ValueError("psi needs at least two rows")
    return A - np.roll(A, 1, axis=-2)


def _psi_adjoint(Y: np.ndarray) -> np.ndarray:
    return Y - np.roll(Y, -1, axis=-2)


def _block_ranking(teacher: np.ndarray, student: Tensor) -> Tensor:
    """Frobenius norm of psi(T) - psi(S) per sample, averaged over the batch."""
    if teacher.shape != student.shape:
        raise ValueError(f"attention shapes differ: {teacher.shape} vs {student.shape}")
    if student.ndim not in (3, 4):
        raise ValueError(f"expected (h, N, N) or (B, h, N, N), got {student.shape}")
    diff = psi(teacher) - psi(student.data)
    norms = np.sqrt((diff * diff).sum(axis=(-3, -2, -1)))
    nb = norms.size
    value = norms.mean()

    def bw(g):
        # zero subgradient where the maps already agree
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        unit = diff * inv.reshape(inv.shape + (1, 1, 1))
        return (-g * _psi_adjoint(unit) / nb,)

    return ad.custom_op("ranking_block", value, (student,), bw)


def ranking_loss(teacher_attn, student_attn) -> Tensor:
    """Sum over blocks of ||psi(A_teacher) - psi(A_student)||_F.

    Each list entry is an ``(h, N, N)`` map or a ``(B, h, N, N)`` batch; for
    batches the per-sample norms are averaged. Student entries may be
    tensors, in which case the result is differentiable.
    """
    if len(teacher_attn) != len(student_attn):
        raise ValueError(f"block counts differ: {len(teacher_attn)} vs {len(student_attn)}")
    total = None
    for t, s in zip(teacher_attn, student_attn):
        t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        term = _block_ranking(t, ad.as_tensor(s))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def dist_loss(student_logits: Tensor, teacher_logits, labels, temperature: float = 1.0) -> Tensor:
    """Cross-entropy on labels plus KL(teacher || student) at ``temperature``.

    Both terms are batch means and carry equal weight.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = ad.as_tensor(student_logits)
    t = np.asarray(teacher_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if s.shape != t.shape or s.ndim != 2 or labels.shape != (s.shape[0],):
        raise ValueError(f"shape mismatch: student {s.shape}, teacher {t.shape}, labels {labels.shape}")
    b = s.shape[0]
    logp = _log_softmax(s.data)
    ce = -logp[np.arange(b), labels].mean()
    log_ps = _log_softmax(s.data / temperature)
    log_pt = _log_softmax(t / temperature)
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum(axis=-1).mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        grad += (np.exp(log_ps) - pt) / temperature
        return (g * grad / b,)

    return ad.custom_op("dist_loss", ce + kl, (s,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    logp = _log_softmax(logits.data)

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return (g * grad / b,)

    return ad.custom_op("cross_entropy", -logp[np.arange(b), labels].mean(), (logits,), bw)


@dataclass(frozen=True)
class LossReport:
    l_dist: float
    l_ranking: float
    total: float
    lam: float


def total_loss(l_dist, l_ranking, lam: float = 10.0) -> tuple[Tensor, LossReport]:
    """``l_dist + lam * l_ranking`` with its scalar decomposition."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    l_dist, l_ranking = ad.as_tensor(l_dist), ad.as_tensor(l_ranking)
    total = l_dist + l_ranking * float(lam)
    report = LossReport(l_dist.item(), l_ranking.item(), total.item(), float(lam))
    return total, report


class TeacherBundle:
    """A frozen real-valued model plus its cached outputs on a fixed dataset."""

    def __init__(self, model: TinyViT, stage: str = "pre_softmax"):
        if not model.precision.is_full:
            raise ValueError("teacher must be real-valued")
        if stage not in RANKING_STAGES:
            raise ValueError(f"stage must be one of {RANKING_STAGES}")
        model.freeze()
        self.model = model
        self.stage = stage
        self.logits = None
        self.maps = None

    def precompute(self, images: np.ndarray, batch_size: int = 256) -> None:
        logits, maps = [], []
        for i in range(0, len(images), batch_size):
            out, recs = self.model(images[i : i + batch_size])
            logits.append(out.data)
            maps.append(np.stack([self._pick(r) for r in recs], axis=1))
        self.logits = np.concatenate(logits)
        self.maps = np.concatenate(maps)  # (n, L, h, T, T)

    def _pick(self, rec):
        return (rec.scores if self.stage == "pre_softmax" else rec.attn).data

    def lookup(self, idx: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if self.logits is None:
            raise RuntimeError("call precompute() first")
        maps = self.maps[idx]
        return self.logits[idx], [maps[:, l] for l in range(maps.shape[1])]
