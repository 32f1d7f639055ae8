"""CTC loss, alignment collapse, frame-level distillation and output heads.

Index 0 of every distribution is the blank symbol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

BLANK = 0
NEG_INF = -math.inf


class InfeasibleAlignment(ValueError):
    pass


@dataclass
class PosteriorGrid:
    """Per-frame log-distributions over blank plus ``vocab_size`` tokens."""

    log_probs: np.ndarray  # (frames, vocab_size + 1)

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if self.log_probs.ndim != 2 or self.log_probs.shape[0] < 1 or self.log_probs.shape[1] < 2:
            raise ValueError(f"PosteriorGrid: bad shape {self.log_probs.shape}")

    @property
    def frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[1] - 1

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def check(self, tol: float = 1e-9) -> None:
        sums = self.probs().sum(axis=1)
        if np.any(np.abs(sums - 1.0) > tol):
            raise ValueError(f"PosteriorGrid: row sums deviate from 1 by {np.abs(sums - 1).max():.3g}")


def collapse(alignment: Sequence[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in alignment:
        tok = int(tok)
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return tuple(out)


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels`` (repeats need a blank in between)."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _check_feasible(frames: int, labels: Sequence[int], name: str = "") -> None:
    need = min_frames(labels)
    if frames < need:
        where = f" for utterance {name}" if name else ""
        raise InfeasibleAlignment(f"no valid alignment{where}: {frames} frames < {need} required")
    if any(int(t) == BLANK for t in labels):
        raise ValueError("label sequence contains the blank id")


def _lattice(labels_list, s_max):
    b = len(labels_list)
    ext = np.zeros((b, s_max), dtype=np.int64)
    valid = np.zeros((b, s_max), dtype=bool)
    skip = np.zeros((b, s_max), dtype=bool)
    for i, labels in enumerate(labels_list):
        s = 2 * len(labels) + 1
        ext[i, 1:s:2] = labels
        valid[i, :s] = True
        for j in range(3, s, 2):
            skip[i, j] = ext[i, j] != ext[i, j - 2]
    return ext, valid, skip


def _shift(a, k):
    out = np.full_like(a, NEG_INF)
    out[:, k:] = a[:, :-k]
    return out


def _unshift(a, k):
    out = np.full_like(a, NEG_INF)
    out[:, :-k] = a[:, k:]
    return out


def ctc_alpha_beta(log_probs: np.ndarray, lengths: Sequence[int], labels_list: Sequence[Sequence[int]]):
    """Batched log-space CTC recursions.

    Returns ``(nll, grad)`` where ``nll[b] = -log p(labels_b | x_b)`` and
    ``grad[b, t, k]`` is its derivative with respect to ``log_probs[b, t, k]``.
    Both recursions include the emission at ``t``, so state occupancy is
    ``alpha + beta - emit``.
    """
    bsz, t_max, n_cls = log_probs.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    s_max = 2 * max(len(l) for l in labels_list) + 1
    ext, valid, skip = _lattice(labels_list, s_max)
    s_len = np.array([2 * len(l) + 1 for l in labels_list])
    rows = np.arange(bsz)

    emit = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (bsz, t_max, s_max)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((bsz, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        acc = np.logaddexp(prev, _shift(prev, 1))
        acc = np.logaddexp(acc, np.where(skip, _shift(prev, 2), NEG_INF)) if s_max > 2 else acc
        alpha[:, t] = acc + emit[:, t]

    last = lengths - 1
    end_a = alpha[rows, last, s_len - 1]
    end_b = np.where(s_len >= 2, alpha[rows, last, np.maximum(s_len - 2, 0)], NEG_INF)
    log_z = np.logaddexp(end_a, end_b)

    beta = np.full((bsz, t_max, s_max), NEG_INF)
    skip_from = np.zeros_like(skip)
    skip_from[:, :-2] = skip[:, 2:]
    for t in range(t_max - 1, -1, -1):
        if t + 1 < t_max:
            nxt = beta[:, t + 1]
            acc = np.logaddexp(nxt, _unshift(nxt, 1))
            acc = np.logaddexp(acc, np.where(skip_from, _unshift(nxt, 2), NEG_INF)) if s_max > 2 else acc
            cur = acc + emit[:, t]
        else:
            cur = np.full((bsz, s_max), NEG_INF)
        ending = last == t
        if ending.any():
            init = np.full((bsz, s_max), NEG_INF)
            init[rows, s_len - 1] = emit[rows, t, s_len - 1]
            two = s_len >= 2
            init[rows[two], s_len[two] - 2] = emit[rows[two], t, s_len[two] - 2]
            cur = np.where(ending[:, None], init, cur)
        cur = np.where((t > last)[:, None], NEG_INF, cur)
        beta[:, t] = cur

    with np.errstate(invalid="ignore"):
        occ = alpha + beta - emit - log_z[:, None, None]
    occ = np.where(np.isfinite(occ), occ, NEG_INF)
    post = np.exp(occ)
    grad = np.zeros((bsz, t_max, n_cls))
    frames = np.arange(t_max)[None, :]
    for s in range(s_max):
        # (b, t) pairs are distinct within one lattice column
        grad[rows[:, None], frames, ext[:, s][:, None]] -= post[:, :, s]
    return -log_z, grad


class _CTCFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, lengths, labels_list):
        # non-finite inputs propagate as NaN; callers check the loss
        with np.errstate(invalid="ignore"):
            nll, grad = ctc_alpha_beta(log_probs.detach().cpu().numpy(), lengths, labels_list)
        ctx.save_for_backward(torch.from_numpy(grad))
        return torch.from_numpy(nll).to(log_probs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out[:, None, None], None, None


def ctc_loss_batch(log_probs: torch.Tensor, lengths: Sequence[int], labels_list: Sequence[Sequence[int]],
                   ids: Sequence[str] | None = None) -> torch.Tensor:
    """Per-utterance CTC negative log-likelihoods for a padded ``(B, T, V+1)`` batch."""
    labels_list = [tuple(int(t) for t in l) for l in labels_list]
    for i, (n, labels) in enumerate(zip(lengths, labels_list)):
        _check_feasible(int(n), labels, ids[i] if ids is not None else "")
    return _CTCFunction.apply(log_probs, [int(n) for n in lengths], labels_list)


def ctc_forward_loss(log_probs, labels: Sequence[int]) -> torch.Tensor:
    """``-log p(labels | x)`` summed over every alignment that collapses to ``labels``.

    ``log_probs`` is a ``(T, V+1)`` tensor, array or :class:`PosteriorGrid`.
    """
    if isinstance(log_probs, PosteriorGrid):
        log_probs = log_probs.log_probs
    if not isinstance(log_probs, torch.Tensor):
        log_probs = torch.as_tensor(np.asarray(log_probs, dtype=np.float64))
    return ctc_loss_batch(log_probs[None], [log_probs.shape[0]], [labels])[0]


def kl_frame_loss(log_p_in: torch.Tensor, log_p_final: torch.Tensor,
                  frame_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted frame mean of KL(p_in || p_final); the final distribution is a detached target.

    Inputs are log-probabilities with frames on the second-to-last axis. With no
    weights every frame counts equally; zero weights exclude padding.
    """
    if log_p_in.shape != log_p_final.shape:
        raise ValueError(f"kl_frame_loss: shape mismatch {tuple(log_p_in.shape)} vs {tuple(log_p_final.shape)}")
    target = log_p_final.detach()
    per_frame = (log_p_in.exp() * (log_p_in - target)).sum(-1)
    if frame_weights is None:
        return per_frame.mean()
    w = frame_weights.to(per_frame.dtype)
    return (per_frame * w).sum() / w.sum()


class CTCHead(nn.Module):
    """Plain softmax output layer."""

    def __init__(self, model_dim: int, vocab_size: int):
        super().__init__()
        self.proj = nn.Linear(model_dim, vocab_size + 1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.log_softmax(self.proj(h), dim=-1)


class FactorizedHead(nn.Module):
    """Blank gate times a non-blank softmax.

    ``p(blank) = sigmoid(v.h + b)`` and the remaining mass ``1 - p(blank)`` is
    spread by ``softmax(W_nb h + b_nb)``; rows sum to one by construction.
    """

    def __init__(self, model_dim: int, vocab_size: int):
        super().__init__()
        self.blank = nn.Linear(model_dim, 1)
        self.nonblank = nn.Linear(model_dim, vocab_size)

    def blank_logit(self, h: torch.Tensor) -> torch.Tensor:
        return self.blank(h)[..., 0]

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        z = self.blank_logit(h)
        log_nb = torch.log_softmax(self.nonblank(h), dim=-1)
        return torch.cat([F.logsigmoid(z)[..., None], F.logsigmoid(-z)[..., None] + log_nb], dim=-1)


def factorized_apply(head: FactorizedHead, h_t: torch.Tensor) -> torch.Tensor:
    """Probability row ``concat(p_b, (1 - p_b) * softmax(W_nb h))`` for one frame."""
    p_b = torch.sigmoid(head.blank_logit(h_t))
    p_nb = (1 - p_b)[..., None] * torch.softmax(head.nonblank(h_t), dim=-1)
    return torch.cat([p_b[..., None], p_nb], dim=-1)


def blank_posteriors(grid) -> np.ndarray:
    lp = grid.log_probs if isinstance(grid, PosteriorGrid) else np.asarray(grid)
    return np.exp(lp[:, BLANK])


def greedy_decode(grid) -> tuple[int, ...]:
    lp = grid.log_probs if isinstance(grid, PosteriorGrid) else np.asarray(grid)
    return collapse(np.argmax(lp, axis=-1))
