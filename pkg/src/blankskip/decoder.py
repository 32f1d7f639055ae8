"""Frame-synchronous CTC prefix beam search with blank-threshold frame skipping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ctc import BLANK, PosteriorGrid

NEG_INF = -math.inf


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@dataclass(frozen=True)
class DecodeOptions:
    beam_width: int = 8
    tau_decode: float = 1.0
    nbest: int = 1
    # "blank": a skipped frame emits blank with probability 1; "noop": it is ignored
    skip_update: str = "blank"

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 1 <= self.nbest <= self.beam_width:
            raise ValueError("nbest must lie in [1, beam_width]")
        if not 0.0 < self.tau_decode <= 1.0:
            raise ValueError("tau_decode must lie in (0, 1]")
        if self.skip_update not in ("blank", "noop"):
            raise ValueError(f"unknown skip_update {self.skip_update!r}")


@dataclass
class Hypothesis:
    prefix: tuple[int, ...]
    log_pb: float
    log_pnb: float

    @property
    def log_prob(self) -> float:
        return _lae(self.log_pb, self.log_pnb)


def _rank(beam: dict) -> list:
    # best first; ties broken by lexicographic token order
    return sorted(beam.items(), key=lambda kv: (-_lae(*kv[1]), kv[0]))


def _search(lp: np.ndarray, opts: DecodeOptions, frame_skipping: bool) -> dict:
    n_cls = lp.shape[1]
    if frame_skipping:
        skip = np.exp(lp[:, BLANK]) > opts.tau_decode
    else:
        skip = np.zeros(lp.shape[0], dtype=bool)
    beam: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(lp.shape[0]):
        if skip[t]:
            if opts.skip_update == "blank":
                beam = {p: (_lae(pb, pnb), NEG_INF) for p, (pb, pnb) in beam.items()}
            continue
        row = lp[t].tolist()
        nxt: dict[tuple[int, ...], list[float]] = {}
        for prefix, (pb, pnb) in beam.items():
            tot = _lae(pb, pnb)
            e = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            e[0] = _lae(e[0], tot + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                e[1] = _lae(e[1], pnb + row[last])
            for k in range(1, n_cls):
                # a repeated token only extends through a blank-ending path
                src = pb if k == last else tot
                if src == NEG_INF or row[k] == NEG_INF:
                    continue
                e2 = nxt.setdefault(prefix + (k,), [NEG_INF, NEG_INF])
                e2[1] = _lae(e2[1], src + row[k])
        beam = {p: (v[0], v[1]) for p, v in _rank(nxt)[: opts.beam_width]}
    return beam


def _as_log_probs(grid) -> np.ndarray:
    lp = grid.log_probs if isinstance(grid, PosteriorGrid) else np.asarray(grid, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] == 0:
        raise ValueError("prefix_beam_search: empty grid")
    return lp


def prefix_beam_search(grid, opts: DecodeOptions = DecodeOptions(),
                       frame_skipping: bool = True) -> list[tuple[tuple[int, ...], float]]:
    """Ranked ``(labels, log prob)`` pairs, best first, at most ``opts.nbest`` long.

    With ``frame_skipping`` on, frames whose blank probability is strictly
    above ``opts.tau_decode`` get no token expansion.
    """
    beam = _search(_as_log_probs(grid), opts, frame_skipping)
    return [(p, _lae(*v)) for p, v in _rank(beam)[: opts.nbest]]


def beam_hypotheses(grid, opts: DecodeOptions = DecodeOptions(),
                    frame_skipping: bool = True) -> list[Hypothesis]:
    """The whole final beam, ranked."""
    beam = _search(_as_log_probs(grid), opts, frame_skipping)
    return [Hypothesis(p, pb, pnb) for p, (pb, pnb) in _rank(beam)]


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> tuple[int, int, int]:
    """Levenshtein alignment counts ``(substitutions, insertions, deletions)``."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cost[i][j] = (errors, subs, ins, dels) aligning ref[:i] with hyp[:j]
    cost = [[(0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, 0, 0, i)
    for j in range(1, m + 1):
        cost[0][j] = (j, 0, j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, s, ins, d = cost[i - 1][j - 1]
            best = (e, s, ins, d) if ref[i - 1] == hyp[j - 1] else (e + 1, s + 1, ins, d)
            e, s, ins, d = cost[i][j - 1]
            best = min(best, (e + 1, s, ins + 1, d))
            e, s, ins, d = cost[i - 1][j]
            best = min(best, (e + 1, s, ins, d + 1))
            cost[i][j] = best
    _, s, ins, d = cost[n][m]
    return s, ins, d


def token_error_rate(ref: Sequence[int], hyp: Sequence[int]) -> float:
    return sum(edit_distance(ref, hyp)) / max(1, len(ref))


def corpus_ter(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """Total edit operations over total reference tokens."""
    errs = sum(sum(edit_distance(r, h)) for r, h in zip(refs, hyps))
    return errs / max(1, sum(len(r) for r in refs))
