"""Brute-force references, deliberately independent of the package code paths."""

import itertools
import math

import numpy as np


def beta(alignment):
    merged = [k for i, k in enumerate(alignment) if i == 0 or k != alignment[i - 1]]
    return tuple(k for k in merged if k != 0)


def sequence_probs(log_probs):
    """Map every reachable label sequence to its total probability by enumerating all alignments."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, c = lp.shape
    out = {}
    for a in itertools.product(range(c), repeat=t):
        p = math.exp(sum(lp[i, a[i]] for i in range(t)))
        key = beta(a)
        out[key] = out.get(key, 0.0) + p
    return out


def ctc_nll(log_probs, labels):
    lp = np.asarray(log_probs, dtype=np.float64)
    t, c = lp.shape
    total = 0.0
    for a in itertools.product(range(c), repeat=t):
        if beta(a) == tuple(labels):
            total += math.exp(sum(lp[i, a[i]] for i in range(t)))
    return -math.log(total) if total > 0 else math.inf


def skip_mask(blank_probs, tau, window):
    probs = list(blank_probs)
    out = []
    for t in range(len(probs)):
        ok = True
        for u in range(t - window + 1, t + 1):
            p = 1.0 if u < 0 else probs[u]
            ok = ok and p > tau
        out.append(ok)
    return out


def random_log_probs(rng, frames, classes, scale=1.0):
    x = rng.normal(scale=scale, size=(frames, classes))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def spiky_log_probs(rng, frames, classes, peak=0.97):
    """Each frame puts ``peak`` mass on a random class, mostly blank."""
    p = np.full((frames, classes), (1 - peak) / (classes - 1))
    for t in range(frames):
        k = 0 if rng.random() < 0.6 else int(rng.integers(1, classes))
        p[t, k] = peak
    return np.log(p)


def ctc_nll_vectorized(log_probs, labels):
    """Same enumeration as ``ctc_nll`` with every alignment held in one array."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, c = lp.shape
    a = np.stack(np.unravel_index(np.arange(c ** t), (c,) * t), axis=1)
    prev = np.concatenate([np.full((a.shape[0], 1), -1), a[:, :-1]], axis=1)
    keep = (a != 0) & (a != prev)
    lab = np.asarray(labels, dtype=np.int64)
    ok = keep.sum(axis=1) == len(lab)
    if len(lab):
        pos = np.clip(np.cumsum(keep, axis=1) - 1, 0, len(lab) - 1)
        ok &= np.all(~keep | (a == lab[pos]), axis=1)
    if not ok.any():
        return math.inf
    scores = lp[np.arange(t), a[ok]].sum(axis=1)
    m = scores.max()
    return -(m + math.log(np.exp(scores - m).sum()))
