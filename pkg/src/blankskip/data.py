"""Synthetic blank-dominant recognition task.

Each token owns a frozen prototype pattern; an utterance is silence, then
token patterns separated by silence, then silence, with Gaussian noise on
top. Most frames are silence, so a trained CTC model emits mostly blanks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Rng


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 8
    input_dim: int = 16
    prototype_len: tuple[int, int] = (6, 10)
    silence_len: tuple[int, int] = (4, 20)
    tokens_per_utterance: tuple[int, int] = (5, 12)
    noise_std: float = 0.05
    seed: int = 0
    num_train: int = 2000
    num_test: int = 200

    def __post_init__(self):
        for name in ("prototype_len", "silence_len", "tokens_per_utterance"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 1:
                raise ValueError(f"{name}: empty or non-positive range ({lo}, {hi})")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.vocab_size < 1 or self.input_dim < 1:
            raise ValueError("vocab_size and input_dim must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class Utterance:
    id: str
    labels: tuple[int, ...]
    features: np.ndarray  # (T, d)
    # (start, stop) raw-frame span of each token pattern; not serialized
    segments: list[tuple[int, int]] = field(default_factory=list, repr=False, compare=False)


@lru_cache(maxsize=16)
def token_prototypes(vocab_size: int, input_dim: int, max_len: int, seed: int) -> np.ndarray:
    """Frozen ``(V, max_len, d)`` unit-normal patterns, row ``k - 1`` for token ``k``."""
    rng = np.random.default_rng([seed, 0x5EED])
    protos = rng.normal(size=(vocab_size, max_len, input_dim))
    protos.setflags(write=False)
    return protos


def prototypes_for(cfg: TaskConfig) -> np.ndarray:
    return token_prototypes(cfg.vocab_size, cfg.input_dim, cfg.prototype_len[1], cfg.seed)


def stretch(pattern: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample a ``(n, d)`` pattern to ``length`` frames."""
    n = pattern.shape[0]
    if length == n:
        return pattern.copy()
    src = np.linspace(0.0, n - 1, length)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (src - lo)[:, None]
    return (1 - w) * pattern[lo] + w * pattern[hi]


def gen_utterance(rng: Rng, cfg: TaskConfig, utt_id: str = "utt") -> Utterance:
    protos = prototypes_for(cfg)
    n_tok = int(rng.integers(*cfg.tokens_per_utterance))
    labels = tuple(int(k) for k in rng.integers(1, cfg.vocab_size, size=n_tok))
    pieces = [np.zeros((int(rng.integers(*cfg.silence_len)), cfg.input_dim))]
    segments = []
    pos = pieces[0].shape[0]
    for k in labels:
        seg = stretch(protos[k - 1], int(rng.integers(*cfg.prototype_len)))
        segments.append((pos, pos + seg.shape[0]))
        sil = np.zeros((int(rng.integers(*cfg.silence_len)), cfg.input_dim))
        pieces += [seg, sil]
        pos += seg.shape[0] + sil.shape[0]
    clean = np.concatenate(pieces)
    noise = rng.normal(clean.shape, std=cfg.noise_std) if cfg.noise_std > 0 else 0.0
    return Utterance(utt_id, labels, clean + noise, segments)


def gen_dataset(cfg: TaskConfig, split: str = "train", n: int | None = None) -> list[Utterance]:
    """Deterministic split: the stream depends only on ``(cfg.seed, split)``."""
    key = {"train": 1, "test": 2}.get(split)
    if key is None:
        raise ValueError(f"unknown split {split!r}")
    if n is None:
        n = cfg.num_train if split == "train" else cfg.num_test
    rng = Rng(cfg.seed).spawn(key)
    return [gen_utterance(rng, cfg, f"{split}-{i:05d}") for i in range(n)]


def silence_fraction(utts: Iterable[Utterance]) -> float:
    total = speech = 0
    for u in utts:
        total += u.features.shape[0]
        speech += sum(b - a for a, b in u.segments)
    return 1.0 - speech / total


def write_dataset(path, utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            rec = {"id": u.id, "labels": [int(t) for t in u.labels], "features": np.round(np.asarray(u.features), 10).tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.asarray(rec["features"], dtype=np.float64)
                labels = tuple(int(t) for t in rec["labels"])
                utt_id = str(rec["id"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if feats.ndim != 2 or feats.shape[0] < 1:
                raise DatasetFormatError(f"{path}:{lineno}: features must be a non-empty 2-D array")
            out.append(Utterance(utt_id, labels, feats))
    return out


def dataset_path(data: str | Path, split: str = "test") -> Path:
    """Resolve a dataset file, accepting a ``gen-data`` output directory."""
    p = Path(data)
    return p / f"{split}.jsonl" if p.is_dir() else p
