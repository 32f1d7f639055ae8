"""Skip-ratio, effective depth, timing and spike-alignment measurements."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .ctc import BLANK, PosteriorGrid
from .data import Utterance
from .decoder import DecodeOptions, corpus_ter, prefix_beam_search
from .encoder import EncodeResult, Encoder, compute_skip_mask, subsample


@dataclass
class BenchRow:
    tau: float | None  # None marks the skipping-disabled baseline
    skip_ratio: float
    effective_layers: float
    ter: float
    wall_encoder_s: float
    wall_decode_s: float
    rtf: float
    upper_frames_computed: int
    total_frames: int


BENCH_FIELDS = [f.name for f in fields(BenchRow)]
TIMING_FIELDS = ("wall_encoder_s", "wall_decode_s", "rtf")


def effective_layers(skip_ratio: float, split_layer: int, num_layers: int) -> float:
    """Average depth when a ``skip_ratio`` fraction of frames stops at ``split_layer``."""
    if not 0.0 <= skip_ratio <= 1.0:
        raise ValueError(f"skip_ratio must lie in [0, 1], got {skip_ratio}")
    if not split_layer < num_layers:
        raise ValueError("split_layer must be below num_layers")
    return skip_ratio * split_layer + (1 - skip_ratio) * num_layers


def measured_layers(upper_frames: int, total_frames: int, split_layer: int, num_layers: int) -> float:
    """Average depth from frame counts: every frame runs ``K`` layers, kept ones run ``L - K`` more."""
    return (total_frames * split_layer + upper_frames * (num_layers - split_layer)) / total_frames


def _encode_all(model: Encoder, frames: list[np.ndarray], tau: float | None, batch_size: int):
    out = []
    for i in range(0, len(frames), batch_size):
        out += model.encode_batch(frames[i: i + batch_size], tau)
    return out


def run_bench(model: Encoder, utterances: Sequence[Utterance], tau_list: Sequence[float],
              opts: DecodeOptions = DecodeOptions(), frame_period: float = 0.01,
              repeats: int = 3, batch_size: int = 64) -> list[BenchRow]:
    """Baseline row (no skipping anywhere) followed by one row per ``tau``.

    Utterances are processed in id order. Each timing is the median of
    ``repeats`` passes over the whole set.
    """
    if not utterances:
        raise ValueError("run_bench: empty dataset")
    utts = sorted(utterances, key=lambda u: u.id)
    cfg = model.cfg
    frames = [subsample(u.features, cfg.subsample_stride) for u in utts]
    input_frames = sum(u.features.shape[0] for u in utts)
    refs = [u.labels for u in utts]
    torch.set_num_threads(1)

    rows = []
    for tau in [None, *tau_list]:
        enc_times, dec_times = [], []
        results = hyps = None
        d_opts = DecodeOptions(opts.beam_width, 1.0 if tau is None else tau, opts.nbest, opts.skip_update)
        for _ in range(repeats):
            t0 = time.perf_counter()
            results = _encode_all(model, frames, tau, batch_size)
            enc_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            hyps = [prefix_beam_search(r.p, d_opts, frame_skipping=tau is not None)[0][0] for r in results]
            dec_times.append(time.perf_counter() - t0)
        total = sum(r.frames for r in results)
        upper = sum(r.upper_frames_computed for r in results)
        enc_s, dec_s = statistics.median(enc_times), statistics.median(dec_times)
        rows.append(BenchRow(
            tau=tau,
            skip_ratio=(total - upper) / total,
            effective_layers=measured_layers(upper, total, cfg.split_layer, cfg.num_layers),
            ter=corpus_ter(refs, hyps),
            wall_encoder_s=enc_s,
            wall_decode_s=dec_s,
            rtf=(enc_s + dec_s) / (input_frames * frame_period),
            upper_frames_computed=upper,
            total_frames=total,
        ))
    return rows


def write_report(rows: Sequence[BenchRow], path, frame_period: float = 0.01) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# frame_period_s={frame_period}\n")
        w = csv.writer(fh)
        w.writerow(BENCH_FIELDS)
        for r in rows:
            w.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in BENCH_FIELDS])


def read_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def spikes(grid) -> list[tuple[int, int]]:
    """``(first frame, token)`` of every maximal non-blank argmax run."""
    lp = grid.log_probs if isinstance(grid, PosteriorGrid) else np.asarray(grid)
    best = np.argmax(lp, axis=-1)
    out = []
    prev = None
    for t, k in enumerate(best.tolist()):
        if k != prev and k != BLANK:
            out.append((t, k))
        prev = k
    return out


def match_spikes(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> tuple[list[int], int]:
    """Greedy in-order matching on equal tokens; returns frame offsets and unmatched count."""
    offsets = []
    j = 0
    for t_a, k_a in a:
        for jj in range(j, len(b)):
            if b[jj][1] == k_a:
                offsets.append(abs(t_a - b[jj][0]))
                j = jj + 1
                break
    unmatched = (len(a) - len(offsets)) + (len(b) - len(offsets))
    return offsets, unmatched


def spike_offset(p_in, p) -> tuple[float, int]:
    """Mean absolute frame offset between matched intermediate and final spikes.

    Returns ``(mean offset, unmatched spike count)``; the mean is NaN when
    nothing matches.
    """
    n_in = (p_in.log_probs if isinstance(p_in, PosteriorGrid) else np.asarray(p_in)).shape[0]
    n = (p.log_probs if isinstance(p, PosteriorGrid) else np.asarray(p)).shape[0]
    if n_in != n:
        raise ValueError(f"spike_offset: frame counts differ ({n_in} vs {n})")
    offsets, unmatched = match_spikes(spikes(p_in), spikes(p))
    return (float(np.mean(offsets)) if offsets else math.nan), unmatched


def corpus_spike_offset(model: Encoder, utterances: Sequence[Utterance], batch_size: int = 64) -> tuple[float, int]:
    """Offset pooled over all matched spikes of a set (full encoder)."""
    frames = [subsample(u.features, model.cfg.subsample_stride) for u in sorted(utterances, key=lambda u: u.id)]
    offsets, unmatched = [], 0
    for r in _encode_all(model, frames, None, batch_size):
        o, u = match_spikes(spikes(r.p_in), spikes(r.p))
        offsets += o
        unmatched += u
    return (float(np.mean(offsets)) if offsets else math.nan), unmatched


INSPECT_FIELDS = ["utt_id", "frame", "blank_in", "blank_final", "skipped", "argmax_in", "argmax_final"]


@dataclass
class InspectRecord:
    utt_id: str
    tau: float
    blank_in: list[float]
    blank_final: list[float]
    skipped: list[bool]
    argmax_in: list[int]
    argmax_final: list[int]

    @property
    def frames(self) -> int:
        return len(self.blank_in)

    def rows(self) -> list[list]:
        return [[self.utt_id, t, self.blank_in[t], self.blank_final[t], int(self.skipped[t]),
                 self.argmax_in[t], self.argmax_final[t]] for t in range(self.frames)]


def inspect_dump(model: Encoder, utterance: Utterance, tau: float | None = None) -> InspectRecord:
    """Per-frame blank posteriors, skip decisions and argmax tokens for one utterance.

    ``blank_final`` comes from the final head on the full encoder, so it is
    defined for skipped frames too.
    """
    tau = model.cfg.tau_skip if tau is None else tau
    frames = subsample(utterance.features, model.cfg.subsample_stride)
    full = model.encode_full(frames)
    skip = compute_skip_mask(np.exp(full.p_in.log_probs[:, BLANK]), tau, model.cfg.window_len)
    return InspectRecord(
        utt_id=utterance.id,
        tau=tau,
        blank_in=np.exp(full.p_in.log_probs[:, BLANK]).tolist(),
        blank_final=np.exp(full.p.log_probs[:, BLANK]).tolist(),
        skipped=skip.tolist(),
        argmax_in=np.argmax(full.p_in.log_probs, axis=-1).tolist(),
        argmax_final=np.argmax(full.p.log_probs, axis=-1).tolist(),
    )


def write_inspect_csv(record: InspectRecord, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# tau={record.tau}\n")
        w = csv.writer(fh)
        w.writerow(INSPECT_FIELDS)
        for row in record.rows():
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


def read_inspect_csv(path) -> InspectRecord:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        tau = float(header.split("=", 1)[1]) if header.startswith("# tau=") else math.nan
        rows = list(csv.DictReader(fh))
    return InspectRecord(
        utt_id=rows[0]["utt_id"] if rows else "",
        tau=tau,
        blank_in=[float(r["blank_in"]) for r in rows],
        blank_final=[float(r["blank_final"]) for r in rows],
        skipped=[r["skipped"] == "1" for r in rows],
        argmax_in=[int(r["argmax_in"]) for r in rows],
        argmax_final=[int(r["argmax_final"]) for r in rows],
    )
