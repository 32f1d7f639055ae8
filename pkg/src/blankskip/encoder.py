"""Conformer-style encoder with an intermediate CTC head that gates the upper layers.

Layers ``1..K`` run on every frame. Frames whose intermediate blank posterior
(and that of the ``window - 1`` preceding frames) exceeds ``tau`` bypass
layers ``K+1..L``: their intermediate representation and distribution are
carried to the output unchanged. The remaining frames are gathered into a
compact sequence, so upper-layer attention only sees kept frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ctc import CTCHead, FactorizedHead, PosteriorGrid
from .numerics import DTYPE


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    subsample_stride: int = 2
    model_dim: int = 32
    num_layers: int = 6
    split_layer: int = 4
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 8
    use_conv_block: bool = True
    conv_kernel: int = 5
    factorized_heads: bool = False
    tau_skip: float = 0.99
    window_len: int = 3
    use_pos_enc: bool = True

    def __post_init__(self):
        if not 1 <= self.split_layer < self.num_layers:
            raise ValueError(f"split_layer must satisfy 1 <= K < L, got K={self.split_layer}, L={self.num_layers}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 < self.tau_skip <= 1.0:
            raise ValueError(f"tau_skip must lie in (0, 1], got {self.tau_skip}")
        if self.window_len < 1 or self.subsample_stride < 1 or self.vocab_size < 1:
            raise ValueError("window_len, subsample_stride and vocab_size must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")

    def to_dict(self) -> dict:
        return asdict(self)


def subsample(features, stride: int) -> np.ndarray:
    """Stack ``stride`` consecutive frames; a trailing remainder is dropped."""
    x = np.asarray(features, dtype=np.float64)
    t, d = x.shape
    if t < stride:
        raise ValueError(f"subsample: {t} frames shorter than stride {stride}")
    n = t // stride
    return x[: n * stride].reshape(n, stride * d)


def compute_skip_mask(blank_probs: Sequence[float], tau: float, window: int = 3) -> np.ndarray:
    """True where a frame and its ``window - 1`` predecessors all have blank prob > tau.

    Positions before the first frame count as blank-certain.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    probs = np.concatenate([np.ones(window - 1), np.asarray(blank_probs, dtype=np.float64)])
    confident = probs > tau
    # length of the confident run ending at each position
    run = np.zeros(confident.shape[0], dtype=np.int64)
    count = 0
    for i, c in enumerate(confident):
        count = count + 1 if c else 0
        run[i] = count
    return run[window - 1:] >= window


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    rate = torch.exp(torch.arange(0, dim, 2, dtype=DTYPE) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * rate)
    pe[:, 1::2] = torch.cos(pos * rate)[:, : dim // 2]
    return pe


def _lengths_mask(lengths: torch.Tensor, t_max: int) -> torch.Tensor:
    return torch.arange(t_max)[None, :] < lengths[:, None]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        # finite fill keeps fully padded rows free of NaN
        scores = scores.masked_fill(~valid[:, None, None, :], torch.finfo(DTYPE).min)
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, t, d))


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise convolution over time, SiLU, pointwise."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-5)
        self.pw_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pw_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        y = F.glu(self.pw_in(self.norm(x)), dim=-1)
        y = y.masked_fill(~valid[..., None], 0.0)
        y = self.depthwise(y.transpose(1, 2)).transpose(1, 2)
        return self.pw_out(F.silu(y))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, eps=1e-5)
        self.up = nn.Linear(dim, hidden)
        self.down = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.gelu(self.up(self.norm(x))))


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, use_conv: bool = True, kernel: int = 5):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim, eps=1e-5)
        self.attn = SelfAttention(dim, heads)
        self.conv = ConvModule(dim, kernel) if use_conv else None
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        if valid is None:
            valid = torch.ones(x.shape[:2], dtype=torch.bool)
        x = x + self.attn(self.attn_norm(x), valid)
        if self.conv is not None:
            x = x + self.conv(x, valid)
        x = x + self.ffn(x)
        return x[0] if squeeze else x


@dataclass
class EncodeResult:
    h_in: np.ndarray
    p_in: PosteriorGrid
    h: np.ndarray
    p: PosteriorGrid
    skip_mask: np.ndarray
    upper_frames_computed: int

    @property
    def frames(self) -> int:
        return self.h.shape[0]

    @property
    def skipped(self) -> int:
        return int(self.skip_mask.sum())


@dataclass
class BatchOutput:
    """Padded batch activations; log-probs are ``(B, T', V+1)``."""

    h_in: torch.Tensor
    log_p_in: torch.Tensor
    h: torch.Tensor
    log_p: torch.Tensor
    lengths: torch.Tensor
    skip_mask: torch.Tensor = field(default=None)

    def valid(self) -> torch.Tensor:
        return _lengths_mask(self.lengths, self.h.shape[1])


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.input_proj = nn.Linear(cfg.input_dim * cfg.subsample_stride, d)

        def block():
            return ConformerBlock(d, cfg.num_heads, cfg.ffn_dim, cfg.use_conv_block, cfg.conv_kernel)

        self.lower = nn.ModuleList(block() for _ in range(cfg.split_layer))
        self.upper = nn.ModuleList(block() for _ in range(cfg.num_layers - cfg.split_layer))
        self.norm_in = nn.LayerNorm(d, eps=1e-5)
        self.norm_out = nn.LayerNorm(d, eps=1e-5)
        head = FactorizedHead if cfg.factorized_heads else CTCHead
        self.head_in = head(d, cfg.vocab_size)
        self.head = head(d, cfg.vocab_size)

    def _pad(self, frames_list: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
        xs = [torch.as_tensor(np.asarray(f, dtype=np.float64)) for f in frames_list]
        lengths = torch.tensor([x.shape[0] for x in xs])
        out = torch.zeros(len(xs), int(lengths.max()), xs[0].shape[1], dtype=DTYPE)
        for i, x in enumerate(xs):
            out[i, : x.shape[0]] = x
        return out, lengths

    def lower_stack(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        h = self.input_proj(x)
        if self.cfg.use_pos_enc:
            h = h + sinusoidal_positions(h.shape[1], h.shape[2])
        for blk in self.lower:
            h = blk(h, valid)
        return self.norm_in(h)

    def upper_stack(self, h: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        for blk in self.upper:
            h = blk(h, valid)
        return self.norm_out(h)

    def forward_full(self, x: torch.Tensor, lengths: torch.Tensor) -> BatchOutput:
        """All layers on all frames for a padded ``(B, T', s*d)`` batch."""
        valid = _lengths_mask(lengths, x.shape[1])
        h_in = self.lower_stack(x, valid)
        h = self.upper_stack(h_in, valid)
        return BatchOutput(h_in, self.head_in(h_in), h, self.head(h), lengths)

    def forward_skip(self, x: torch.Tensor, lengths: torch.Tensor, tau: float) -> BatchOutput:
        valid = _lengths_mask(lengths, x.shape[1])
        h_in = self.lower_stack(x, valid)
        log_p_in = self.head_in(h_in)
        blank = log_p_in[..., 0].exp().detach().cpu().numpy()
        skip = np.zeros(valid.shape, dtype=bool)
        for b, n in enumerate(lengths.tolist()):
            skip[b, :n] = compute_skip_mask(blank[b, :n], tau, self.cfg.window_len)
        skip_t = torch.from_numpy(skip)
        keep = valid & ~skip_t
        counts = keep.sum(1)
        h, log_p = h_in.clone(), log_p_in.clone()
        k_max = int(counts.max())
        if k_max > 0:
            # compact kept frames to the front of each row, original order preserved
            order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)[:, :k_max]
            idx = order[..., None].expand(-1, -1, h_in.shape[2])
            compact = torch.gather(h_in, 1, idx)
            kvalid = _lengths_mask(counts, k_max)
            h_up = self.upper_stack(compact, kvalid)
            lp_up = self.head(h_up)
            rows, cols = kvalid.nonzero(as_tuple=True)
            dst = order[rows, cols]
            h[rows, dst] = h_up[rows, cols]
            log_p[rows, dst] = lp_up[rows, cols]
        return BatchOutput(h_in, log_p_in, h, log_p, lengths, skip_t)

    def _results(self, out: BatchOutput) -> list[EncodeResult]:
        res = []
        for b, n in enumerate(out.lengths.tolist()):
            mask = out.skip_mask[b, :n].numpy() if out.skip_mask is not None else np.zeros(n, dtype=bool)
            res.append(EncodeResult(
                h_in=out.h_in[b, :n].detach().numpy(),
                p_in=PosteriorGrid(out.log_p_in[b, :n].detach().numpy()),
                h=out.h[b, :n].detach().numpy(),
                p=PosteriorGrid(out.log_p[b, :n].detach().numpy()),
                skip_mask=mask,
                upper_frames_computed=int(n - mask.sum()),
            ))
        return res

    @torch.no_grad()
    def encode_batch(self, frames_list: Sequence, tau: float | None = None) -> list[EncodeResult]:
        """Encode subsampled utterances together; ``tau=None`` disables skipping."""
        x, lengths = self._pad(frames_list)
        out = self.forward_full(x, lengths) if tau is None else self.forward_skip(x, lengths, tau)
        return self._results(out)

    def encode_full(self, frames) -> EncodeResult:
        return self.encode_batch([frames])[0]

    def encode_skip(self, frames, tau: float | None = None) -> EncodeResult:
        tau = self.cfg.tau_skip if tau is None else tau
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {tau}")
        return self.encode_batch([frames], tau)[0]

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: ModelConfig, seed: int = 0) -> Encoder:
    torch.manual_seed(seed)
    return Encoder(cfg).to(DTYPE)
