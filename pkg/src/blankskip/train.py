"""Multi-task CTC training with optional intermediate-layer distillation.

Loss per batch::

    ctc(final) + ctc(intermediate) + lambda_kl * KL(p_in || stopgrad(p_final))

with each CTC term averaged over utterances (not length-normalized) and the KL
term averaged over non-padding frames.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .ctc import ctc_loss_batch, greedy_decode, kl_frame_loss
from .data import TaskConfig, Utterance
from .decoder import corpus_ter
from .encoder import Encoder, ModelConfig, build_model, subsample
from .numerics import DTYPE, Rng

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "blankskip-checkpoint/1"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    lambda_kl: float = 0.5
    use_kl: bool = True
    use_mtl: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["task"] = self.task.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        task = TaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("task", {}).items()})
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(model=model, task=task, **d)


@dataclass
class LossTerms:
    total: torch.Tensor
    ctc: float
    ctc_in: float
    kl: float

    def record(self) -> dict:
        return {"total": float(self.total.detach()), "ctc": self.ctc, "ctc_in": self.ctc_in, "kl": self.kl}


@dataclass
class Checkpoint:
    model: Encoder
    step: int = 0
    loss_history: list[dict] = field(default_factory=list)
    train_config: TrainConfig | None = None

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def prepare_batch(utts: Sequence[Utterance], stride: int) -> tuple[torch.Tensor, torch.Tensor]:
    frames = [subsample(u.features, stride) for u in utts]
    lengths = torch.tensor([f.shape[0] for f in frames])
    x = torch.zeros(len(frames), int(lengths.max()), frames[0].shape[1], dtype=DTYPE)
    for i, f in enumerate(frames):
        x[i, : f.shape[0]] = torch.from_numpy(f)
    return x, lengths


def batch_order(lengths: Sequence[int], batch_size: int, rng: Rng, bucket: int = 32) -> list[list[int]]:
    """Shuffled batches of similar-length utterances.

    Indices are shuffled, cut into pools of ``bucket`` batches, sorted by length
    inside each pool, batched, and the batch order shuffled again.
    """
    order = rng.permutation(len(lengths))
    pool = batch_size * bucket
    batches = []
    for i in range(0, len(order), pool):
        chunk = sorted(order[i: i + pool].tolist(), key=lambda j: (lengths[j], j))
        batches += [chunk[k: k + batch_size] for k in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def total_loss(model: Encoder, utts: Sequence[Utterance], cfg: TrainConfig,
               frame_weights: Callable | None = None) -> LossTerms:
    """Batch loss on ``encode_full`` activations; training never skips frames.

    ``frame_weights`` optionally maps the batch output to a ``(B, T')`` weight
    tensor for the KL term; the default weights every real frame equally.
    """
    x, lengths = prepare_batch(utts, model.cfg.subsample_stride)
    out = model.forward_full(x, lengths)
    labels = [u.labels for u in utts]
    ids = [u.id for u in utts]
    n = len(utts)
    if cfg.use_mtl:
        # both heads in one lattice pass
        both = ctc_loss_batch(torch.cat([out.log_p, out.log_p_in]), lengths.tolist() * 2, labels * 2, ids * 2)
        ctc, term = both[:n].mean(), both[n:].mean()
        total = ctc + term
        ctc_in = float(term.detach())
    else:
        ctc = ctc_loss_batch(out.log_p, lengths.tolist(), labels, ids).mean()
        total = ctc
        ctc_in = 0.0
    kl = 0.0
    if cfg.use_kl:
        weights = out.valid() if frame_weights is None else frame_weights(out)
        term = kl_frame_loss(out.log_p_in, out.log_p, weights)
        total = total + cfg.lambda_kl * term
        kl = float(term.detach())
    return LossTerms(total, float(ctc.detach()), ctc_in, kl)


@torch.no_grad()
def evaluate_ter(model: Encoder, utts: Sequence[Utterance], batch_size: int = 50) -> float:
    """Held-out token error rate of greedy decoding on the full (no-skip) encoder."""
    hyps = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i: i + batch_size]
        frames = [subsample(u.features, model.cfg.subsample_stride) for u in chunk]
        hyps += [greedy_decode(r.p) for r in model.encode_batch(frames)]
    return corpus_ter([u.labels for u in utts], hyps)


def train(cfg: TrainConfig, train_set: Sequence[Utterance], test_set: Sequence[Utterance] = (),
          log_path: str | Path | None = None, callback: Callable[[dict], None] | None = None) -> Checkpoint:
    """Adam with gradient-norm clipping; batch order is fixed by ``cfg.seed``."""
    torch.set_num_threads(1)
    model = build_model(cfg.model, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    sched = None
    if cfg.warmup_steps > 0:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / cfg.warmup_steps))
    rng = Rng(cfg.seed).spawn(7)
    ckpt = Checkpoint(model, train_config=cfg)
    lengths = [u.features.shape[0] for u in train_set]
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec):
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        if callback:
            callback(rec)

    emit({"header": True, "lambda_kl": cfg.lambda_kl, "use_kl": cfg.use_kl, "use_mtl": cfg.use_mtl,
          "config": cfg.to_dict()})
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            t0 = time.perf_counter()
            sums = {"total": 0.0, "ctc": 0.0, "ctc_in": 0.0, "kl": 0.0}
            n_batches = 0
            for idx in batch_order(lengths, cfg.batch_size, rng):
                batch = [train_set[j] for j in idx]
                terms = total_loss(model, batch, cfg)
                if not torch.isfinite(terms.total):
                    raise TrainingDiverged(f"non-finite loss at step {ckpt.step}: {terms.record()}")
                opt.zero_grad(set_to_none=True)
                terms.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                opt.step()
                if sched:
                    sched.step()
                ckpt.step += 1
                n_batches += 1
                for k, v in terms.record().items():
                    sums[k] += v
            model.eval()
            rec = {"epoch": epoch, "step": ckpt.step, **{k: v / n_batches for k, v in sums.items()}}
            if test_set:
                rec["ter"] = evaluate_ter(model, test_set)
            rec["seconds"] = round(time.perf_counter() - t0, 3)
            ckpt.loss_history.append(rec)
            log.info("epoch %d step %d loss %.4f ter %s", epoch, ckpt.step, rec["total"], rec.get("ter"))
            emit(rec)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return ckpt


def _nested(t: torch.Tensor):
    return t.detach().cpu().numpy().tolist()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "step": ckpt.step,
        "loss_history": ckpt.loss_history,
        "weights": {name: _nested(t) for name, t in ckpt.model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Rebuild a model from a checkpoint file.

    With ``expect`` given, the stored weights must fit that architecture
    instead of the stored one.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    cfg = expect or ModelConfig(**doc["config"])
    model = build_model(cfg)
    state = model.state_dict()
    weights = doc["weights"]
    missing = sorted(set(state) - set(weights))
    extra = sorted(set(weights) - set(state))
    if missing or extra:
        raise CheckpointError(f"{path}: weight names differ; missing={missing} extra={extra}")
    loaded = {}
    for name, ref in state.items():
        arr = torch.tensor(weights[name], dtype=ref.dtype)
        if arr.shape != ref.shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}")
        loaded[name] = arr
    model.load_state_dict(loaded)
    model.eval()
    tc = doc.get("train_config")
    return Checkpoint(model, doc.get("step", 0), doc.get("loss_history", []),
                      TrainConfig.from_dict(tc) if tc else None)
