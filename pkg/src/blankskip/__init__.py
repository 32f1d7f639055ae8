"""Blank-gated dynamic layer skipping for CTC speech encoders, at desk scale."""

from .ctc import PosteriorGrid, blank_posteriors, collapse, ctc_forward_loss, greedy_decode, kl_frame_loss
from .decoder import DecodeOptions, edit_distance, prefix_beam_search
from .encoder import Encoder, EncodeResult, ModelConfig, build_model, compute_skip_mask, subsample

__all__ = [
    "DecodeOptions", "EncodeResult", "Encoder", "ModelConfig", "PosteriorGrid", "blank_posteriors",
    "build_model", "collapse", "compute_skip_mask", "ctc_forward_loss", "edit_distance", "greedy_decode",
    "kl_frame_loss", "prefix_beam_search", "subsample",
]
