"""Unrolling a backbone over a slice sequence with prediction feedback.

Each step receives the current slice and, when the config is recurrent,
the previous step's predicted probability map as a second input channel.
The first step sees zeros ("no prior object"). Two training modes:

- detach (default): the previous prediction enters the step as a constant,
  so each step's gradient is exactly the isolated per-step gradient.
- full: gradients flow through the recurrent edge across all steps.

Probabilities, not thresholded masks, are carried across steps.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import ParamStore, forward
from .data import SliceSequence, to_sequence
from .metrics import VolumeMask

MODES = ("detach", "full")


def step(params: ParamStore, x_t: Tensor, y_prev: Tensor = None, train: bool = False) -> Tensor:
    """One slice through the backbone; sigmoid applied to the logits."""
    cfg = params.config
    if cfg.recurrent:
        if y_prev is None:
            raise ValueError("recurrent step needs the previous prediction")
        if y_prev.shape != (x_t.shape[0], 1, x_t.shape[2], x_t.shape[3]):
            raise ValueError(
                f"previous prediction shape {y_prev.shape} does not match slice {x_t.shape}"
            )
        inp = ad.concat_channels(x_t, y_prev)
    else:
        inp = x_t
    return ad.sigmoid(forward(params, inp, train))


def unroll_forward(
    params: ParamStore,
    seq: SliceSequence,
    y0: Tensor = None,
    mode: str = "detach",
    train: bool = False,
    teacher_forcing: bool = False,
) -> list:
    """Predictions for every slice, in sequence order."""
    if len(seq) == 0:
        raise ValueError("cannot unroll an empty sequence")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if teacher_forcing and seq.labels is None:
        raise ValueError("teacher forcing needs a labeled sequence")
    first = seq.frames[0]
    if y0 is None:
        y0 = Tensor(np.zeros((1, 1, first.shape[2], first.shape[3]), dtype=first.dtype))
    preds = []
    y_prev = y0
    for t, frame in enumerate(seq.frames):
        x_t = Tensor(frame)
        if teacher_forcing and t > 0:
            feed = Tensor(seq.labels[t - 1])
        elif mode == "detach":
            feed = y_prev.detach()
        else:
            feed = y_prev
        pred = step(params, x_t, feed, train)
        preds.append(pred)
        y_prev = pred
    return preds


def segment_volume(params: ParamStore, volume, threshold: float = 0.5,
                   direction: str = "ascending") -> VolumeMask:
    """Slice, unroll with a zero prior, threshold strictly, restack.

    Extents that are not divisible by 2^levels are zero-padded on the way
    in and cropped on the way out, so the mask always matches the volume.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be inside (0, 1), got {threshold}")
    cfg = params.config
    seq = to_sequence(volume, None, direction, pad_to=2 ** cfg.levels)
    with ad.no_grad():
        preds = unroll_forward(params, seq, mode="detach", train=False)
    planes = [(p.data > threshold) for p in preds]
    voxels = seq.restore(planes).astype(np.uint8)
    return VolumeMask(voxels, volume.spacing_mm)
