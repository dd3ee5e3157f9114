"""Recurrent slice-sequence segmentation engine.

A from-scratch reverse-mode autodiff core drives three encoder-decoder
segmentation backbones that can be unrolled over adjacent slices of a
volume, feeding each slice's prediction into the next step. Training,
surface-distance evaluation, a synthetic phantom generator and a CLI sit
on top.
"""

__version__ = "0.1.0"
