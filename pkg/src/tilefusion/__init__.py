"""Hybrid two-encoder vision-language pipeline with adaptive tiling.

Images are segmented into square tiles chosen by aspect ratio, encoded by
two small vision transformers in parallel, compressed by pixel unshuffle,
projected into the language model width, fused tile by tile, and spliced
into a byte-level token sequence for a causal transformer. Training runs
in two stages (projector warmup, then language model finetune) under a
freeze schedule. Everything is numpy float64 with a built-in reverse-mode
differentiator, so runs are deterministic and gradient-checkable.
"""

__version__ = "0.1.0"
