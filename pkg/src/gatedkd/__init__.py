"""Calibration-gated knowledge distillation at desk scale.

A small encoder-decoder sequence model with hand-written gradients on a
linear tape, token- and sentence-level hard supervision gates driven by a
calibrated teacher, calibration metrics (ECE/MCE, reliability data,
temperature fitting), synthetic ambiguous-corpus generation, and a training
/ evaluation pipeline behind a single CLI.
"""

__version__ = "0.1.0"
