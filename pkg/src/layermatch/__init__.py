"""Desk-scale semi-supervised learning lab.

Implements confidence-thresholded pseudo-labeling with weak/strong
augmentation, layer-routed gradient updates (the classifier head learns
from labeled data only), and an EMA-stabilized auxiliary clustering head,
next to supervised-only and FixMatch-style baselines.  Ships with
numerical verifiers for the gradient machinery and the continuous-limit
identities the method rests on.
"""

__version__ = "0.1.0"

from . import data, kernels, netcore, sslcore, theoryverify, trainer  # noqa: F401
