"""Hate-region localization and redaction toolkit.

Subpackages cover attention-heatmap aggregation, mask binarization, the
two-step anonymizing blur, hate-span extraction and prompt assembly, IoU
scoring with a leaderboard, a small text-conditioned masker trained with a
built-in autodiff engine, and a command-line interface over all of it.
"""

__version__ = "0.1.0"
