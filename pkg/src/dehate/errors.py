"""Error types shared across the toolkit.

ValueError is used for bad in-process arguments (out-of-range thresholds,
shape mismatches).  DehateError subclasses mark problems with external data
(files, manifests) so the CLI can map them to its data-error exit code.
"""


class DehateError(Exception):
    """Base class for data-level failures (bad files, bad manifests)."""


class FormatError(DehateError):
    """A file does not conform to its declared binary or image format."""


class ManifestError(DehateError):
    """A dataset manifest is malformed or violates its invariants."""


class TrainingError(DehateError):
    """Training diverged (nonfinite loss); carries the step diagnostics."""
