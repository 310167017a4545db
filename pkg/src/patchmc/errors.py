"""Exception hierarchy shared by all patchmc modules."""


class PatchmcError(Exception):
    """Base class for every error raised by this package."""


# --- volume / file I/O ---

class UnsupportedFormat(PatchmcError):
    """File magic or header describes a format this toolkit does not read."""


class CorruptHeader(PatchmcError):
    """Header fields violate geometry invariants (dims < 1, spacing <= 0, ...)."""


class TruncatedData(PatchmcError):
    """File payload is shorter than the header promises."""


class IoFailure(PatchmcError):
    """Underlying OS write/read failed."""


# --- transforms / registration ---

class SingularTransform(PatchmcError):
    """Affine matrix is not invertible (|det A| <= 1e-12)."""


class InsufficientOverlap(PatchmcError):
    """Too little usable overlap (or image content) to evaluate a metric."""


# --- prior / masks ---

class GeometryMismatch(PatchmcError):
    """Operands do not share one voxel grid geometry."""


class EmptyAtlasSet(PatchmcError):
    """No masks were supplied."""


class AllZeroMasks(PatchmcError):
    """Every atlas mask is empty; the normalized prior is undefined."""


class ThresholdOutOfRange(PatchmcError):
    """Vote threshold d must satisfy 0 < d <= atlas count."""


class EmptyRegion(PatchmcError):
    """Candidate region has no set voxel."""


# --- mcmc ---

class EmptySupport(PatchmcError):
    """Sampling target has no voxel with positive density."""


class ZeroCurrentDensity(PatchmcError):
    """Chain state landed on zero density; internal invariant violated."""


# --- patches ---

class CenterOutOfBounds(PatchmcError):
    """Patch or vote center lies outside the volume grid."""


class EmptySampleSet(PatchmcError):
    """No sample centers to build a dataset from."""


# --- classifier ---

class EmptyDataset(PatchmcError):
    """Training dataset contains no patches."""


class DivergedLoss(PatchmcError):
    """Training loss became NaN/Inf."""


class SizeMismatch(PatchmcError):
    """Patch shape does not match what the model or accumulator expects."""


class SpawnFailure(PatchmcError):
    """Plugin executable could not be started."""


class HandshakeMismatch(PatchmcError):
    """Plugin answered the hello frame with a wrong magic/version/op."""


class PluginFailure(PatchmcError):
    """Plugin session broke mid-protocol (pipe closed, malformed frame, bad exit)."""


# --- fusion / metrics ---

class NoVotes(PatchmcError):
    """finalize() called before any region was accumulated."""


class EmptyMask(PatchmcError):
    """Hausdorff distance needs both masks non-empty."""


# --- pipeline ---

class ConfigError(PatchmcError):
    """Pipeline configuration is invalid or references missing files."""
