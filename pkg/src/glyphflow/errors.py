"""Exception hierarchy.

Every error raised on a contract violation subclasses :class:`GlyphFlowError`
so callers (CLI, service) can map failures to exit codes / HTTP statuses in
one place.
"""


class GlyphFlowError(Exception):
    """Base class for all library errors."""

    code = "error"


# --- glyph rendering ---------------------------------------------------------

class UnsupportedCodepoint(GlyphFlowError):
    code = "unsupported_codepoint"


class DegenerateGlyph(GlyphFlowError):
    code = "degenerate_glyph"


class EmptyText(GlyphFlowError):
    code = "empty_text"


class BoxTooSmall(GlyphFlowError):
    code = "box_too_small"


class OverlappingBoxes(GlyphFlowError):
    code = "overlapping_boxes"


# --- composition / geometry --------------------------------------------------

class DimensionMismatch(GlyphFlowError):
    code = "dimension_mismatch"


class BoxOutOfScene(GlyphFlowError):
    code = "box_out_of_scene"


class ShapeMismatch(GlyphFlowError):
    code = "shape_mismatch"


# --- data --------------------------------------------------------------------

class AtlasMissing(GlyphFlowError):
    code = "atlas_missing"


class IoFailure(GlyphFlowError):
    code = "io_failure"


class DatasetInvalid(GlyphFlowError):
    code = "dataset_invalid"


# --- model / training --------------------------------------------------------

class NonFiniteParameters(GlyphFlowError):
    code = "non_finite_parameters"


class TargetMissing(GlyphFlowError):
    code = "target_missing"


class NoAdapters(GlyphFlowError):
    code = "no_adapters"


class NonFiniteLoss(GlyphFlowError):
    code = "non_finite_loss"


class NonFiniteState(GlyphFlowError):
    code = "non_finite_state"


class PackOverlap(GlyphFlowError):
    code = "pack_overlap"


# --- evaluation --------------------------------------------------------------

class LengthMismatch(GlyphFlowError):
    code = "length_mismatch"


class ContaminationDetected(GlyphFlowError):
    code = "contamination_detected"


class AttributeUnsupported(GlyphFlowError):
    code = "attribute_unsupported"
