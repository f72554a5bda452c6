"""Exception types shared across the toolkit."""


class DermscreenError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(DermscreenError):
    """Manifest file fails schema validation or internal consistency checks."""


class RecordRejectedError(ManifestError):
    """A single image record is unusable (e.g. ROI fully outside the image)."""


class SplitError(DermscreenError):
    """Patient-level split cannot be produced from the given manifest."""


class CropError(DermscreenError):
    """ROI crop extraction failed (e.g. ROI does not intersect the image)."""


class GranularityError(DermscreenError):
    """Detector label granularity does not match the requested operation."""


class ConfigError(DermscreenError):
    """Invalid training or generation configuration."""


class MetricUndefinedError(DermscreenError):
    """Metric has no defined value for the given inputs (e.g. single-class AUC)."""


class CovariateError(DermscreenError):
    """Covariate row does not conform to the schema."""


class ModelIOError(DermscreenError):
    """Model checkpoint cannot be saved or loaded."""


class ReportError(DermscreenError):
    """Evaluation report inputs are inconsistent or a report file is malformed."""
