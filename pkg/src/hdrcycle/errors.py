class ImageFormatError(ValueError):
    """File decoded but does not describe a valid LDR/HDR image."""


class ShapeError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class BatchError(ValueError):
    """Batch too small for a loss that needs negatives."""
