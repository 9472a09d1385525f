"""Ultra-low-field MRI enhancement: volumes, phantoms, augmentation, model, training, metrics."""

__version__ = "0.1.0"

from ulfenc.volio import Volume3D, PairedSample, DatasetManifest, read_volume, write_volume, normalize

__all__ = [
    "Volume3D",
    "PairedSample",
    "DatasetManifest",
    "read_volume",
    "write_volume",
    "normalize",
]
