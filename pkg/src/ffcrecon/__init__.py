"""Multi-field T1, C and alpha mapping for field-cycling MRI.

The main entry point is :func:`ffcrecon.tgv.irgn_reconstruct`, a joint
TGV-regularised Gauss-Newton reconstruction from k-space.
"""

from .datamodel import (AcquisitionProtocol, DataFormatError, ImageSeries, KSpaceSeries,
                        RoiMask, UnknownMaps, export_csv, load_dataset, load_maps,
                        save_dataset, save_maps)
from .presets import PRESET_NAMES, preset_protocol

__version__ = "0.1.0"

__all__ = [
    "AcquisitionProtocol", "DataFormatError", "ImageSeries", "KSpaceSeries", "PRESET_NAMES",
    "RoiMask", "UnknownMaps", "export_csv", "load_dataset", "load_maps", "preset_protocol",
    "save_dataset", "save_maps",
]
