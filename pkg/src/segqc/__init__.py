"""Slice-level uncertainty, performance prediction and targeted smoothing
for ensembles of 3D segmentation probability maps."""

from segqc.volume_io import Volume, SliceRecord, read_volume, write_volume

__version__ = "0.1.0"

__all__ = ["Volume", "SliceRecord", "read_volume", "write_volume", "__version__"]
