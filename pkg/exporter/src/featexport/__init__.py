"""Multi-hierarchy, multi-scale CNN feature exporter for the patchnf engine."""

from .export import ExportSpec, FeatureTapper, export, load_export_spec, load_image, load_mask

__version__ = "0.1.0"
