"""Image I/O, patches, augmentation, manifests and synthetic data."""

from .augment import AUGMENT_OPS, augment, sample_gvf, transform_array, transform_gvf
from .io import DataError, Sample, load_sample, read_image, read_mask, write_image, write_mask
from .manifest import DatasetManifest, split_dataset
from .patches import extract_patches, grid_origins, patch_origins, stitch_patches
from .synth import render_sample, synth_dataset, synth_samples

__all__ = [
    "AUGMENT_OPS", "DataError", "DatasetManifest", "Sample", "augment", "extract_patches", "grid_origins",
    "load_sample", "patch_origins", "read_image", "read_mask", "render_sample", "sample_gvf", "split_dataset",
    "stitch_patches", "synth_dataset", "synth_samples", "transform_array", "transform_gvf", "write_image",
    "write_mask",
]
