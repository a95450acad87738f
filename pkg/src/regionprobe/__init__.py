"""regionprobe: region-sensitivity analysis for image classifiers.

Applies region-targeted corruptions and ablations to mask-annotated images,
queries classifiers through a uniform backend bridge, and computes relative
foreground sensitivity, saliency-alignment, and neural-node attribution
scores.
"""

__version__ = "0.1.0"

from regionprobe.dataset import Dataset, Sample, load_manifest, save_manifest, synth_dataset
from regionprobe.metrics import irfs, rfs

__all__ = [
    "Dataset",
    "Sample",
    "load_manifest",
    "save_manifest",
    "synth_dataset",
    "rfs",
    "irfs",
    "__version__",
]
