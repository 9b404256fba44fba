"""3D U-WGAN denoising for preclinical fMRI, with a phantom + GLM evaluation path."""

from uwgan.volume import Volume3D, Volume4D, load_volume, load_volume3d, save_volume
from uwgan.patching import ConfigMode, PatchGrid, PatchSet, extract_patches, merge, reassemble, unmerge

__version__ = "0.1.0"

__all__ = [
    "ConfigMode",
    "PatchGrid",
    "PatchSet",
    "Volume3D",
    "Volume4D",
    "extract_patches",
    "load_volume",
    "load_volume3d",
    "merge",
    "reassemble",
    "save_volume",
    "unmerge",
]
