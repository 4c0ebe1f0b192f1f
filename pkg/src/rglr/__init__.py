"""Point cloud denoising with a reweighted graph Laplacian regularizer."""

__version__ = "0.1.0"

from rglr.pointcloud import PointCloud, NoiseSpec, load, save, add_noise, rescale_to_diagonal

__all__ = [
    "PointCloud",
    "NoiseSpec",
    "load",
    "save",
    "add_noise",
    "rescale_to_diagonal",
    "__version__",
]
