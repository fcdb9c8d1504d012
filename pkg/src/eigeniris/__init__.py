"""Eigen-patch super-resolution of very low-resolution iris images, with
Log-Gabor and keypoint matchers and trained score fusion."""

__version__ = "0.1.0"

from .errors import EigenIrisError  # noqa: F401
from .image import GrayImage, load_image, save_image  # noqa: F401
from .kernels import BACKEND  # noqa: F401

__all__ = ["BACKEND", "EigenIrisError", "GrayImage", "load_image", "save_image", "__version__"]
