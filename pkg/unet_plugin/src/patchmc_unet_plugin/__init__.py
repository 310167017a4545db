"""Reference 3D U-Net plugin for the patchmc classifier wire protocol."""

__version__ = "0.1.0"

from .net import UNet3D, UNetConfig, fit  # noqa: F401
