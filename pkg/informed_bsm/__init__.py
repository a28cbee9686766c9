"""
Binaural reproduction from wearable microphone arrays: diffuse-field BSM,
COMPASS-BSM and directional BSM filter design, with the image-method
simulation and objective metrics used to evaluate them.
"""
from .filters import BinauralFilterBank, design_bsm, design_com, design_dbsm, render_binaural
from .hrtf_io import analytic_hrtf, load_hrtf, write_hrtf
from .sh_core import ArrayGeometry, Direction, HrtfSet

__all__ = [
    "ArrayGeometry",
    "BinauralFilterBank",
    "Direction",
    "HrtfSet",
    "analytic_hrtf",
    "design_bsm",
    "design_com",
    "design_dbsm",
    "load_hrtf",
    "render_binaural",
    "write_hrtf",
]
