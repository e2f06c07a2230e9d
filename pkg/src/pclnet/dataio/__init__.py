from .augment import augment_clip
from .colorcode import flow_to_color, make_colorwheel
from .datasets import ClipDataset, load_dataset
from .formats import FormatError, read_flo, read_image, read_ppm, write_flo, write_ppm
from .synthetic import Clip, SyntheticSpec, generate_synthetic, translation_clips

__all__ = [
    "Clip",
    "ClipDataset",
    "FormatError",
    "SyntheticSpec",
    "augment_clip",
    "flow_to_color",
    "generate_synthetic",
    "load_dataset",
    "make_colorwheel",
    "read_flo",
    "read_image",
    "read_ppm",
    "translation_clips",
    "write_flo",
    "write_ppm",
]
