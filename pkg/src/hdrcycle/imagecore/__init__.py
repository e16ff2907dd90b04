from .dataset import Batch, PairedDataset, UnpairedDataset, dataset_from_root, make_dataset
from .io import load_image, read_pfm, read_rgbe, save_image, write_pfm, write_rgbe
from .preprocess import equalize_array, equalize_histogram, resize, resize_array, synthesize_exposure
from .types import HdrImage, LdrImage

__all__ = [
    "Batch", "HdrImage", "LdrImage", "PairedDataset", "UnpairedDataset",
    "dataset_from_root", "equalize_array", "equalize_histogram", "load_image",
    "make_dataset", "read_pfm", "read_rgbe", "resize", "resize_array",
    "save_image", "synthesize_exposure", "write_pfm", "write_rgbe",
]
