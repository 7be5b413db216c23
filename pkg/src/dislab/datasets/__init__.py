from .loader import (
    ImageTriplet,
    MissingImageError,
    TripletArray,
    TripletSet,
    load_triplet_array,
    load_triplets,
    read_png,
    synthetic_to_arrays,
    to_tensor_image,
    write_dataset,
    write_png,
)
from .manifest import DatasetManifest, ManifestRecord, manifest_from_style_dirs, split_train_test
from .synthetic import (
    DIGIT_STYLES,
    MAP_STYLES,
    SyntheticDataset,
    add_content_noise,
    estimate_map_geometry,
    generate,
    generate_synthetic_digit_triplets,
    generate_synthetic_map_triplets,
)

__all__ = [
    "DIGIT_STYLES",
    "MAP_STYLES",
    "DatasetManifest",
    "ImageTriplet",
    "ManifestRecord",
    "MissingImageError",
    "SyntheticDataset",
    "TripletArray",
    "TripletSet",
    "add_content_noise",
    "estimate_map_geometry",
    "generate",
    "generate_synthetic_digit_triplets",
    "generate_synthetic_map_triplets",
    "load_triplet_array",
    "load_triplets",
    "manifest_from_style_dirs",
    "read_png",
    "split_train_test",
    "synthetic_to_arrays",
    "to_tensor_image",
    "write_dataset",
    "write_png",
]
