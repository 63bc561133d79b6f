from .formats import (
    FeatureMatrix,
    PatchCoordinateSet,
    SurvivalLabel,
    read_coordinates,
    read_feature_matrix,
    read_labels,
    write_coordinates,
    write_feature_matrix,
    write_labels,
)
from .raster import (
    Raster,
    otsu_threshold,
    read_raster,
    rgb_to_saturation,
    segment_to_coordinates,
    write_raster,
)
from .synthetic import SyntheticPatient, SyntheticSpec, generate_synthetic_cohort
