//! Spatial transforms, resampling, similarity metrics, affine registration and
//! the pairwise transform table.

pub mod metric;
pub mod register;
pub mod resample;
pub mod table;
pub mod transform;

pub use metric::{mutual_information, rmse};
pub use register::{register_affine, RegistrationConfig, RegistrationResult, SimilarityMetric};
pub use resample::{resample, resample_intensity, resample_labels, GridData, Interp, Resampled};
pub use table::{build_transform_table, improvement_rate, TransformTable};
pub use transform::{
    mean_displacement, mean_displacement_error, mean_displacement_error_masked, AffineParams, AffineTransform, DisplacementField,
    Point3, SpatialTransform,
};
