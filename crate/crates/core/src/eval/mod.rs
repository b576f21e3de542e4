//! Feature extraction, linear probe, covariance spectrum, PCA and attention
//! export.

pub mod attention;
pub mod features;
pub mod probe;
pub mod spectrum;

pub use attention::{
    class_attention, export_attention, parse_ply, write_ply, AttentionMaps, HeadMap,
};
pub use features::{extract_features, FeatureMatrix};
pub use probe::{fit_probe, linear_probe, LinearProbe, ProbeConfig, ProbeReport};
pub use spectrum::{
    covariance, jacobi_eigen, pca_project, spectrum, write_projection_csv, write_spectrum_csv,
    SpectrumReport, RANK_THRESHOLD,
};
