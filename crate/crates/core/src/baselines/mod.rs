//! Reference completion methods: per-slot kriging, neighborhood collaborative
//! filtering and two matrix factorizations.

mod factor;
mod knn;
mod kriging;

pub use factor::{fit_nmf, fit_nmf_monitored, fit_svd_mf, masked_sse, FactorModel, NmfConfig, SvdConfig};
pub use knn::{fit_knn_cf, pearson_overlap, KnnConfig, KnnModel};
pub use kriging::{
    empirical_semivariogram, fit_variogram, krige_column, kriging_complete, Variogram, VariogramKind,
    MIN_VARIOGRAM_POINTS, VARIOGRAM_BINS,
};
