//! Scenario-clustered indoor temperature forecasting.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`ingest`] parses sensor logs, regularizes them onto a fixed grid and
//!    cuts them into [`DayWindow`]s.
//! 2. [`features`] summarizes each day with statistical and spectral
//!    descriptors.
//! 3. [`cluster`] groups the days into operating scenarios with k-means,
//!    picking k by silhouette.
//! 4. [`sr`] evolves one symbolic expression per scenario over lagged
//!    indoor temperature, outdoor temperature and HVAC power.
//! 5. [`scenario`] ties it together: online scenario assignment, constant
//!    refit and one-day-ahead rollout, scored by [`metrics`].
//!
//! [`synth`] generates labelled synthetic building data for testing.

pub mod cluster;
pub mod error;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod scenario;
pub mod sr;
pub mod synth;

pub use cluster::{ClusterModel, ClusterQuality, KMeansConfig};
pub use error::{Error, Result};
pub use features::{FeatureMatrix, FeatureVector, NormalizationParams, SpectralConfig};
pub use ingest::{Channel, DayWindow, GridTable, SensorRecord, TimeSeriesTable};
pub use metrics::MetricReport;
pub use scenario::{ForecastResult, Mode, ScenarioLibrary, ScenarioModel};
pub use sr::{Expr, GpConfig, LagRef, TrainingSet};
