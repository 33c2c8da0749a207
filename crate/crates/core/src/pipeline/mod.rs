//! Data ingestion, preprocessing, the evaluation protocol, synthetic
//! panels, run configuration, model artifacts and the fusion ablation.

pub mod ablation;
pub mod artifact;
pub mod config;
pub mod descriptors;
pub mod panel;
pub mod protocol;
pub mod run;
pub mod synthetic;
pub mod transforms;

pub use ablation::{ablate_fusion, AblationReport};
pub use artifact::ModelArtifact;
pub use config::RunConfig;
pub use descriptors::DescriptorMap;
pub use panel::{load_panel, save_panel, PanelDataset, SeriesRecord};
pub use run::{stability_check, working_panel};
pub use protocol::{
    prepare, run_climatology, run_protocol, train_model, PreparedPanel, PreparedSeries, ProtocolMode, ProtocolOutcome,
    ProtocolSpec,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use transforms::{apply_transform, log_increment_transform, normalize_max_align, segment_episodes, TransformKind};
