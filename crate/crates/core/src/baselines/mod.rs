//! Comparison predictors: constant-acceleration extrapolation, Gaussian
//! mixture regression and input-perturbed regression networks.

pub mod cam;
pub mod gmr;
pub mod pnet;
pub mod table;

pub use cam::{cam_next, cam_predict, CamModel, HistoryTooShort};
pub use gmr::{GmrConfig, GmrError, GmrModel, GmrPolicy};
pub use pnet::{pnet_train, PerturbedNet, PnetConfig, PnetKind, PnetTrainConfig};
pub use table::{horizon_steps, horizon_table, HorizonTable, MODEL_COLUMNS};
