//! Experiment configuration.
//!
//! Every subcommand reads an optional TOML file with one table per
//! subcommand (`[gen-data]`, `[train]`, `[eval]`, `[track]`, `[baseline]`,
//! `[smooth]`). Keys are the snake_case names of the subcommand flags.
//! Unknown keys are rejected. Precedence: flag, then file, then default.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gantrack::dataset::SystemKind;
use gantrack::evalsuite::PoolMode;
use gantrack::features::ConditionEncoding;
use gantrack::gameopt::Preconditioning;
use gantrack::nets::{NoiseKind, ProfileName};

/// Parses a kebab-case enum value the same way the config file does.
pub fn parse_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

macro_rules! section {
    (
        $(#[$meta:meta])*
        $name:ident / $args:ident {
            $( $doc:literal $field:ident : $ty:ty = $default:expr => $shown:literal $([$($extra:tt)*])? ; )*
        }
        optional {
            $( $odoc:literal $ofield:ident : $oty:ty $([$($oextra:tt)*])? ; )*
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            $( #[doc = $doc] pub $field: $ty, )*
            $( #[doc = $odoc] pub $ofield: Option<$oty>, )*
        }

        impl Default for $name {
            fn default() -> Self {
                $name {
                    $( $field: $default, )*
                    $( $ofield: None, )*
                }
            }
        }

        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct $args {
            $(
                #[arg(long, help = concat!($doc, " [default: ", $shown, "]") $(, $($extra)*)?)]
                pub $field: Option<$ty>,
            )*
            $(
                #[arg(long, help = concat!($odoc, " [default: none]") $(, $($oextra)*)?)]
                pub $ofield: Option<$oty>,
            )*
        }

        impl $args {
            /// Overwrites `cfg` with every flag that was given.
            pub fn apply(&self, cfg: &mut $name) {
                $( if let Some(v) = &self.$field { cfg.$field = v.clone(); } )*
                $( if let Some(v) = &self.$ofield { cfg.$ofield = Some(v.clone()); } )*
            }
        }
    };
}

section! {
    /// Synthetic dataset generation.
    GenDataConfig / GenDataArgs {
        "System to simulate: lotka-volterra or constant-acceleration." system: SystemKind = SystemKind::LotkaVolterra => "lotka-volterra" [value_parser = parse_name::<SystemKind>];
        "Number of trajectories." cases: usize = 200 => "200";
        "Base random seed." seed: u64 = 0 => "0";
        "Integration step." dt: f64 = 0.05 => "0.05";
        "History steps T_h before the prediction start." history_steps: usize = 10 => "10";
        "Prediction horizon T in steps." horizon_steps: usize = 40 => "40";
        "Lower bound of the rate parameters a, b, c, d." param_min: f64 = 3.0 => "3";
        "Upper bound of the rate parameters." param_max: f64 = 5.0 => "5";
        "Lower bound of the initial populations." initial_min: f64 = 1.0 => "1";
        "Upper bound of the initial populations." initial_max: f64 = 3.0 => "3";
        "Dataset file; the manifest goes next to it as <stem>.manifest.json." out: PathBuf = PathBuf::from("dataset.json") => "dataset.json";
    }
    optional {}
}

section! {
    /// Adversarial training.
    TrainConfig / TrainArgs {
        "Dataset file written by gen-data." dataset: PathBuf = PathBuf::from("dataset.json") => "dataset.json";
        "Output directory for logs, curves and checkpoints." out_dir: PathBuf = PathBuf::from("runs/train") => "runs/train";
        "Network size: full or scaled." profile: ProfileName = ProfileName::Scaled => "scaled" [value_parser = parse_name::<ProfileName>];
        "Step size." alpha: f64 = 0.01 => "0.01";
        "Consensus weight; 0 is plain simultaneous gradient ascent." gamma: f64 = 0.33 => "0.33";
        "Train once for each of gamma = 0.00, 0.33, 1.00 and emit one curve each." sweep: bool = false => "false" [num_args = 0..=1, default_missing_value = "true"];
        "Number of updates." iterations: usize = 30_000 => "30000";
        "Pairs per minibatch." batch_size: usize = 64 => "64";
        "Iterations between log rows and checkpoints." log_every: usize = 100 => "100";
        "Pairs held out to score validation MAE." validation_size: usize = 256 => "256";
        "Base random seed." seed: u64 = 0 => "0";
        "Condition features: states or states-and-increments." encoding: ConditionEncoding = ConditionEncoding::StatesAndIncrements => "states-and-increments" [value_parser = parse_name::<ConditionEncoding>];
        "Generator noise: normal or uniform." noise: NoiseKind = NoiseKind::Normal => "normal" [value_parser = parse_name::<NoiseKind>];
        "Update scaling: rmsprop or raw." preconditioning: Preconditioning = Preconditioning::RmsProp => "rmsprop" [value_parser = parse_name::<Preconditioning>];
        "RMSProp decay." rho: f64 = 0.9 => "0.9";
        "RMSProp denominator offset." eps: f64 = 1e-8 => "0.00000001";
        "Stop when the gradient-field norm exceeds this." divergence_threshold: f64 = 1e6 => "1000000";
    }
    optional {}
}

section! {
    /// Distribution evaluation.
    EvalConfig / EvalArgs {
        "Use the exact integrator step instead of a checkpoint." oracle: bool = false => "false" [num_args = 0..=1, default_missing_value = "true"];
        "Number of rate sets m." m: usize = 20 => "20";
        "Rollouts per rate set n." n: usize = 50 => "50";
        "Rollout length T in steps." horizon: usize = 40 => "40";
        "History steps T_h; must match the checkpoint." history_steps: usize = 10 => "10";
        "Integration step; must match the checkpoint." dt: f64 = 0.05 => "0.05";
        "Base random seed." seed: u64 = 0 => "0";
        "Pooled values: terminal or all-steps." pool: PoolMode = PoolMode::Terminal => "terminal" [value_parser = parse_name::<PoolMode>];
        "Lower bound of the rate parameters." param_min: f64 = 3.0 => "3";
        "Upper bound of the rate parameters." param_max: f64 = 5.0 => "5";
        "Lower bound of the initial populations." initial_min: f64 = 1.0 => "1";
        "Upper bound of the initial populations." initial_max: f64 = 3.0 => "3";
        "Output directory." out_dir: PathBuf = PathBuf::from("runs/eval") => "runs/eval";
    }
    optional {
        "GAN checkpoint; required unless --oracle." checkpoint: PathBuf;
        "Expected network profile; a checkpoint of another profile is an error." profile: ProfileName [value_parser = parse_name::<ProfileName>];
    }
}

section! {
    /// Mixture particle tracking.
    TrackConfig / TrackArgs {
        "GAN checkpoint." checkpoint: PathBuf = PathBuf::from("runs/train/model.ckpt") => "runs/train/model.ckpt";
        "Dataset holding the tracked case." dataset: PathBuf = PathBuf::from("dataset.json") => "dataset.json";
        "Particles per component." particles: usize = 100 => "100";
        "Mixture components, each seeded from the case history." components: usize = 1 => "1";
        "Measurement noise standard deviation." sigma: f64 = 0.05 => "0.05";
        "Resample a component when ESS/N drops below this." ess_threshold: f64 = 0.5 => "0.5";
        "Standard deviation of the initial particle jitter." init_noise: f64 = 0.01 => "0.01";
        "Number of measurements." steps: usize = 40 => "40";
        "Base random seed." seed: u64 = 0 => "0";
        "Output directory." out_dir: PathBuf = PathBuf::from("runs/track") => "runs/track";
    }
    optional {
        "Case index in the dataset; defaults to the last case." case: usize;
    }
}

section! {
    /// Horizon-by-model comparison.
    BaselineConfig / BaselineArgs {
        "Dataset file." dataset: PathBuf = PathBuf::from("dataset.json") => "dataset.json";
        "GAN checkpoint." gan_checkpoint: PathBuf = PathBuf::from("runs/train/model.ckpt") => "runs/train/model.ckpt";
        "Fraction of cases held out for scoring." test_fraction: f64 = 0.2 => "0.2";
        "Horizons in seconds, comma separated." horizons: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0] => "1,2,3,4,5" [value_delimiter = ','];
        "Steps per second of horizon." steps_per_second: f64 = 10.0 => "10";
        "Base random seed." seed: u64 = 0 => "0";
        "GMR mixture components." gmr_components: usize = 8 => "8";
        "GMR covariance ridge." gmr_ridge: f64 = 1e-6 => "0.000001";
        "GMR EM iteration cap." gmr_max_iter: usize = 100 => "100";
        "Perturbed-network hidden layers." pnet_layers: usize = 5 => "5";
        "Perturbed-network layer width." pnet_width: usize = 128 => "128";
        "Standard deviation of the input perturbation." pnet_sigma: f64 = 0.1 => "0.1";
        "Perturbed-network training iterations." pnet_iterations: usize = 5000 => "5000";
        "Perturbed-network step size." pnet_alpha: f64 = 1e-3 => "0.001";
        "Output directory for the table and fitted baselines." out_dir: PathBuf = PathBuf::from("runs/baseline") => "runs/baseline";
    }
    optional {
        "Fitted GMR checkpoint; fitted on the training cases when absent." gmr_checkpoint: PathBuf;
        "Trained P-MLP checkpoint; trained when absent." p_mlp_checkpoint: PathBuf;
        "Trained P-LSTM checkpoint; trained when absent." p_lstm_checkpoint: PathBuf;
    }
}

section! {
    /// Trajectory smoothing.
    SmoothConfig / SmoothArgs {
        "Input CSV with agent_id,t,x,y[,vx,vy]." input: PathBuf = PathBuf::from("tracks.csv") => "tracks.csv";
        "Output CSV." output: PathBuf = PathBuf::from("smoothed.csv") => "smoothed.csv";
        "White-jerk spectral density per axis." jerk_density: f64 = 1.0 => "1";
        "Position measurement variance." position_var: f64 = 0.25 => "0.25";
        "Velocity measurement variance." velocity_var: f64 = 1.0 => "1";
        "Initial velocity and acceleration variance." initial_var: f64 = 100.0 => "100";
    }
    optional {}
}

/// The whole config file; every table is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub gen_data: Option<GenDataConfig>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalConfig>,
    pub track: Option<TrackConfig>,
    pub baseline: Option<BaselineConfig>,
    pub smooth: Option<SmoothConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}
