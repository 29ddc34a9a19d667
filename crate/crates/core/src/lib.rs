pub mod checkpoint;
pub mod dataset;
pub mod evalsuite;
pub mod features;
pub mod gameopt;
pub mod lvsys;
pub mod nets;
pub mod par;
pub mod policy;
pub mod mixtracker;
pub mod baselines;
pub mod dataio;
