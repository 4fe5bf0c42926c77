//! Experiment orchestration on top of the probes: cross-validated grid
//! search, seed replication, transfer and affinity studies, cost accounting
//! and report generation.

pub mod config;
pub mod cost;
pub mod cv;
pub mod evaluate;
pub mod experiments;
pub mod report;
pub mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use config::{ExperimentConfig, HyperGrid};
pub use cost::{cost_report, CostInputs, CostReport, FRACTION_GRID};
pub use cv::{grid_search, kfold_split, Fold, GridOutcome};
pub use evaluate::{evaluate, evaluate_with, write_outputs, EvaluationOutput};
pub use experiments::*;
pub use report::{write_csv, ResultRow};
pub use stats::{median, spearman, std_dev};

/// Adaptation methods compared by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Linear,
    #[serde(rename = "head2toe")]
    Head2Toe,
    AllL1,
    AllL2,
    AllL21,
    Scratch,
    #[serde(rename = "finetune")]
    FineTune,
    #[serde(rename = "head2toe_ft")]
    Head2ToeFt,
    #[serde(rename = "head2toe_ft_plus")]
    Head2ToeFtPlus,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Linear,
        Method::Head2Toe,
        Method::AllL1,
        Method::AllL2,
        Method::AllL21,
        Method::Scratch,
        Method::FineTune,
        Method::Head2ToeFt,
        Method::Head2ToeFtPlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Head2Toe => "head2toe",
            Method::AllL1 => "all_l1",
            Method::AllL2 => "all_l2",
            Method::AllL21 => "all_l21",
            Method::Scratch => "scratch",
            Method::FineTune => "finetune",
            Method::Head2ToeFt => "head2toe_ft",
            Method::Head2ToeFtPlus => "head2toe_ft_plus",
        }
    }
}


impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}
