//! The simulation-study grid: scenarios, sample-size levels and prior
//! choices.

use std::fmt;

use serde::{Deserialize, Serialize};
use vpmap_core::model::Hyperparameters;
use vpmap_core::priors::{GammaPcPrior, MixingPrior};
use vpmap_core::Result;

/// Total precision used by every scenario.
pub const SCENARIO_TAU: f64 = 1.0;
/// Space/time split used by every scenario.
pub const SCENARIO_PHI: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    SC1,
    SC2,
    SC3,
    SC4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Self::SC1, Self::SC2, Self::SC3, Self::SC4];

    pub fn gamma(self) -> f64 {
        match self {
            Self::SC1 => 0.0,
            Self::SC2 => 0.1,
            Self::SC3 => 1.0 / 3.0,
            Self::SC4 => 2.0 / 3.0,
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeLevel {
    Actual,
    Smaller,
    Larger,
}

impl SizeLevel {
    pub const ALL: [SizeLevel; 3] = [Self::Actual, Self::Smaller, Self::Larger];

    /// Multiplier applied to every population.
    pub fn factor(self) -> f64 {
        match self {
            Self::Actual => 1.0,
            Self::Smaller => 0.1,
            Self::Larger => 10.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Actual => "actual",
            Self::Smaller => "smaller",
            Self::Larger => "larger",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for SizeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PriorChoice {
    #[serde(rename = "pc_0.05")]
    Pc005,
    #[serde(rename = "pc_0.5")]
    Pc05,
    #[serde(rename = "pc_0.95")]
    Pc095,
    #[serde(rename = "uniform")]
    Uniform,
}

impl PriorChoice {
    pub const ALL: [PriorChoice; 4] = [Self::Pc005, Self::Pc05, Self::Pc095, Self::Uniform];
    pub const PC_TAIL: f64 = 0.99;

    pub fn name(self) -> &'static str {
        match self {
            Self::Pc005 => "pc_0.05",
            Self::Pc05 => "pc_0.5",
            Self::Pc095 => "pc_0.95",
            Self::Uniform => "uniform",
        }
    }

    pub fn upper(self) -> Option<f64> {
        match self {
            Self::Pc005 => Some(0.05),
            Self::Pc05 => Some(0.5),
            Self::Pc095 => Some(0.95),
            Self::Uniform => None,
        }
    }

    pub fn mixing_prior(self) -> Result<MixingPrior> {
        Ok(match self.upper() {
            Some(u) => MixingPrior::Pc(GammaPcPrior::elicit(u, Self::PC_TAIL)?),
            None => MixingPrior::Uniform,
        })
    }
}

impl fmt::Display for PriorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One cell of the simulation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub size_level: SizeLevel,
    pub prior_choice: PriorChoice,
    pub replicates: usize,
}

impl ScenarioSpec {
    pub fn hyperparameters(&self) -> Hyperparameters {
        Hyperparameters::new(SCENARIO_TAU, self.scenario.gamma(), SCENARIO_PHI)
    }

    /// Every combination in declaration order.
    pub fn grid(
        scenarios: &[Scenario],
        sizes: &[SizeLevel],
        priors: &[PriorChoice],
        replicates: usize,
    ) -> Vec<ScenarioSpec> {
        let mut out = Vec::new();
        for &scenario in scenarios {
            for &size_level in sizes {
                for &prior_choice in priors {
                    out.push(ScenarioSpec {
                        scenario,
                        size_level,
                        prior_choice,
                        replicates,
                    });
                }
            }
        }
        out
    }
}
