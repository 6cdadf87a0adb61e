//! Named experiment grids. Every cell of a recipe shares the seed, model and
//! pretraining settings, so one base model serves the whole grid.

use std::fmt;
use std::str::FromStr;

use crate::aggregation::{AggregatorName, AggregatorSpec};
use crate::config::{ExperimentConfig, PartitionName, PeftConfig, PeftKindName};
use crate::peft::LoraTarget;

pub const RECIPE_SEED: u64 = 4;

pub const KINDS: [PeftKindName; 3] = [PeftKindName::Lora, PeftKindName::Ia3, PeftKindName::Layernorm];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    /// Clean fine-tuning with each adapter kind.
    Fig3,
    /// Each adapter kind under 0, 1 and 5 malicious clients.
    Fig4,
    /// Each aggregator under three data settings with 3 malicious clients.
    Table2,
    /// Attack, fine-tuning and late alignment on a staggered schedule.
    Fig6,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::Fig3, Recipe::Fig4, Recipe::Table2, Recipe::Fig6];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::Fig3 => "fig3",
            Recipe::Fig4 => "fig4",
            Recipe::Table2 => "table2",
            Recipe::Fig6 => "fig6",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown recipe `{0}` (expected fig3, fig4, table2 or fig6)")]
pub struct UnknownRecipe(pub String);

impl FromStr for Recipe {
    type Err = UnknownRecipe;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| UnknownRecipe(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Shared settings of all recipe cells: rank-8 LoRA on every target,
/// response-only fine-tuning loss, 30 local steps at learning rate 3e-3.
pub fn recipe_base() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = RECIPE_SEED;
    c.peft.rank = 8;
    c.peft.targets = LoraTarget::ALL.to_vec();
    c.data.loss_on_response_only = true;
    c.federation.local_steps = 30;
    c.federation.optimizer.learning_rate = 3e-3;
    c
}

fn cell(name: String, base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Cell {
    let mut config = base.clone();
    config.output = base.output.join(&name);
    edit(&mut config);
    Cell { name, config }
}

/// PPSA schedule: attackers in rounds [0, 5), fine-tuners in [0, 10),
/// alignment clients in [10, 14).
pub fn apply_ppsa(c: &mut ExperimentConfig) {
    c.federation.rounds = 14;
    c.federation.clients.total = 15;
    c.federation.clients.malicious = 3;
    c.federation.clients.alignment = 3;
    c.federation.clients.benign = Some(9);
    c.federation.schedule.malicious = Some([0, 5]);
    c.federation.schedule.benign = Some([0, 10]);
    c.federation.schedule.alignment = Some([10, 14]);
}

pub fn cells(recipe: Recipe, base: &ExperimentConfig) -> Vec<Cell> {
    let kind_name = |k: PeftKindName| PeftConfig::of_kind(k).adapter_kind().name();
    match recipe {
        Recipe::Fig3 => KINDS
            .iter()
            .map(|&k| {
                cell(format!("{}_clean", kind_name(k)), base, |c| {
                    c.peft = PeftConfig { kind: k, ..base.peft.clone() };
                    c.federation.clients.malicious = 0;
                })
            })
            .collect(),
        Recipe::Fig4 => KINDS
            .iter()
            .flat_map(|&k| {
                [0usize, 1, 5].map(|m| {
                    cell(format!("{}_mal{m}", kind_name(k)), base, |c| {
                        c.peft = PeftConfig { kind: k, ..base.peft.clone() };
                        c.federation.clients.malicious = m;
                    })
                })
            })
            .collect(),
        Recipe::Table2 => AggregatorName::ALL
            .iter()
            .flat_map(|&a| {
                [PartitionName::IidA, PartitionName::IidB, PartitionName::Mixed].map(|p| {
                    cell(format!("{}_{}", a.as_str(), p.as_str()), base, |c| {
                        c.aggregator = AggregatorSpec {
                            name: a,
                            ..base.aggregator.clone()
                        };
                        c.aggregator.dnc.expected_malicious = 3;
                        c.data.partition = p;
                        c.federation.clients.malicious = 3;
                    })
                })
            })
            .collect(),
        Recipe::Fig6 => vec![cell("ppsa".into(), base, apply_ppsa)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes_and_validity() {
        let base = recipe_base();
        for (r, n) in [(Recipe::Fig3, 3), (Recipe::Fig4, 9), (Recipe::Table2, 15), (Recipe::Fig6, 1)] {
            let cells = cells(r, &base);
            assert_eq!(cells.len(), n, "{r}");
            for c in &cells {
                c.config.validate().unwrap_or_else(|e| panic!("{r}/{}: {e}", c.name));
                assert_eq!(c.config.seed, base.seed);
                assert_eq!(c.config.pretrain, base.pretrain);
            }
        }
        assert_eq!("table2".parse::<Recipe>().unwrap(), Recipe::Table2);
        assert!("fig5".parse::<Recipe>().is_err());
    }
}
