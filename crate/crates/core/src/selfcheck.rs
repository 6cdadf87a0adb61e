//! Built-in verification suites run by the `selfcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregation::{verify, AggregatorName, AggregatorSpec, Aggregator, UpdateSet};
use crate::data::{self, Domain, Split, TaskWorld};
use crate::model::{self, forward, sequence_loss_on_tape, LossMask, ModelConfig, ModelError, TransformerWeights};
use crate::numerics::{grad_check_with_mutation, BackwardMutation, NumericError};
use crate::peft::{attach, AdapterKind, AdapterParams, LoraTarget};

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn from_result(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => Self {
                name,
                passed: true,
                detail,
            },
            Err(detail) => Self {
                name,
                passed: false,
                detail,
            },
        }
    }
}

/// The three adapter kinds, with LoRA covering every target.
pub fn all_kinds() -> Vec<AdapterKind> {
    vec![
        AdapterKind::Lora {
            rank: 2,
            targets: LoraTarget::ALL.to_vec(),
        },
        AdapterKind::Ia3,
        AdapterKind::LayerNorm,
    ]
}

fn to_numeric(e: ModelError) -> NumericError {
    match e {
        ModelError::Numeric(n) => n,
        other => NumericError::Graph(other.to_string()),
    }
}

/// Moves an adapter away from its identity initialization so that every
/// gradient path is exercised.
pub fn perturb(adapter: &mut AdapterParams, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = adapter.flatten();
    let moved: Vec<f64> = flat.0.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
    adapter.assign_flat(&moved).expect("same length");
}

/// Worst relative error between taped and finite-difference adapter
/// gradients of a two-sequence loss on the full model.
pub fn model_grad_error(
    w: &TransformerWeights,
    kind: &AdapterKind,
    mutation: Option<BackwardMutation>,
) -> Result<f64, NumericError> {
    let mut adapter = attach(w, kind, 11).map_err(|e| NumericError::Graph(e.to_string()))?;
    perturb(&mut adapter, 0.3, 12);
    let world = TaskWorld::new(3);
    let mut examples = data::gen_domain_corpus(&world, Domain::A, 1, 4, Split::Train);
    examples.extend(data::gen_domain_corpus(&world, Domain::B, 1, 5, Split::Train));
    let seqs = data::render_all(&examples, w.config.max_seq_len).map_err(|e| NumericError::Graph(e.to_string()))?;
    let params: Vec<_> = adapter.tensors().into_iter().cloned().collect();
    let report = grad_check_with_mutation(&params, GRAD_CHECK_STEP, mutation, |tape, vars| {
        let wv = w.register(tape, false);
        let av = adapter.bind(vars).map_err(|e| NumericError::Graph(e.to_string()))?;
        let mut total = None;
        for seq in &seqs {
            let l = sequence_loss_on_tape(tape, &w.config, &wv, Some(&av), seq, LossMask::AllTokens).map_err(to_numeric)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        Ok(total.expect("two sequences"))
    })?;
    Ok(report.max_relative_error)
}

/// A default-shaped model with O(1) weights, so gradients are far above
/// finite-difference noise.
pub fn check_base() -> TransformerWeights {
    let mut w = model::init_model(&ModelConfig::default()).expect("default config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for t in w.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    w
}

pub fn gradient_suite(mutation: Option<BackwardMutation>) -> SuiteResult {
    let w = check_base();
    let run = || -> Result<String, String> {
        let mut parts = Vec::new();
        for kind in all_kinds() {
            let err = model_grad_error(&w, &kind, mutation).map_err(|e| format!("{}: {e}", kind.name()))?;
            if err > GRAD_CHECK_TOL {
                return Err(format!("{}: max relative error {err:.3e} > {GRAD_CHECK_TOL:e}", kind.name()));
            }
            parts.push(format!("{} {err:.1e}", kind.name()));
        }
        Ok(parts.join(", "))
    };
    SuiteResult::from_result("gradients", run())
}

/// Random update sets with planted outliers, checked by [`verify`], plus
/// unanimity and permutation invariance.
pub fn aggregator_suite() -> SuiteResult {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.1).expect("valid std");
        let mut checks = 0;
        for trial in 0..20 {
            let n = 5 + trial % 6;
            let dim = 3 + trial % 9;
            let mut items: Vec<(u64, crate::peft::FlatUpdate)> = (0..n)
                .map(|_| {
                    let u: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
                    (rng.random_range(1..100), crate::peft::FlatUpdate(u))
                })
                .collect();
            items[0].1 = items[0].1.scaled(50.0);
            let set = UpdateSet::from_weighted(items.clone()).map_err(|e| e.to_string())?;
            let mut reversed = items;
            reversed.reverse();
            let rset = UpdateSet::new(
                reversed
                    .into_iter()
                    .enumerate()
                    .map(|(i, (weight, update))| crate::aggregation::UpdateEntry {
                        client_id: n - 1 - i,
                        weight,
                        update,
                    })
                    .collect(),
            )
            .map_err(|e| e.to_string())?;
            for name in AggregatorName::ALL {
                let spec = AggregatorSpec::named(name);
                let tol = spec.geomed.tolerance;
                let out = Aggregator::new(spec.clone())
                    .and_then(|mut a| a.aggregate(&set, trial))
                    .map_err(|e| format!("{}: {e}", name.as_str()))?;
                verify::verify(name, &set, &out, tol).map_err(|e| format!("{} trial {trial}: {e}", name.as_str()))?;
                let again = Aggregator::new(spec)
                    .and_then(|mut a| a.aggregate(&rset, trial))
                    .map_err(|e| format!("{}: {e}", name.as_str()))?;
                if again.update != out.update {
                    return Err(format!("{} trial {trial}: output depends on input order", name.as_str()));
                }
                checks += 2;
            }
        }
        let p = crate::peft::FlatUpdate(vec![0.25, -1.5, 3.0]);
        let same = UpdateSet::from_weighted(vec![(2, p.clone()), (5, p.clone()), (1, p.clone())]).map_err(|e| e.to_string())?;
        for name in AggregatorName::ALL {
            let out = Aggregator::new(AggregatorSpec::named(name))
                .and_then(|mut a| a.aggregate(&same, 0))
                .map_err(|e| e.to_string())?;
            if out.update != p {
                return Err(format!("{}: unanimous input not returned", name.as_str()));
            }
            checks += 1;
        }
        Ok(format!("{checks} checks"))
    };
    SuiteResult::from_result("aggregators", run())
}

/// Freshly attached adapters must leave logits bitwise unchanged.
pub fn identity_suite() -> SuiteResult {
    let w = check_base();
    let run = || -> Result<String, String> {
        let world = TaskWorld::new(5);
        let prompts: Vec<Vec<usize>> = data::gen_domain_corpus(&world, Domain::B, 4, 6, Split::Test)
            .iter()
            .map(data::render_prompt)
            .collect();
        for kind in all_kinds() {
            let adapter = attach(&w, &kind, 9).map_err(|e| e.to_string())?;
            for p in &prompts {
                let plain = forward(&w, None, p).map_err(|e| e.to_string())?;
                let adapted = forward(&w, Some(&adapter), p).map_err(|e| e.to_string())?;
                if plain != adapted {
                    return Err(format!("{} changes the forward pass at attach time", kind.name()));
                }
            }
        }
        Ok(format!("{} kinds x {} prompts", all_kinds().len(), prompts.len()))
    };
    SuiteResult::from_result("adapter identity", run())
}

pub fn run_selfcheck(mutation: Option<BackwardMutation>) -> Vec<SuiteResult> {
    vec![gradient_suite(mutation), aggregator_suite(), identity_suite()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suites_pass_and_mutation_is_caught() {
        let results = run_selfcheck(None);
        let names: Vec<_> = results.iter().map(|r| r.name).collect();
        assert_eq!(names, vec!["gradients", "aggregators", "adapter identity"]);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        let mutated = gradient_suite(Some(BackwardMutation::NegateMatMulLhs));
        assert!(!mutated.passed, "{}", mutated.detail);
    }
}
