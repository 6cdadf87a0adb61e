//! Command implementations behind the `fedpeft` binary.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregation::{verify, AggregationError, Aggregator, AggregatorName, AggregatorSpec, UpdateEntry, UpdateSet};
use crate::config::ExperimentConfig;
use crate::evaluation::{MetricsRecord, CSV_HEADER};
use crate::experiment::{self, ExperimentError};
use crate::model::TransformerWeights;
use crate::numerics::BackwardMutation;
use crate::peft::FlatUpdate;
use crate::recipes::{self, Recipe};
use crate::selfcheck::{self, SuiteResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_GUARDRAIL: i32 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BASE_FILE: &str = "base.fpa";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub aggregator: String,
    pub peft: String,
    pub partition: String,
    pub malicious: usize,
    pub seed: u64,
    pub rounds: usize,
    pub final_acc_a: f64,
    pub final_acc_b: f64,
    pub final_asr_adv: f64,
    pub final_asr_jb: f64,
    pub peak_asr_adv: f64,
    pub peak_asr_jb: f64,
}

impl RunSummary {
    pub fn new(config: &ExperimentConfig, records: &[MetricsRecord]) -> Self {
        let last = records.last().expect("at least the round-0 record");
        let peak = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).fold(0.0, f64::max);
        Self {
            aggregator: config.aggregator.name.as_str().to_string(),
            peft: config.peft.adapter_kind().name().to_string(),
            partition: config.data.partition.as_str().to_string(),
            malicious: config.federation.clients.malicious,
            seed: config.seed,
            rounds: config.federation.rounds,
            final_acc_a: last.acc_a,
            final_acc_b: last.acc_b,
            final_asr_adv: last.asr_adv,
            final_asr_jb: last.asr_jb,
            peak_asr_adv: peak(|r| r.asr_adv),
            peak_asr_jb: peak(|r| r.asr_jb),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub snapshot: PathBuf,
    pub summary: PathBuf,
    pub records: Vec<MetricsRecord>,
}

/// Runs `config` on `base`, writing the config snapshot, the metrics CSV
/// (one row per round as it completes) and a JSON summary to `config.output`.
pub fn execute(config: &ExperimentConfig, base: &TransformerWeights) -> Result<RunArtifacts, ExperimentError> {
    let dir = &config.output;
    fs::create_dir_all(dir)?;
    let snapshot = dir.join(SNAPSHOT_FILE);
    fs::write(&snapshot, config.to_toml())?;
    let metrics = dir.join(METRICS_FILE);
    let mut csv = BufWriter::new(File::create(&metrics)?);
    writeln!(csv, "{CSV_HEADER}")?;
    let records = experiment::run_experiment_on(config, base, |r| {
        writeln!(csv, "{}", r.csv_row())?;
        csv.flush()
    })?;
    csv.flush()?;
    let summary = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&RunSummary::new(config, &records)).expect("summary serializes");
    fs::write(&summary, json + "\n")?;
    Ok(RunArtifacts {
        metrics,
        snapshot,
        summary,
        records,
    })
}

fn exit_code(e: &ExperimentError) -> i32 {
    match e {
        ExperimentError::Guardrail { .. } => EXIT_GUARDRAIL,
        _ => EXIT_ERROR,
    }
}

/// `run --config PATH [--seed N] [--out DIR]`.
pub fn cmd_run(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> i32 {
    let result = (|| {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.output = o;
        }
        config.validate()?;
        let base = experiment::prepare_base(&config)?;
        execute(&config, &base)
    })();
    match result {
        Ok(a) => {
            println!("wrote {}", a.metrics.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs every cell of `recipe` under `out`, then writes `out/summary.csv`.
/// The base model is cached in `out/base.fpa` unless the config names a
/// checkpoint.
pub fn run_recipe(recipe: Recipe, base_config: &ExperimentConfig, out: &Path) -> Result<Vec<(recipes::Cell, RunArtifacts)>, ExperimentError> {
    let mut base_config = base_config.clone();
    base_config.output = out.to_path_buf();
    if base_config.pretrain.checkpoint.is_none() {
        base_config.pretrain.checkpoint = Some(out.join(BASE_FILE));
    }
    let base = experiment::prepare_base(&base_config)?;
    let mut done = Vec::new();
    for cell in recipes::cells(recipe, &base_config) {
        info!("{recipe}/{}", cell.name);
        let artifacts = execute(&cell.config, &base)?;
        done.push((cell, artifacts));
    }
    let mut table = String::from(
        "cell,aggregator,peft,partition,malicious,final_acc_A,final_acc_B,final_asr_adv,final_asr_jb,peak_asr_adv,peak_asr_jb\n",
    );
    for (cell, a) in &done {
        let s = RunSummary::new(&cell.config, &a.records);
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            cell.name,
            s.aggregator,
            s.peft,
            s.partition,
            s.malicious,
            s.final_acc_a,
            s.final_acc_b,
            s.final_asr_adv,
            s.final_asr_jb,
            s.peak_asr_adv,
            s.peak_asr_jb
        ));
    }
    fs::write(out.join("summary.csv"), table)?;
    Ok(done)
}

/// `recipe NAME --out DIR`.
pub fn cmd_recipe(name: &str, out: &Path) -> i32 {
    let recipe = match name.parse::<Recipe>() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    match run_recipe(recipe, &recipes::recipe_base(), out) {
        Ok(done) => {
            for (cell, a) in &done {
                println!("{}: {}", cell.name, a.metrics.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn format_report(results: &[SuiteResult]) -> String {
    results
        .iter()
        .map(|r| format!("{} {}: {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))
        .collect()
}

/// `selfcheck`.
pub fn cmd_selfcheck(mutation: Option<BackwardMutation>) -> i32 {
    let results = selfcheck::run_selfcheck(mutation);
    print!("{}", format_report(&results));
    if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_ERROR
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AggcheckError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Parses `<weight> <hex wire bytes>` lines; blank lines and `#` comments
/// are skipped. Client ids follow line order.
pub fn parse_update_set<R: BufRead>(input: R) -> Result<UpdateSet, AggcheckError> {
    let mut entries = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| AggcheckError::Parse { line: i + 1, message };
        let (weight, payload) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| err("expected `<weight> <hex>`".into()))?;
        let weight: u64 = weight.parse().map_err(|e| err(format!("bad weight `{weight}`: {e}")))?;
        let bytes = hex::decode(payload.trim()).map_err(|e| err(format!("bad hex: {e}")))?;
        let update = FlatUpdate::from_bytes(&bytes).map_err(|e| err(e.to_string()))?;
        entries.push(UpdateEntry {
            client_id: entries.len(),
            weight,
            update,
        });
    }
    Ok(UpdateSet::new(entries)?)
}

pub fn format_update_line(weight: u64, update: &FlatUpdate) -> String {
    format!("{weight} {}", hex::encode(update.to_bytes()))
}

/// Output and verification status of every aggregator on `set`.
pub fn aggcheck_report(set: &UpdateSet) -> (String, bool) {
    let mut text = String::new();
    let mut all_ok = true;
    for name in AggregatorName::ALL {
        let mut spec = AggregatorSpec::named(name);
        if name == AggregatorName::Dnc {
            spec.dnc.expected_malicious = spec.dnc.expected_malicious.min(set.len().saturating_sub(1));
        }
        let tol = spec.geomed.tolerance;
        let line = match Aggregator::new(spec).and_then(|mut a| a.aggregate(set, 0)) {
            Ok(out) => {
                let status = match verify::verify(name, set, &out, tol) {
                    Ok(()) => "verified".to_string(),
                    Err(e) => {
                        all_ok = false;
                        format!("MISMATCH ({e})")
                    }
                };
                format!("{}: {:?} [{status}]", name.as_str(), out.update.0)
            }
            Err(e) => {
                all_ok = false;
                format!("{}: error: {e}", name.as_str())
            }
        };
        text.push_str(&line);
        text.push('\n');
    }
    (text, all_ok)
}

/// `aggcheck --input PATH`.
pub fn cmd_aggcheck(input: &Path) -> i32 {
    let set = match File::open(input)
        .map_err(AggcheckError::from)
        .and_then(|f| parse_update_set(BufReader::new(f)))
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", input.display());
            return EXIT_ERROR;
        }
    };
    println!("{} updates of dimension {}", set.len(), set.dim());
    let (text, ok) = aggcheck_report(&set);
    print!("{text}");
    if ok {
        EXIT_OK
    } else {
        EXIT_ERROR
    }
}
