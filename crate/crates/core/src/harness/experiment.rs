//! Experiment configs, the leave-one-domain-out pipeline and run artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::eval::{domain_probe, evaluate, Accuracy, EvalReport};
use crate::data::{leave_one_domain_out, read_features, sample_few_shot, synth_generate, FeatureStore, SynthConfig};
use crate::error::{Error, Result};
use crate::objective::DEFAULT_TEMPERATURE;
use crate::prompt::Layout;
use crate::trainer::{train_with, Schedule, TrainConfig, TrainedRun};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where features come from: generated on the fly, or a DCF1 file/directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synth(SynthConfig),
    Path(PathBuf),
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synth(SynthConfig::default())
    }
}

impl DataSpec {
    /// Synthetic stores are rounded to 32-bit so that in-memory runs and runs
    /// from a written feature file see identical inputs.
    pub fn load(&self) -> Result<FeatureStore> {
        match self {
            DataSpec::Synth(cfg) => Ok(synth_generate(cfg)?.to_f32_precision()),
            DataSpec::Path(path) => read_features(path),
        }
    }
}

/// Strict JSON experiment description. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    /// Records per (class, source domain); `None` trains on every record.
    pub shots: Option<usize>,
    pub layouts: Vec<Layout>,
    /// Target domains to hold out in turn; empty means every domain.
    pub holdouts: Vec<String>,
    pub m: usize,
    pub d: usize,
    pub temperature: f64,
    pub lambda_max: f64,
    pub schedule: Schedule,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder_seed: Option<u64>,
    pub token_seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            shots: Some(16),
            layouts: vec![Layout::Dfp],
            holdouts: Vec::new(),
            m: 16,
            d: 64,
            temperature: DEFAULT_TEMPERATURE,
            lambda_max: 1.0,
            schedule: Schedule::Constant,
            lr: 0.05,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            encoder_seed: None,
            token_seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            context: "experiment config".into(),
            source: e,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn train_config(&self, layout: Layout, holdout: &str, dim: usize) -> TrainConfig {
        TrainConfig {
            layout,
            m: self.m,
            d: self.d,
            dim,
            temperature: self.temperature,
            lambda_max: self.lambda_max,
            schedule: self.schedule,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            holdout_domain: holdout.to_string(),
            encoder_seed: self.encoder_seed,
            token_seed: self.token_seed,
        }
    }

    fn holdouts_for(&self, store: &FeatureStore) -> Vec<String> {
        if self.holdouts.is_empty() {
            store.domain_names().to_vec()
        } else {
            self.holdouts.clone()
        }
    }
}

/// `CoOp` for the shared layout without adversary, `DiCoOp (DFP)` and so on
/// otherwise; a non-unit lambda is appended.
pub fn method_label(layout: Layout, lambda_max: f64) -> String {
    let upper = layout.to_string().to_uppercase();
    let mut label = match (layout, lambda_max == 0.0) {
        (Layout::Scp, true) => "CoOp".to_string(),
        (_, true) => format!("CoOp ({upper} split)"),
        (_, false) => format!("DiCoOp ({upper})"),
    };
    if lambda_max != 0.0 && lambda_max != 1.0 {
        label.push_str(&format!(" lambda={lambda_max}"));
    }
    label
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub tool: String,
    pub tool_version: String,
    /// Wall-clock creation time; the only field outside the determinism contract.
    pub created_unix: u64,
    pub method: String,
    pub data: DataSpec,
    pub shots: Option<usize>,
    pub run: TrainedRun,
    pub eval: EvalReport,
    pub domain_probe: Accuracy,
}

impl RunArtifact {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Json {
                context: "run artifact".into(),
                source: e,
            })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            context: "run artifact".into(),
            source: e,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Serialized form with the timestamp zeroed, for determinism checks.
    pub fn canonical_json(&self) -> Result<String> {
        RunArtifact {
            created_unix: 0,
            ..self.clone()
        }
        .to_json()
    }

    pub fn holdout(&self) -> &str {
        &self.run.config.holdout_domain
    }

    pub fn file_name(&self) -> String {
        format!("run-{}-{}.json", self.run.config.layout, self.holdout())
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Split, few-shot sample, train, evaluate on the held-out domain and probe
/// the source domains.
pub fn run_single(config: &ExperimentConfig, store: &FeatureStore, layout: Layout, holdout: &str) -> Result<RunArtifact> {
    let (train_split, test) = leave_one_domain_out(store, holdout).map_err(|e| e.context("split"))?;
    let sources = match config.shots {
        Some(n) => sample_few_shot(&train_split, n, config.seed).map_err(|e| e.context("few-shot sampling"))?,
        None => train_split,
    };
    let train_config = config.train_config(layout, holdout, store.dim());
    train_config.validate().map_err(|e| e.context("train config"))?;
    let (encoder, tokens) = train_config.frozen_model(store)?;
    let run = train_with(&train_config, &sources, &encoder, &tokens, |_| Ok(())).map_err(|e| e.context("training"))?;
    let eval = evaluate(&run, &test, &tokens, &encoder).map_err(|e| e.context("evaluation"))?;
    let probe = domain_probe(&run, &sources, &tokens, &encoder).map_err(|e| e.context("domain probe"))?;
    Ok(RunArtifact {
        tool: "dicoop".into(),
        tool_version: TOOL_VERSION.into(),
        created_unix: now_unix(),
        method: method_label(layout, config.lambda_max),
        data: config.data.clone(),
        shots: config.shots,
        run,
        eval,
        domain_probe: probe,
    })
}

/// One artifact per (layout, holdout) pair, in layout-major order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunArtifact>> {
    if config.layouts.is_empty() {
        return Err(Error::invalid("experiment needs at least one layout"));
    }
    let store = config.data.load().map_err(|e| e.context("loading data"))?;
    let jobs: Vec<(Layout, String)> = config
        .layouts
        .iter()
        .flat_map(|l| config.holdouts_for(&store).into_iter().map(move |h| (*l, h)))
        .collect();
    let run = |(layout, holdout): &(Layout, String)| {
        run_single(config, &store, *layout, holdout).map_err(|e| e.context(format!("layout {layout}, holdout {holdout}")))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(run).collect()
    }
}

pub fn write_artifacts(artifacts: &[RunArtifact], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    artifacts
        .iter()
        .map(|a| {
            let path = dir.join(a.file_name());
            a.write(&path).map(|_| path)
        })
        .collect()
}

/// Recomputes the held-out accuracy of a stored run. Without `data`, the
/// artifact's own data description is used.
pub fn reevaluate(artifact: &RunArtifact, data: Option<&Path>) -> Result<EvalReport> {
    let store = match data {
        Some(path) => read_features(path)?,
        None => artifact.data.load()?,
    };
    let (_, test) = leave_one_domain_out(&store, artifact.holdout())?;
    let (encoder, tokens) = artifact.run.config.frozen_model(&store)?;
    evaluate(&artifact.run, &test, &tokens, &encoder)
}
