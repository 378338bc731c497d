//! Batch extraction over a corpus directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use oncex_core::corpus::{ingest_corpus, list_patients};
use oncex_core::pipeline::{Clients, CompletionConfig, EmbeddingConfig, Pipeline};
use oncex_core::retrieval::{EmbeddingProvider, HashEmbedder, HttpEmbedder};
use oncex_core::schema::SchemaRegistry;
use oncex_core::synthesis::{HttpCompletionClient, MockSynthesizer, SynthesizerClient};

use crate::{io_err, HarnessError};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: PathBuf,
    pub corpus_root: PathBuf,
    pub output_dir: PathBuf,
    pub mock_fixtures: Option<PathBuf>,
    pub parallel: usize,
    pub keep_going: bool,
    /// Overrides the config's `run_date`; defaults to the local date.
    pub today: Option<NaiveDate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EntityFailure {
    pub patient_id: String,
    pub entity: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub patients: Vec<String>,
    pub failures: Vec<EntityFailure>,
    pub warnings: Vec<String>,
}

impl RunSummary {
    /// Exit status for the run: entity aborts fail it unless tolerated.
    pub fn exit_code(&self, keep_going: bool) -> i32 {
        if self.failures.is_empty() || keep_going {
            0
        } else {
            1
        }
    }
}

pub fn make_embedder(cfg: &EmbeddingConfig) -> Box<dyn EmbeddingProvider> {
    match cfg {
        EmbeddingConfig::Hash { seed, dimension } => Box::new(HashEmbedder::new(*seed, *dimension)),
        EmbeddingConfig::Http {
            endpoint,
            dimension,
            timeout_secs,
        } => Box::new(HttpEmbedder::new(endpoint.clone(), *dimension, Duration::from_secs(*timeout_secs))),
    }
}

pub fn make_synthesizer(
    mock_fixtures: Option<&Path>,
    completion: Option<&CompletionConfig>,
) -> Result<Box<dyn SynthesizerClient>, HarnessError> {
    match (mock_fixtures, completion) {
        (Some(path), _) => Ok(Box::new(MockSynthesizer::load(path).map_err(HarnessError::Config)?)),
        (None, Some(c)) => Ok(Box::new(HttpCompletionClient::new(
            c.endpoint.clone(),
            c.model.clone(),
            Duration::from_secs(c.timeout_secs),
        ))),
        (None, None) => Err(HarnessError::Config(
            "no synthesizer: pass --mock-fixtures or set `completion` in the config".into(),
        )),
    }
}

pub fn load_pipeline(config: &Path) -> Result<Pipeline, HarnessError> {
    if !config.is_file() {
        return Err(HarnessError::MissingInput(config.to_path_buf()));
    }
    Pipeline::load(config, SchemaRegistry::bundled()).map_err(|e| HarnessError::Config(format!("{}: {e}", config.display())))
}

/// Runs every patient under the corpus root and writes
/// `<out>/<patient>.json` plus `<out>/audit/<patient>.json`.
pub fn run_cohort(opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    let pipeline = load_pipeline(&opts.config)?;
    if !opts.corpus_root.is_dir() {
        return Err(HarnessError::MissingInput(opts.corpus_root.clone()));
    }
    let synthesizer = make_synthesizer(opts.mock_fixtures.as_deref(), pipeline.config.completion.as_ref())?;
    let embedder = make_embedder(&pipeline.config.embedding);
    let today = opts
        .today
        .or(pipeline.config.run_date)
        .unwrap_or_else(|| chrono::Local::now().date_naive());
    let patients = list_patients(&opts.corpus_root).map_err(|e| HarnessError::Run(e.to_string()))?;

    let mut summary = RunSummary::default();
    if patients.is_empty() {
        let msg = format!("no patient directories under {}", opts.corpus_root.display());
        warn!("{msg}");
        summary.warnings.push(msg);
        return Ok(summary);
    }
    let audit_dir = opts.output_dir.join("audit");
    fs::create_dir_all(&audit_dir).map_err(io_err(&audit_dir))?;

    let clients = Clients {
        synthesizer: synthesizer.as_ref(),
        embedder: embedder.as_ref(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallel.max(1))
        .build()
        .map_err(|e| HarnessError::Run(e.to_string()))?;
    let chunk_size = pipeline.config.chunk_size;
    let results: Vec<Result<Vec<EntityFailure>, HarnessError>> = pool.install(|| {
        patients
            .par_iter()
            .map(|pid| {
                let corpus = ingest_corpus(&opts.corpus_root, pid, chunk_size).map_err(|e| HarnessError::Run(e.to_string()))?;
                let run = pipeline
                    .run_patient(&corpus, clients, today)
                    .map_err(|e| HarnessError::Run(format!("{pid}: {e}")))?;
                let out = opts.output_dir.join(format!("{pid}.json"));
                fs::write(&out, run.record.to_json()).map_err(io_err(&out))?;
                let audit = audit_dir.join(format!("{pid}.json"));
                fs::write(&audit, run.audit.to_json()).map_err(io_err(&audit))?;
                info!("{pid}: {} instances", run.record.instances.len());
                Ok(run
                    .audit
                    .failed_entities()
                    .map(|e| EntityFailure {
                        patient_id: pid.clone(),
                        entity: e.entity.clone(),
                        error: e.error.clone().unwrap_or_default(),
                    })
                    .collect())
            })
            .collect()
    });
    for r in results {
        summary.failures.extend(r?);
    }
    for f in &summary.failures {
        warn!("{}: entity {} aborted: {}", f.patient_id, f.entity, f.error);
    }
    summary.patients = patients;
    Ok(summary)
}
