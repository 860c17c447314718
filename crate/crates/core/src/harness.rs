//! Configuration-driven experiment runner: trains every (schema, mode, seed)
//! cell, evaluates the attack grid, and writes CSV rows plus Markdown
//! tables. Cells persist to disk, so an interrupted run resumes per
//! completed cell as long as the config hash matches. The harness only
//! orchestrates: corpora come from [`synth`], training from [`training`],
//! attacks from [`attacks`], and every number in the report from
//! [`metrics`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackBudget, AttackError, TargetEmbedding};
use crate::losses::AsymmetricLossConfig;
use crate::metrics::{self, MetricError};
use crate::models::{self, HeadKind, ModelError, ModelSchema, ParameterSet};
use crate::rng::Rng;
use crate::synth::{self, CorpusConfig, DataError, LabeledCorpus, Split};
use crate::training::{
    self, OptimizerConfig, TradesAwpConfig, TrainError, TrainingLog, TrainingMode,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("output directory holds state for config {found}, expected {expected}; refusing to resume")]
    ResumeMismatch { expected: String, found: String },
    #[error("targeted evaluation needs a prototype model or an explicit target")]
    MissingTargetSource,
    #[error("report grid incomplete; missing cells: {}", missing.join(", "))]
    IncompleteGrid { missing: Vec<String> },
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("cell file {path}: {message}")]
    CellParse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeKind {
    Ot,
    AtE,
    AtO,
}

impl ModeKind {
    pub fn name(self) -> &'static str {
        match self {
            ModeKind::Ot => "ot",
            ModeKind::AtE => "at-e",
            ModeKind::AtO => "at-o",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ot" => Some(ModeKind::Ot),
            "at-e" => Some(ModeKind::AtE),
            "at-o" => Some(ModeKind::AtO),
            _ => None,
        }
    }
}

/// Training mode plus its TRADES-AWP settings (adversarial modes only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSpec {
    pub kind: ModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trades: Option<TradesAwpConfig>,
}

impl ModeSpec {
    pub fn ordinary() -> Self {
        Self {
            kind: ModeKind::Ot,
            trades: None,
        }
    }

    pub fn adversarial_output() -> Self {
        Self {
            kind: ModeKind::AtO,
            trades: Some(TradesAwpConfig::output_space()),
        }
    }

    pub fn adversarial_embedding() -> Self {
        Self {
            kind: ModeKind::AtE,
            trades: Some(TradesAwpConfig::embedding_space()),
        }
    }

    fn training_mode(&self) -> Result<TrainingMode, HarnessError> {
        match self.kind {
            ModeKind::Ot => Ok(TrainingMode::Ordinary),
            ModeKind::AtE => {
                let cfg = self.trades.unwrap_or_else(TradesAwpConfig::embedding_space);
                if cfg.attack_space != training::AttackSpace::Embedding {
                    return Err(HarnessError::InvalidConfig(
                        "at-e mode configured with an output-space attack".into(),
                    ));
                }
                Ok(TrainingMode::Adversarial(cfg))
            }
            ModeKind::AtO => {
                let cfg = self.trades.unwrap_or_else(TradesAwpConfig::output_space);
                if cfg.attack_space != training::AttackSpace::Output {
                    return Err(HarnessError::InvalidConfig(
                        "at-o mode configured with an embedding-space attack".into(),
                    ));
                }
                Ok(TrainingMode::Adversarial(cfg))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    OutputUntargeted,
    EmbeddingUntargeted,
    EmbeddingTargeted,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::OutputUntargeted => "output-untargeted",
            AttackKind::EmbeddingUntargeted => "embedding-untargeted",
            AttackKind::EmbeddingTargeted => "embedding-targeted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "output-untargeted" => Some(AttackKind::OutputUntargeted),
            "embedding-untargeted" => Some(AttackKind::EmbeddingUntargeted),
            "embedding-targeted" => Some(AttackKind::EmbeddingTargeted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackGridEntry {
    pub kind: AttackKind,
    pub epsilons: Vec<f64>,
}

/// Named model schema inside an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub name: String,
    pub schema: ModelSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub optimizer: OptimizerConfig,
    pub schemas: Vec<SchemaSpec>,
    pub modes: Vec<ModeSpec>,
    pub attacks: Vec<AttackGridEntry>,
    pub pgd_steps: usize,
    pub tars_beta: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let epsilons = vec![0.001, 0.01, 0.05, 0.1, 0.2];
        Self {
            corpus: CorpusConfig::default(),
            optimizer: OptimizerConfig::default(),
            schemas: vec![
                SchemaSpec {
                    name: "linear".into(),
                    schema: ModelSchema::desk(HeadKind::Linear),
                },
                SchemaSpec {
                    name: "prototype".into(),
                    schema: ModelSchema::desk(HeadKind::Prototype),
                },
            ],
            modes: vec![
                ModeSpec::ordinary(),
                ModeSpec::adversarial_embedding(),
                ModeSpec::adversarial_output(),
            ],
            attacks: vec![
                AttackGridEntry {
                    kind: AttackKind::OutputUntargeted,
                    epsilons: epsilons.clone(),
                },
                AttackGridEntry {
                    kind: AttackKind::EmbeddingUntargeted,
                    epsilons: epsilons.clone(),
                },
                AttackGridEntry {
                    kind: AttackKind::EmbeddingTargeted,
                    epsilons,
                },
            ],
            pgd_steps: 10,
            tars_beta: 1.0,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schemas.is_empty() || self.modes.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "need at least one schema, mode and seed".into(),
            ));
        }
        if self.pgd_steps == 0 {
            return Err(HarnessError::InvalidConfig("pgd_steps must be >= 1".into()));
        }
        if !(self.tars_beta > 0.0) {
            return Err(HarnessError::InvalidConfig("tars_beta must be > 0".into()));
        }
        for entry in &self.attacks {
            if entry.epsilons.is_empty() {
                return Err(HarnessError::InvalidConfig(format!(
                    "attack {} has no epsilons",
                    entry.kind.name()
                )));
            }
            for &e in &entry.epsilons {
                if !(e > 0.0) {
                    return Err(HarnessError::InvalidConfig(format!(
                        "attack {} has non-positive epsilon {e}",
                        entry.kind.name()
                    )));
                }
            }
        }
        for spec in &self.modes {
            spec.training_mode()?;
        }
        for spec in &self.schemas {
            spec.schema
                .validate()
                .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
            if spec.schema.num_classes != self.corpus.num_classes
                || spec.schema.input_shape != self.corpus.input_shape
            {
                return Err(HarnessError::InvalidConfig(format!(
                    "schema `{}` does not match the corpus shape/classes",
                    spec.name
                )));
            }
        }
        self.corpus.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn find_schema(&self, name: &str) -> Result<&SchemaSpec, HarnessError> {
        self.schemas
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| HarnessError::UnknownSchema(name.to_string()))
    }

    /// Corpus config for one run seed: the corpus seed is derived from the
    /// configured base seed and the run seed.
    pub fn corpus_for_seed(&self, seed: u64) -> CorpusConfig {
        let mut cfg = self.corpus.clone();
        cfg.seed = Rng::derive(self.corpus.seed, &[seed]).next_u64();
        cfg
    }

    /// Attack cells applicable to a schema: targeted attacks need
    /// prototypes.
    fn applicable_attacks(&self, schema: &ModelSchema) -> Vec<(AttackKind, f64)> {
        let mut cells = Vec::new();
        for entry in &self.attacks {
            if entry.kind == AttackKind::EmbeddingTargeted
                && schema.head_kind != HeadKind::Prototype
            {
                continue;
            }
            for &eps in &entry.epsilons {
                cells.push((entry.kind, eps));
            }
        }
        cells
    }
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    /// Attack name or "none" for the clean-performance row.
    pub attack: String,
    pub epsilon: f64,
    pub clean_cmap: f64,
    pub adv_cmap: f64,
    pub prs: f64,
    pub drs: Option<f64>,
    pub tars: Option<f64>,
    pub wall_seconds: f64,
    /// max over instances of (linf(delta) - epsilon); feasibility excess.
    pub max_violation: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<ReportRow>,
}

/// Seed-mean of one (schema, mode, attack, epsilon) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub schema: String,
    pub mode: String,
    pub attack: String,
    pub epsilon: f64,
    pub seeds: usize,
    pub clean_cmap: f64,
    pub adv_cmap: f64,
    pub prs: f64,
    pub drs: Option<f64>,
    pub tars: Option<f64>,
}

impl RobustnessReport {
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(String, String, String, f64)> = Vec::new();
        for r in &self.rows {
            let key = (r.schema.clone(), r.mode.clone(), r.attack.clone(), r.epsilon);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(schema, mode, attack, epsilon)| {
                let group: Vec<&ReportRow> = self
                    .rows
                    .iter()
                    .filter(|r| {
                        r.schema == schema
                            && r.mode == mode
                            && r.attack == attack
                            && r.epsilon == epsilon
                    })
                    .collect();
                let n = group.len() as f64;
                let mean =
                    |f: &dyn Fn(&ReportRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
                let opt_mean = |f: &dyn Fn(&ReportRow) -> Option<f64>| {
                    let vals: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
                    if vals.is_empty() {
                        None
                    } else {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    }
                };
                AggregateRow {
                    schema,
                    mode,
                    attack,
                    epsilon,
                    seeds: group.len(),
                    clean_cmap: mean(&|r| r.clean_cmap),
                    adv_cmap: mean(&|r| r.adv_cmap),
                    prs: mean(&|r| r.prs),
                    drs: opt_mean(&|r| r.drs),
                    tars: opt_mean(&|r| r.tars),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "schema,mode,seed,attack,epsilon,clean_cmap,adv_cmap,prs,drs,tars,wall_seconds,max_violation\n",
        );
        for r in &self.rows {
            out.push_str(&row_to_csv(r));
        }
        out
    }
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row_to_csv(r: &ReportRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.schema,
        r.mode,
        r.seed,
        r.attack,
        r.epsilon,
        r.clean_cmap,
        r.adv_cmap,
        r.prs,
        opt_str(r.drs),
        opt_str(r.tars),
        r.wall_seconds,
        r.max_violation
    )
}

fn row_from_csv(line: &str, path: &Path) -> Result<ReportRow, HarnessError> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 12 {
        return Err(HarnessError::CellParse {
            path: path.display().to_string(),
            message: format!("expected 12 fields, got {}", parts.len()),
        });
    }
    let parse_f64 = |s: &str, what: &str| -> Result<f64, HarnessError> {
        s.parse().map_err(|_| HarnessError::CellParse {
            path: path.display().to_string(),
            message: format!("bad {what}: `{s}`"),
        })
    };
    let parse_opt = |s: &str, what: &str| -> Result<Option<f64>, HarnessError> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_f64(s, what).map(Some)
        }
    };
    Ok(ReportRow {
        schema: parts[0].to_string(),
        mode: parts[1].to_string(),
        seed: parts[2].parse().map_err(|_| HarnessError::CellParse {
            path: path.display().to_string(),
            message: format!("bad seed: `{}`", parts[2]),
        })?,
        attack: parts[3].to_string(),
        epsilon: parse_f64(parts[4], "epsilon")?,
        clean_cmap: parse_f64(parts[5], "clean_cmap")?,
        adv_cmap: parse_f64(parts[6], "adv_cmap")?,
        prs: parse_f64(parts[7], "prs")?,
        drs: parse_opt(parts[8], "drs")?,
        tars: parse_opt(parts[9], "tars")?,
        wall_seconds: parse_f64(parts[10], "wall_seconds")?,
        max_violation: parse_f64(parts[11], "max_violation")?,
    })
}

/// Where targeted attacks get their target vectors.
#[derive(Debug, Clone)]
pub enum TargetSource {
    /// One uniformly random prototype of the evaluated model per instance.
    Prototypes { seed: u64 },
    /// A single explicit target used for every instance.
    Explicit(TargetEmbedding),
}

/// Per-instance record of one targeted evaluation.
#[derive(Debug, Clone)]
pub struct TargetedDetail {
    pub instance_id: String,
    pub prototype_index: Option<usize>,
    pub dmin_clean: f64,
    pub dmin_adv: f64,
    pub drs: f64,
}

/// Full outcome of one (model, attack, epsilon) evaluation.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub clean_cmap: f64,
    pub adv_cmap: f64,
    pub prs: f64,
    pub drs: Option<f64>,
    pub tars: Option<f64>,
    pub wall_seconds: f64,
    pub max_violation: f64,
    pub targeted_details: Option<Vec<TargetedDetail>>,
}

/// Attacks every test instance and computes the robustness scores: PRS for
/// every kind, DRS and TARS for targeted attacks.
pub fn evaluate_robustness(
    params: &ParameterSet,
    corpus: &LabeledCorpus,
    kind: AttackKind,
    budget: &AttackBudget,
    target_source: Option<&TargetSource>,
    loss_cfg: &AsymmetricLossConfig,
    tars_beta: f64,
) -> Result<EvalOutcome, HarnessError> {
    let start = Instant::now();
    let test = corpus.split(Split::Test);
    let mut labels = Vec::with_capacity(test.len());
    let mut clean_scores = Vec::with_capacity(test.len());
    let mut adv_scores = Vec::with_capacity(test.len());
    let mut max_violation = f64::NEG_INFINITY;
    let mut details: Vec<TargetedDetail> = Vec::new();

    let targeted = kind == AttackKind::EmbeddingTargeted;
    if targeted {
        match target_source {
            Some(TargetSource::Explicit(_)) => {}
            Some(TargetSource::Prototypes { .. })
                if params.schema().head_kind == HeadKind::Prototype => {}
            _ => return Err(HarnessError::MissingTargetSource),
        }
    }

    for (index, instance) in test.iter().enumerate() {
        let clean_pred = models::predict(params, &instance.input)?;
        let example = match kind {
            AttackKind::OutputUntargeted => attacks::pgd_output_untargeted(
                params,
                &instance.input,
                &instance.labels,
                budget,
                loss_cfg,
            )?,
            AttackKind::EmbeddingUntargeted => {
                attacks::pgd_embedding_untargeted(params, &instance.input, budget)?
            }
            AttackKind::EmbeddingTargeted => {
                let (target, proto_idx) = match target_source.expect("checked above") {
                    TargetSource::Explicit(t) => (t.clone(), None),
                    TargetSource::Prototypes { seed } => {
                        let total = params.schema().prototype_count();
                        let pick = Rng::derive(*seed, &[index as u64]).below(total);
                        let vector = params
                            .get(&format!("proto.{pick}"))
                            .expect("prototype layer")
                            .clone();
                        (TargetEmbedding::new(vector)?, Some(pick))
                    }
                };
                let example =
                    attacks::pgd_embedding_targeted(params, &instance.input, &target, budget)?;
                let z_clean = models::embed(params, &instance.input)?;
                let z_adv = models::embed(params, &example.x_adv)?;
                let dmin_clean = attacks::d_min(&z_clean, &target)?;
                let dmin_adv = attacks::d_min(&z_adv, &target)?;
                details.push(TargetedDetail {
                    instance_id: instance.id.clone(),
                    prototype_index: proto_idx,
                    dmin_clean,
                    dmin_adv,
                    drs: metrics::drs_from_dmins(dmin_clean, dmin_adv),
                });
                example
            }
        };
        max_violation = max_violation.max(example.delta.max_abs() - budget.epsilon);
        let adv_pred = models::predict(params, &example.x_adv)?;
        labels.push(instance.labels.clone());
        clean_scores.push(clean_pred.scores);
        adv_scores.push(adv_pred.scores);
    }

    let clean_batch = metrics::EvaluationBatch::new(labels.clone(), clean_scores)?;
    let adv_batch = metrics::EvaluationBatch::new(labels, adv_scores)?;
    let clean_cmap = metrics::cmap(&clean_batch)?;
    let adv_cmap = metrics::cmap(&adv_batch)?;
    let prs = metrics::prs_from_cmaps(clean_cmap, adv_cmap);
    let (drs, tars) = if targeted {
        let mean_drs = details.iter().map(|d| d.drs).sum::<f64>() / details.len() as f64;
        (Some(mean_drs), Some(metrics::tars(prs, mean_drs, tars_beta)))
    } else {
        (None, None)
    };
    Ok(EvalOutcome {
        clean_cmap,
        adv_cmap,
        prs,
        drs,
        tars,
        wall_seconds: start.elapsed().as_secs_f64(),
        max_violation,
        targeted_details: targeted.then_some(details),
    })
}

/// Writes one CSV row per instance: id, split, labels, pooled embedding.
pub fn dump_embeddings(
    params: &ParameterSet,
    corpus: &LabeledCorpus,
    path: &Path,
) -> Result<(), HarnessError> {
    let d = params.schema().embedding_shape.2;
    let mut out = String::from("id,split,labels");
    for i in 0..d {
        let _ = write!(out, ",e{i}");
    }
    out.push('\n');
    for split in [Split::Train, Split::Val, Split::Test] {
        for instance in corpus.split(split) {
            let z = models::embed(params, &instance.input)?;
            let pooled = z.pooled();
            let _ = write!(
                out,
                "{},{},{}",
                instance.id,
                split.name(),
                instance
                    .labels
                    .iter()
                    .map(|&l| if l == 1.0 { '1' } else { '0' })
                    .collect::<String>()
            );
            for v in pooled {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String, HarnessError> {
    let json = serde_json::to_string(config)?;
    Ok(format!("{:016x}", fnv1a(json.as_bytes())))
}

struct CellPaths {
    checkpoint: PathBuf,
    log: PathBuf,
    rows: PathBuf,
    targeted: PathBuf,
}

fn cell_paths(out_dir: &Path, schema: &str, mode: &str, seed: u64) -> CellPaths {
    let stem = format!("{schema}-{mode}-seed{seed}");
    CellPaths {
        checkpoint: out_dir.join("checkpoints").join(format!("{stem}.ckpt")),
        log: out_dir.join("logs").join(format!("{stem}.csv")),
        rows: out_dir.join("cells").join(format!("{stem}.csv")),
        targeted: out_dir.join("targeted").join(format!("{stem}.csv")),
    }
}

fn train_cell(
    config: &ExperimentConfig,
    corpus: &LabeledCorpus,
    schema_spec: &SchemaSpec,
    mode_spec: &ModeSpec,
    seed: u64,
) -> Result<(ParameterSet, TrainingLog), HarnessError> {
    let mode = mode_spec.training_mode()?;
    let trainer =
        training::Trainer::new(corpus, &schema_spec.schema, &config.optimizer, mode, seed)?;
    Ok(trainer.run()?)
}

fn evaluate_cell(
    config: &ExperimentConfig,
    corpus: &LabeledCorpus,
    params: &ParameterSet,
    schema_spec: &SchemaSpec,
    mode_spec: &ModeSpec,
    seed: u64,
) -> Result<(Vec<ReportRow>, Vec<TargetedDetail>), HarnessError> {
    let mut rows = Vec::new();
    let mut targeted_details = Vec::new();

    // Clean-performance row: no attack.
    let start = Instant::now();
    let test = corpus.split(Split::Test);
    let mut labels = Vec::with_capacity(test.len());
    let mut scores = Vec::with_capacity(test.len());
    for instance in test {
        let pred = models::predict(params, &instance.input)?;
        labels.push(instance.labels.clone());
        scores.push(pred.scores);
    }
    let clean_batch = metrics::EvaluationBatch::new(labels, scores)?;
    let clean_cmap = metrics::cmap(&clean_batch)?;
    rows.push(ReportRow {
        schema: schema_spec.name.clone(),
        mode: mode_spec.kind.name().to_string(),
        seed,
        attack: "none".into(),
        epsilon: 0.0,
        clean_cmap,
        adv_cmap: clean_cmap,
        prs: 1.0,
        drs: None,
        tars: None,
        wall_seconds: start.elapsed().as_secs_f64(),
        max_violation: 0.0,
    });

    for (kind, epsilon) in config.applicable_attacks(&schema_spec.schema) {
        let budget = AttackBudget {
            epsilon,
            alpha: 2.0 * epsilon / config.pgd_steps as f64,
            steps: config.pgd_steps,
        };
        let target_source =
            (kind == AttackKind::EmbeddingTargeted).then(|| TargetSource::Prototypes {
                seed: Rng::derive(seed, &[0x7461_7267]).next_u64(),
            });
        let outcome = evaluate_robustness(
            params,
            corpus,
            kind,
            &budget,
            target_source.as_ref(),
            &config.optimizer.loss,
            config.tars_beta,
        )?;
        if let Some(details) = outcome.targeted_details {
            targeted_details.extend(details);
        }
        rows.push(ReportRow {
            schema: schema_spec.name.clone(),
            mode: mode_spec.kind.name().to_string(),
            seed,
            attack: kind.name().to_string(),
            epsilon,
            clean_cmap: outcome.clean_cmap,
            adv_cmap: outcome.adv_cmap,
            prs: outcome.prs,
            drs: outcome.drs,
            tars: outcome.tars,
            wall_seconds: outcome.wall_seconds,
            max_violation: outcome.max_violation,
        });
    }
    Ok((rows, targeted_details))
}

fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (&a.schema, &a.mode, a.seed, &a.attack)
            .cmp(&(&b.schema, &b.mode, b.seed, &b.attack))
            .then(a.epsilon.partial_cmp(&b.epsilon).expect("finite epsilon"))
    });
}

/// Runs (or resumes) the full experiment grid and writes the report files.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RobustnessReport, HarnessError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    for sub in ["checkpoints", "logs", "cells", "targeted"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let hash = config_hash(config)?;
    let hash_path = out_dir.join("config.hash");
    if hash_path.exists() {
        let found = fs::read_to_string(&hash_path)?.trim().to_string();
        if found != hash {
            if resume {
                return Err(HarnessError::ResumeMismatch {
                    expected: hash,
                    found,
                });
            }
            // Fresh run over stale state: clear per-cell artifacts.
            for sub in ["checkpoints", "logs", "cells", "targeted"] {
                let dir = out_dir.join(sub);
                fs::remove_dir_all(&dir).ok();
                fs::create_dir_all(&dir)?;
            }
        }
    }
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    fs::write(&hash_path, &hash)?;

    let mut cells: Vec<(u64, usize, usize)> = Vec::new();
    for &seed in &config.seeds {
        for (si, _) in config.schemas.iter().enumerate() {
            for (mi, _) in config.modes.iter().enumerate() {
                cells.push((seed, si, mi));
            }
        }
    }

    let results: Vec<Result<Vec<ReportRow>, HarnessError>> = cells
        .par_iter()
        .map(|&(seed, si, mi)| {
            let schema_spec = &config.schemas[si];
            let mode_spec = &config.modes[mi];
            let paths = cell_paths(out_dir, &schema_spec.name, mode_spec.kind.name(), seed);
            if resume && paths.rows.exists() {
                let text = fs::read_to_string(&paths.rows)?;
                return text
                    .lines()
                    .skip(1)
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| row_from_csv(l, &paths.rows))
                    .collect();
            }
            let corpus = synth::generate_corpus(&config.corpus_for_seed(seed))?;
            let (params, log) = if resume && paths.checkpoint.exists() {
                (models::load_checkpoint(&paths.checkpoint)?, None)
            } else {
                let (params, log) = train_cell(config, &corpus, schema_spec, mode_spec, seed)?;
                (params, Some(log))
            };
            if let Some(log) = log {
                fs::write(&paths.log, log.to_csv())?;
                models::save_checkpoint(&params, &paths.checkpoint)?;
            }
            let (rows, targeted) =
                evaluate_cell(config, &corpus, &params, schema_spec, mode_spec, seed)?;
            if !targeted.is_empty() {
                let mut detail_csv =
                    String::from("instance_id,prototype_index,dmin_clean,dmin_adv,drs\n");
                for d in &targeted {
                    let _ = writeln!(
                        detail_csv,
                        "{},{},{},{},{}",
                        d.instance_id,
                        d.prototype_index.map(|i| i.to_string()).unwrap_or_default(),
                        d.dmin_clean,
                        d.dmin_adv,
                        d.drs
                    );
                }
                fs::write(&paths.targeted, detail_csv)?;
            }
            let mut cell_csv = String::from(
                "schema,mode,seed,attack,epsilon,clean_cmap,adv_cmap,prs,drs,tars,wall_seconds,max_violation\n",
            );
            for r in &rows {
                cell_csv.push_str(&row_to_csv(r));
            }
            fs::write(&paths.rows, cell_csv)?;
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for result in results {
        rows.extend(result?);
    }
    sort_rows(&mut rows);
    let report = RobustnessReport { rows };
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("report.md"), render_report(config, &report)?)?;
    Ok(report)
}

/// Rebuilds the report files from completed cell files.
pub fn reassemble_report(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<RobustnessReport, HarnessError> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        for schema_spec in &config.schemas {
            for mode_spec in &config.modes {
                let paths = cell_paths(out_dir, &schema_spec.name, mode_spec.kind.name(), seed);
                if !paths.rows.exists() {
                    continue;
                }
                let text = fs::read_to_string(&paths.rows)?;
                for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                    rows.push(row_from_csv(line, &paths.rows)?);
                }
            }
        }
    }
    sort_rows(&mut rows);
    let report = RobustnessReport { rows };
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("report.md"), render_report(config, &report)?)?;
    Ok(report)
}

fn format_cell(value: f64, best: f64, second: f64) -> String {
    let s = format!("{value:.2}");
    if value == best {
        format!("**{s}**")
    } else if value == second {
        format!("<u>{s}</u>")
    } else {
        s
    }
}

fn best_and_second(values: &[f64]) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > best {
            second = best;
            best = v;
        } else if v > second && v < best {
            second = v;
        }
    }
    (best, second)
}

fn dedup_models(pairs: impl Iterator<Item = (String, String)>) -> Vec<(String, String)> {
    pairs.fold(Vec::new(), |mut acc, key| {
        if !acc.contains(&key) {
            acc.push(key);
        }
        acc
    })
}

/// Renders the Markdown tables: per-cell seed means, best bolded,
/// second-best underlined, two decimal places. Errors when any configured
/// grid cell is missing.
pub fn render_report(
    config: &ExperimentConfig,
    report: &RobustnessReport,
) -> Result<String, HarnessError> {
    let mut missing = Vec::new();
    for &seed in &config.seeds {
        for schema_spec in &config.schemas {
            for mode_spec in &config.modes {
                let mut expected = vec![("none".to_string(), 0.0)];
                for (kind, eps) in config.applicable_attacks(&schema_spec.schema) {
                    expected.push((kind.name().to_string(), eps));
                }
                for (attack, eps) in expected {
                    let hit = report.rows.iter().any(|r| {
                        r.schema == schema_spec.name
                            && r.mode == mode_spec.kind.name()
                            && r.seed == seed
                            && r.attack == attack
                            && r.epsilon == eps
                    });
                    if !hit {
                        missing.push(format!(
                            "{}/{}/seed{}/{}@{}",
                            schema_spec.name,
                            mode_spec.kind.name(),
                            seed,
                            attack,
                            eps
                        ));
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::IncompleteGrid { missing });
    }

    let aggregates = report.aggregates();
    let mut out = String::new();
    out.push_str("# Robustness report\n\n");
    let _ = writeln!(
        out,
        "Loss config: gamma_pos {}, gamma_neg {}, clip_margin {}; weight randomization: Gaussian; PGD steps {}; TARS beta {}; seeds {:?}.\n",
        config.optimizer.loss.gamma_pos,
        config.optimizer.loss.gamma_neg,
        config.optimizer.loss.clip_margin,
        config.pgd_steps,
        config.tars_beta,
        config.seeds
    );

    out.push_str("## Clean test performance (cmAP)\n\n| Model | cmAP |\n|---|---|\n");
    let clean_rows: Vec<&AggregateRow> =
        aggregates.iter().filter(|a| a.attack == "none").collect();
    let values: Vec<f64> = clean_rows.iter().map(|a| a.clean_cmap).collect();
    let (best, second) = best_and_second(&values);
    for a in &clean_rows {
        let _ = writeln!(
            out,
            "| {} ({}) | {} |",
            a.schema,
            a.mode.to_uppercase(),
            format_cell(a.clean_cmap, best, second)
        );
    }
    out.push('\n');

    for kind in [AttackKind::OutputUntargeted, AttackKind::EmbeddingUntargeted] {
        let Some(entry) = config.attacks.iter().find(|e| e.kind == kind) else {
            continue;
        };
        let _ = writeln!(out, "## PRS under {} attacks\n", kind.name());
        out.push_str("| Model |");
        for eps in &entry.epsilons {
            let _ = write!(out, " {eps} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(entry.epsilons.len()));
        out.push('\n');
        let models_list = dedup_models(
            aggregates
                .iter()
                .filter(|a| a.attack == kind.name())
                .map(|a| (a.schema.clone(), a.mode.clone())),
        );
        let columns: Vec<(f64, f64)> = entry
            .epsilons
            .iter()
            .map(|&eps| {
                let vals: Vec<f64> = aggregates
                    .iter()
                    .filter(|a| a.attack == kind.name() && a.epsilon == eps)
                    .map(|a| a.prs)
                    .collect();
                best_and_second(&vals)
            })
            .collect();
        for (schema, mode) in models_list {
            let _ = write!(out, "| {} ({}) |", schema, mode.to_uppercase());
            for (i, &eps) in entry.epsilons.iter().enumerate() {
                let a = aggregates
                    .iter()
                    .find(|a| {
                        a.attack == kind.name()
                            && a.schema == schema
                            && a.mode == mode
                            && a.epsilon == eps
                    })
                    .expect("grid verified complete");
                let (best, second) = columns[i];
                let _ = write!(out, " {} |", format_cell(a.prs, best, second));
            }
            out.push('\n');
        }
        out.push('\n');
    }

    if let Some(entry) = config
        .attacks
        .iter()
        .find(|e| e.kind == AttackKind::EmbeddingTargeted)
    {
        let rows: Vec<&AggregateRow> = aggregates
            .iter()
            .filter(|a| a.attack == AttackKind::EmbeddingTargeted.name())
            .collect();
        if !rows.is_empty() {
            out.push_str("## Targeted embedding-space attacks (prototype models)\n\n");
            out.push_str("| Model | Metric |");
            for eps in &entry.epsilons {
                let _ = write!(out, " {eps} |");
            }
            out.push_str("\n|---|---|");
            out.push_str(&"---|".repeat(entry.epsilons.len()));
            out.push('\n');
            let models_list =
                dedup_models(rows.iter().map(|a| (a.schema.clone(), a.mode.clone())));
            for metric in ["PRS", "DRS", "TARS"] {
                let value_of = |a: &AggregateRow| match metric {
                    "PRS" => Some(a.prs),
                    "DRS" => a.drs,
                    _ => a.tars,
                };
                let columns: Vec<(f64, f64)> = entry
                    .epsilons
                    .iter()
                    .map(|&eps| {
                        let vals: Vec<f64> = rows
                            .iter()
                            .filter(|a| a.epsilon == eps)
                            .filter_map(|a| value_of(a))
                            .collect();
                        best_and_second(&vals)
                    })
                    .collect();
                for (schema, mode) in &models_list {
                    let _ =
                        write!(out, "| {} ({}) | {} |", schema, mode.to_uppercase(), metric);
                    for (i, &eps) in entry.epsilons.iter().enumerate() {
                        let a = rows
                            .iter()
                            .find(|a| &a.schema == schema && &a.mode == mode && a.epsilon == eps)
                            .expect("grid verified complete");
                        let (best, second) = columns[i];
                        let v = value_of(a).unwrap_or(f64::NAN);
                        let _ = write!(out, " {} |", format_cell(v, best, second));
                    }
                    out.push('\n');
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn config_json_round_trip() {
        let config = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config_hash(&config).unwrap(), config_hash(&back).unwrap());
    }

    #[test]
    fn mode_space_mismatch_is_config_error() {
        let mut config = ExperimentConfig::default();
        config.modes = vec![ModeSpec {
            kind: ModeKind::AtE,
            trades: Some(TradesAwpConfig::output_space()),
        }];
        assert!(matches!(
            config.validate(),
            Err(HarnessError::InvalidConfig(_))
        ));
    }

    #[test]
    fn targeted_without_source_is_error() {
        let schema = ModelSchema::desk(HeadKind::Linear);
        let params = models::init_params(&schema, 1).unwrap();
        let corpus = synth::generate_corpus(&CorpusConfig {
            train_instances: 6,
            val_instances: 6,
            test_instances: 6,
            ..CorpusConfig::default()
        })
        .unwrap();
        let err = evaluate_robustness(
            &params,
            &corpus,
            AttackKind::EmbeddingTargeted,
            &AttackBudget::evaluation(0.05),
            Some(&TargetSource::Prototypes { seed: 1 }),
            &AsymmetricLossConfig::default(),
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::MissingTargetSource));
    }

    #[test]
    fn vanishing_epsilon_keeps_prs_at_one() {
        let schema = ModelSchema::desk(HeadKind::Linear);
        let params = models::init_params(&schema, 3).unwrap();
        let corpus = synth::generate_corpus(&CorpusConfig {
            train_instances: 6,
            val_instances: 6,
            test_instances: 8,
            ..CorpusConfig::default()
        })
        .unwrap();
        let outcome = evaluate_robustness(
            &params,
            &corpus,
            AttackKind::OutputUntargeted,
            &AttackBudget::evaluation(1e-12),
            None,
            &AsymmetricLossConfig::default(),
            1.0,
        )
        .unwrap();
        assert!((outcome.prs - 1.0).abs() < 1e-6);
        assert!(outcome.max_violation <= 1e-12);
    }

    #[test]
    fn dump_embeddings_row_count_and_determinism() {
        let schema = ModelSchema::desk(HeadKind::Linear);
        let params = models::init_params(&schema, 3).unwrap();
        let corpus = synth::generate_corpus(&CorpusConfig {
            train_instances: 6,
            val_instances: 6,
            test_instances: 6,
            ..CorpusConfig::default()
        })
        .unwrap();
        let dir = std::env::temp_dir().join(format!("chirplab-dump-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.csv");
        let p2 = dir.join("b.csv");
        dump_embeddings(&params, &corpus, &p1).unwrap();
        dump_embeddings(&params, &corpus, &p2).unwrap();
        let a = fs::read(&p1).unwrap();
        let b = fs::read(&p2).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 1 + 18);
        // Pooled embedding equals the spatial mean, re-derived here.
        let first_data_line = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = first_data_line.split(',').collect();
        let z = models::embed(&params, &corpus.train[0].input).unwrap();
        let pooled = z.pooled();
        for (i, v) in pooled.iter().enumerate() {
            let got: f64 = fields[3 + i].parse().unwrap();
            assert!((got - v).abs() < 1e-12);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn render_reports_missing_cells() {
        let config = ExperimentConfig::default();
        let report = RobustnessReport { rows: Vec::new() };
        let err = render_report(&config, &report).unwrap_err();
        match err {
            HarnessError::IncompleteGrid { missing } => {
                assert!(!missing.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aggregates_mean_over_seeds() {
        let mk = |seed: u64, prs: f64| ReportRow {
            schema: "linear".into(),
            mode: "ot".into(),
            seed,
            attack: "output-untargeted".into(),
            epsilon: 0.05,
            clean_cmap: 0.8,
            adv_cmap: 0.4,
            prs,
            drs: None,
            tars: None,
            wall_seconds: 1.0,
            max_violation: 0.0,
        };
        let report = RobustnessReport {
            rows: vec![mk(1, 0.4), mk(2, 0.6)],
        };
        let agg = report.aggregates();
        assert_eq!(agg.len(), 1);
        assert!((agg[0].prs - 0.5).abs() < 1e-15);
        assert_eq!(agg[0].seeds, 2);
    }
}
