use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use chirplab::attacks::{self, AttackBudget, AttackRecord, TargetEmbedding};
use chirplab::harness::{
    self, AttackKind, ExperimentConfig, ModeKind, ModeSpec,
};
use chirplab::models;
use chirplab::synth::{self, LabeledCorpus, Split};
use chirplab::training;

#[derive(Parser)]
#[command(
    name = "chirplab",
    about = "Adversarial attacks, adversarial training and robustness metrics on synthetic spectrogram classifiers"
)]
struct Cli {
    /// Experiment config JSON; defaults to the built-in full grid.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory (or file for single-file commands).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Reuse completed cells from a previous run of the same config.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus for a seed and export it to a directory.
    GenerateData,
    /// Train one (schema, mode) model and write its checkpoint and log.
    Train {
        /// Schema name from the config (e.g. linear, prototype).
        #[arg(long)]
        schema: String,
        /// Training mode: ot, at-e or at-o.
        #[arg(long)]
        mode: String,
    },
    /// Attack the test split with one attack kind and write per-step records.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// output-untargeted, embedding-untargeted or embedding-targeted.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        epsilon: f64,
        /// PGD iterations; step size is 2 * epsilon / steps.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Imported corpus directory; defaults to regenerating from config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the full experiment grid and write the robustness report.
    Evaluate,
    /// Rebuild report.csv and report.md from completed cells.
    Report,
    /// Write pooled embeddings of every instance to CSV.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let config = match path {
        Some(p) => serde_json::from_str(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    Ok(config)
}

fn corpus_for(config: &ExperimentConfig, seed: u64, data: &Option<PathBuf>) -> Result<LabeledCorpus> {
    match data {
        Some(dir) => Ok(synth::import_corpus(dir)?),
        None => Ok(synth::generate_corpus(&config.corpus_for_seed(seed))?),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli.config)?;
    config.validate()?;

    match cli.command {
        Command::GenerateData => {
            let corpus = synth::generate_corpus(&config.corpus_for_seed(cli.seed))?;
            synth::export_corpus(&corpus, &cli.out)?;
            println!(
                "wrote {} instances to {}",
                corpus.train.len() + corpus.val.len() + corpus.test.len(),
                cli.out.display()
            );
        }
        Command::Train { schema, mode } => {
            let schema_spec = config.find_schema(&schema)?;
            let Some(kind) = ModeKind::parse(&mode) else {
                bail!("unknown mode `{mode}` (expected ot, at-e or at-o)");
            };
            let mode_spec = config
                .modes
                .iter()
                .find(|m| m.kind == kind)
                .cloned()
                .unwrap_or(ModeSpec {
                    kind,
                    trades: match kind {
                        ModeKind::Ot => None,
                        ModeKind::AtE => Some(training::TradesAwpConfig::embedding_space()),
                        ModeKind::AtO => Some(training::TradesAwpConfig::output_space()),
                    },
                });
            let corpus = synth::generate_corpus(&config.corpus_for_seed(cli.seed))?;
            let training_mode = match mode_spec.kind {
                ModeKind::Ot => training::TrainingMode::Ordinary,
                _ => training::TrainingMode::Adversarial(mode_spec.trades.unwrap()),
            };
            let trainer = training::Trainer::new(
                &corpus,
                &schema_spec.schema,
                &config.optimizer,
                training_mode,
                cli.seed,
            )?;
            let (params, log) = trainer.run()?;
            fs::create_dir_all(&cli.out)?;
            let stem = format!("{}-{}-seed{}", schema, mode, cli.seed);
            let ckpt = cli.out.join(format!("{stem}.ckpt"));
            models::save_checkpoint(&params, &ckpt)?;
            fs::write(cli.out.join(format!("{stem}.csv")), log.to_csv())?;
            let last = log.epochs.last();
            println!(
                "trained {stem}: val cmAP {:.4} -> {}",
                last.map(|e| e.val_cmap).unwrap_or(f64::NAN),
                ckpt.display()
            );
        }
        Command::Attack {
            checkpoint,
            kind,
            epsilon,
            steps,
            data,
        } => {
            let Some(kind) = AttackKind::parse(&kind) else {
                bail!("unknown attack kind `{kind}`");
            };
            let params = models::load_checkpoint(&checkpoint)?;
            let corpus = corpus_for(&config, cli.seed, &data)?;
            let budget = AttackBudget {
                epsilon,
                alpha: 2.0 * epsilon / steps as f64,
                steps,
            };
            let mut records = Vec::new();
            for (index, instance) in corpus.split(Split::Test).iter().enumerate() {
                let example = match kind {
                    AttackKind::OutputUntargeted => attacks::pgd_output_untargeted(
                        &params,
                        &instance.input,
                        &instance.labels,
                        &budget,
                        &config.optimizer.loss,
                    )?,
                    AttackKind::EmbeddingUntargeted => {
                        attacks::pgd_embedding_untargeted(&params, &instance.input, &budget)?
                    }
                    AttackKind::EmbeddingTargeted => {
                        let total = params.schema().prototype_count();
                        if total == 0 {
                            bail!(
                                "targeted attacks need a prototype checkpoint; this one has a linear head"
                            );
                        }
                        let pick = chirplab::rng::Rng::derive(cli.seed, &[index as u64])
                            .below(total);
                        let target = TargetEmbedding::new(
                            params
                                .get(&format!("proto.{pick}"))
                                .expect("prototype layer")
                                .clone(),
                        )?;
                        attacks::pgd_embedding_targeted(&params, &instance.input, &target, &budget)?
                    }
                };
                records.push(AttackRecord::from_example(
                    instance.id.clone(),
                    kind.name(),
                    epsilon,
                    &example,
                ));
            }
            if let Some(parent) = cli.out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            attacks::write_attack_records(&cli.out, &records)?;
            println!("wrote {} attack records to {}", records.len(), cli.out.display());
        }
        Command::Evaluate => {
            let report = harness::run_experiment(&config, &cli.out, cli.resume)?;
            println!(
                "evaluated {} grid rows -> {}",
                report.rows.len(),
                cli.out.join("report.md").display()
            );
        }
        Command::Report => {
            let report = harness::reassemble_report(&config, &cli.out)?;
            println!(
                "reassembled {} rows -> {}",
                report.rows.len(),
                cli.out.join("report.md").display()
            );
        }
        Command::DumpEmbeddings { checkpoint, data } => {
            let params = models::load_checkpoint(&checkpoint)?;
            let corpus = corpus_for(&config, cli.seed, &data)?;
            if let Some(parent) = cli.out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            harness::dump_embeddings(&params, &corpus, &cli.out)?;
            println!("wrote embeddings to {}", cli.out.display());
        }
    }
    Ok(())
}
