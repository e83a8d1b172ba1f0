use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctxrank::eval::{evaluate, throughput_bench, write_metrics_table, MetricSelection, QrelSet};
use ctxrank::inference::{read_run, rerank_batch, write_run};
use ctxrank::io::{
    load_candidates, load_checkpoint, load_training_records, save_checkpoint, write_candidates,
    CandidateRecord,
};
use ctxrank::synthetic::ContextTask;
use ctxrank::training::{construct_training_instance, train, TrainingInstance};
use ctxrank::{parse_config, ModelConfig, ModelWeights};

#[derive(Parser)]
#[command(
    name = "ctxrank",
    version,
    about = "Context-aware reranking of passage embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint with the lowest validation loss.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Flat key = value file with model and trainer settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed` from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch JSON lines; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rerank candidate sets and write a run file.
    Rerank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "ctxrank")]
        tag: String,
    },
    /// Score a run file against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        cutoff: usize,
        #[arg(long, value_enum, default_value_t = Metric::Both)]
        metric: Metric,
        /// Metrics table destination; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Measure reranking throughput.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Timed calls.
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
    /// Rerank with structural components switched off.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        disable: Component,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "ctxrank-ablated")]
        tag: String,
    },
    /// Write a generated candidate file where relevance depends on document context.
    Synth {
        #[arg(long)]
        output: PathBuf,
        /// Also write the gold labels as qrels.
        #[arg(long)]
        qrels: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Ndcg,
    Mrr,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Pos,
    Hybrid,
    Both,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn instances(
    path: &Path,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<Vec<TrainingInstance>> {
    let records = load_training_records(path, Some(config.dim))
        .with_context(|| format!("reading {}", path.display()))?;
    records
        .into_iter()
        .map(|r| {
            construct_training_instance(
                &r.query_id,
                r.query_embedding,
                r.candidates,
                r.gold,
                config.k_max,
                rng,
            )
            .with_context(|| format!("{}: query `{}`", path.display(), r.query_id))
        })
        .collect()
}

fn load_model(path: &Path) -> anyhow::Result<ModelWeights<f32>> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn rerank_to_file(
    weights: &ModelWeights<f32>,
    input: &Path,
    output: &Path,
    tag: &str,
) -> anyhow::Result<()> {
    let sets = load_candidates(input, Some(weights.config.dim), weights.config.k_max)
        .with_context(|| format!("reading {}", input.display()))?;
    let lists = rerank_batch(&sets, weights)?;
    write_run(create(output)?, &lists, tag)?;
    eprintln!("reranked {} queries -> {}", lists.len(), output.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            train: train_path,
            val,
            config,
            out,
            seed,
            log,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("cannot read {}", config.display()))?;
            let (mut model, mut trainer) =
                parse_config(&text).with_context(|| format!("in {}", config.display()))?;
            if let Some(seed) = seed {
                model.seed = seed;
                trainer.seed = seed;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(trainer.seed);
            let train_set = instances(&train_path, &model, &mut rng)?;
            let val_set = instances(&val, &model, &mut rng)?;
            eprintln!(
                "training on {} queries, validating on {}, {} parameters",
                train_set.len(),
                val_set.len(),
                model.parameter_count()
            );

            let log_path = log.unwrap_or_else(|| {
                let mut name = out.clone().into_os_string();
                name.push(".log.jsonl");
                name.into()
            });
            let mut log_out = create(&log_path)?;
            let mut log_err = None;
            let weights = ModelWeights::<f64>::init(model)?;
            let outcome = train(&train_set, &val_set, weights, &trainer, |rec| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  val {:.5}  {:.1}s",
                    rec.epoch, rec.train_loss, rec.val_loss, rec.wall_seconds
                );
                let line = serde_json::to_string(rec).expect("record serializes");
                if let Err(e) = writeln!(log_out, "{line}").and_then(|_| log_out.flush()) {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e).with_context(|| format!("writing {}", log_path.display()));
            }
            save_checkpoint(&outcome.weights, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "best epoch {}{} -> {}",
                outcome.best_epoch,
                if outcome.stopped_early {
                    " (stopped early)"
                } else {
                    ""
                },
                out.display()
            );
        }
        Command::Rerank {
            model,
            input,
            output,
            tag,
        } => rerank_to_file(&load_model(&model)?, &input, &output, &tag)?,
        Command::Ablate {
            model,
            disable,
            input,
            output,
            tag,
        } => {
            let (pos, hybrid) = match disable {
                Component::Pos => (true, false),
                Component::Hybrid => (false, true),
                Component::Both => (true, true),
            };
            let weights = load_model(&model)?.ablated(pos, hybrid);
            rerank_to_file(&weights, &input, &output, &tag)?;
        }
        Command::Eval {
            run,
            qrels,
            cutoff,
            metric,
            output,
        } => {
            if cutoff == 0 {
                bail!("--cutoff must be at least 1");
            }
            let open = |p: &Path| {
                File::open(p)
                    .map(BufReader::new)
                    .with_context(|| format!("cannot read {}", p.display()))
            };
            let lists = read_run(open(&run)?, &run)?;
            let judgments = QrelSet::read(open(&qrels)?, &qrels)?;
            let per_query = evaluate(&lists, &judgments, cutoff);
            let selection = match metric {
                Metric::Ndcg => MetricSelection::Ndcg,
                Metric::Mrr => MetricSelection::Mrr,
                Metric::Both => MetricSelection::Both,
            };
            match output {
                Some(path) => write_metrics_table(create(&path)?, &per_query, cutoff, selection)?,
                None => {
                    write_metrics_table(std::io::stdout().lock(), &per_query, cutoff, selection)?
                }
            }
        }
        Command::Bench {
            model,
            input,
            batch,
            warmup,
            iters,
        } => {
            let weights = load_model(&model)?;
            let sets = load_candidates(&input, Some(weights.config.dim), weights.config.k_max)
                .with_context(|| format!("reading {}", input.display()))?;
            let r = throughput_bench(&weights, &sets, batch, warmup, iters)?;
            println!("queries/second: {:.2}", r.queries_per_second);
            println!(
                "per-call rate: {:.2} +/- {:.2} q/s, latency {:.3} +/- {:.3} ms (batch {}, {} timed, {} warmup)",
                r.qps_mean, r.qps_std, r.latency_mean_ms, r.latency_std_ms, r.batch, r.timed, r.warmup
            );
        }
        Command::Synth {
            output,
            qrels,
            queries,
            dim,
            seed,
        } => {
            let task = ContextTask {
                dim,
                queries,
                seed,
                ..ContextTask::default()
            };
            let sets = task.generate()?;
            let records: Vec<_> = sets.iter().map(CandidateRecord::from_set).collect();
            write_candidates(create(&output)?, &records)?;
            if let Some(path) = qrels {
                QrelSet::from_candidate_sets(&sets).write(create(&path)?)?;
            }
            eprintln!("wrote {} queries -> {}", sets.len(), output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
