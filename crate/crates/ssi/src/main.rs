//! Pipeline orchestration: prepare or synthesize a corpus, pretrain the
//! consistency teachers, distill the student, evaluate, sweep layer counts.
//!
//! Exit codes: 0 ok, 1 usage/config, 2 data error, 3 numeric divergence.

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ssi::config::RunConfig;
use ssi::data::{self, Dataset, Format};
use ssi::encoder::{next_item_scores, Encoder};
use ssi::error::{Error, Result};
use ssi::eval::{evaluate, MetricsReport, Split};
use ssi::imitation::{distill, student_scorer, DistillOutcome};
use ssi::ssl::{load_teacher, pretrain, save_teacher, train_sequences, TaskKind, TeacherMeta};
use ssi::student::{load_student, save_student, Student};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "ssi", version, about = "Consistency-teacher distillation laboratory")]
struct Cli {
    /// TOML run configuration; every key has a default, so the flag is
    /// optional and an empty file is valid.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest a raw interaction dump into the cached corpus format.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// "amazon-csv" or "sessions-jsonl".
        #[arg(long)]
        format: String,
        /// Output corpus directory (default: [data].corpus_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic Markov corpus from the [data] section.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain one consistency teacher on the cached corpus.
    Pretrain {
        /// "temporal", "persona", or "global".
        #[arg(long)]
        task: String,
        /// Checkpoint directory (default: <out_dir>/teacher-<task>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill teacher checkpoints into a student recommender.
    Distill {
        /// Comma-separated teacher checkpoint directories.
        #[arg(long, value_delimiter = ',')]
        teachers: Vec<PathBuf>,
        /// Override [student].arch: "recurrent" or "gated".
        #[arg(long)]
        student: Option<String>,
        /// Disable prediction-distribution imitation.
        #[arg(long)]
        no_pred_imitation: bool,
        /// Disable representation imitation.
        #[arg(long)]
        no_repr_imitation: bool,
        /// Checkpoint directory (default: <out_dir>/student).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a teacher or student checkpoint with sampled negatives.
    Eval {
        /// Checkpoint directory (teacher or student).
        #[arg(long)]
        model: PathBuf,
        /// "valid" or "test".
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// NDCG@10 vs. teacher depth: teacher-only against the distilled student.
    SweepLayers {
        /// Comma-separated layer counts, e.g. 1,2,4.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        /// CSV output path (default: <out_dir>/sweep-layers.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code for usage errors is 2; the contract is 1.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    init_threads(&cfg)?;
    let started = Instant::now();
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    match cli.cmd {
        Cmd::Prepare { input, format, out } => {
            let format = Format::from_str(&format)?;
            let dataset = data::ingest(&input, format)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.data.corpus_dir));
            data::save_corpus(&dir, &dataset)?;
            print_stats(&dataset);
            write_manifest(&out_dir, "prepare", &cfg, started)?;
        }
        Cmd::Synth { out } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
            let dataset = data::synthetic::generate_synthetic(&cfg.data.synthetic_spec(), &mut rng)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.data.corpus_dir));
            data::save_corpus(&dir, &dataset)?;
            print_stats(&dataset);
            write_manifest(&out_dir, "synth", &cfg, started)?;
        }
        Cmd::Pretrain { task, out } => {
            let task = TaskKind::from_str(&task)?;
            let dataset = load_corpus(&cfg)?;
            let split = data::split(&dataset)?;
            let train = train_sequences(&split);
            let enc_cfg = cfg.encoder.to_encoder_config(dataset.vocab.size());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ task_seed_tag(task));
            let mut encoder: Encoder<f32> = Encoder::new(enc_cfg.clone(), &mut rng)?;
            let pre_cfg = cfg.ssl.to_pretrain_config(cfg.run.seed);
            let log = pretrain(task, &mut encoder, &train, &pre_cfg)?;

            let dir = out.unwrap_or_else(|| out_dir.join(format!("teacher-{task}")));
            let meta = TeacherMeta {
                task,
                encoder: enc_cfg,
                config_hash: cfg.hash(),
                steps: pre_cfg.steps,
                final_mlm: log.last().map(|l| l.l_mlm).unwrap_or(f64::NAN),
                final_task: log.last().map(|l| l.l_task).unwrap_or(f64::NAN),
            };
            save_teacher(&dir, &encoder, &meta)?;
            write_jsonl(&out_dir.join(format!("pretrain-{task}.jsonl")), &log)?;
            println!(
                "pretrained {task} teacher: {} steps, final L_mlm={:.4} L_task={:.4} -> {}",
                pre_cfg.steps,
                meta.final_mlm,
                meta.final_task,
                dir.display()
            );
            write_manifest(&out_dir, &format!("pretrain-{task}"), &cfg, started)?;
        }
        Cmd::Distill { teachers, student, no_pred_imitation, no_repr_imitation, out } => {
            let dataset = load_corpus(&cfg)?;
            let loaded = load_teachers(&teachers)?;
            let mut student_cfg = cfg.student.to_student_config(dataset.vocab.size())?;
            if let Some(arch) = student {
                student_cfg.arch = FromStr::from_str(&arch)?;
            }
            let mut di_cfg = cfg.imitation.to_distill_config(cfg.run.seed, cfg.eval.seed)?;
            if no_pred_imitation {
                di_cfg.pred_imitation = false;
            }
            if no_repr_imitation {
                di_cfg.repr_imitation = false;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x5354_5544_454e_54);
            let mut student = Student::<f32>::new(student_cfg, &mut rng)?;
            let outcome: DistillOutcome = distill(&mut student, &loaded, &dataset, &di_cfg)?;

            let dir = out.unwrap_or_else(|| out_dir.join("student"));
            save_student(&dir, &student)?;
            write_jsonl(&out_dir.join("distill.jsonl"), &outcome.epochs)?;
            if let Some(last) = outcome.epochs.last() {
                println!(
                    "distilled student ({} teachers): val Recall@10={:.4} NDCG@10={:.4} λ={:?} -> {}",
                    loaded.len(),
                    last.val_recall10,
                    last.val_ndcg10,
                    last.lambda,
                    dir.display()
                );
            }
            write_manifest(&out_dir, "distill", &cfg, started)?;
        }
        Cmd::Eval { model, split } => {
            let split = Split::from_str(&split)?;
            let dataset = load_corpus(&cfg)?;
            let report = eval_checkpoint(&model, split, &dataset, cfg.eval.seed)?;
            println!("{}", report.table());
            let json_path = out_dir.join("eval-report.json");
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(&json_path, serde_json::to_vec_pretty(&report)?)?;
            println!("report written to {}", json_path.display());
            write_manifest(&out_dir, "eval", &cfg, started)?;
        }
        Cmd::SweepLayers { layers, out } => {
            if layers.is_empty() {
                return Err(Error::Config("sweep-layers needs a non-empty layer list".into()));
            }
            let csv_path = out.unwrap_or_else(|| out_dir.join("sweep-layers.csv"));
            sweep_layers(&cfg, &layers, &csv_path)?;
            println!("sweep written to {}", csv_path.display());
            write_manifest(&out_dir, "sweep-layers", &cfg, started)?;
        }
    }
    Ok(())
}

/// Thread cap: SSI_THREADS beats [run].threads; 0 means all cores. Applied
/// once to the global worker pool (no-op without the parallel feature).
fn init_threads(cfg: &RunConfig) -> Result<()> {
    let n = match std::env::var("SSI_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("SSI_THREADS must be an integer, got {v:?}")))?,
        Err(_) => cfg.run.threads,
    };
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn task_seed_tag(task: TaskKind) -> u64 {
    match task {
        TaskKind::Temporal => 0x54454d50,
        TaskKind::Persona => 0x50455253,
        TaskKind::Global => 0x474c4f42,
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Dataset> {
    let dir = PathBuf::from(&cfg.data.corpus_dir);
    data::load_corpus(&dir).map_err(|e| match e {
        Error::Io(_) | Error::MissingArtifact(_) => Error::MissingArtifact(format!(
            "no corpus at {}; run `ssi prepare` or `ssi synth` first",
            dir.display()
        )),
        other => other,
    })
}

fn load_teachers(dirs: &[PathBuf]) -> Result<Vec<(Encoder<f32>, TeacherMeta)>> {
    if dirs.is_empty() {
        return Err(Error::MissingArtifact(
            "no teacher checkpoints given; produce them with `ssi pretrain` \
             and pass --teachers dir1,dir2,dir3"
                .into(),
        ));
    }
    dirs.iter()
        .map(|d| {
            load_teacher(d).map_err(|e| {
                Error::MissingArtifact(format!(
                    "teacher checkpoint {}: {e}; produce it with `ssi pretrain`",
                    d.display()
                ))
            })
        })
        .collect()
}

/// A checkpoint directory is a student if it carries student metadata,
/// otherwise a teacher scored by masked next-item prediction.
fn eval_checkpoint(
    dir: &Path,
    split: Split,
    dataset: &Dataset,
    seed: u64,
) -> Result<MetricsReport> {
    if dir.join(ssi::student::STUDENT_META_FILE).exists() {
        let student = load_student(dir)?;
        evaluate(student_scorer(&student), split, dataset, seed)
    } else {
        let (encoder, _) = load_teacher(dir).map_err(|e| {
            Error::MissingArtifact(format!(
                "{} is neither a student nor a teacher checkpoint: {e}",
                dir.display()
            ))
        })?;
        let scorer = |prefix: &[u32]| -> Vec<f64> {
            next_item_scores(&encoder, prefix).into_iter().map(|x| x as f64).collect()
        };
        evaluate(scorer, split, dataset, seed)
    }
}

/// One pipeline run per layer count under shared seeds: pretrain the three
/// teachers, score the temporal teacher directly ("teacher-only"), distill
/// the student and score it ("ssi"). Per-cell failures are recorded in the
/// CSV and the sweep continues.
fn sweep_layers(cfg: &RunConfig, layers: &[usize], csv_path: &Path) -> Result<()> {
    let dataset = load_corpus(cfg)?;
    let split_train = data::split(&dataset)?;
    let train = train_sequences(&split_train);
    let mut csv = String::from("layers,model,ndcg10\n");
    for &l in layers {
        let mut lcfg = cfg.clone();
        lcfg.encoder.num_layers = l;
        match sweep_cell(&lcfg, &dataset, &train) {
            Ok((teacher_ndcg, ssi_ndcg)) => {
                csv.push_str(&format!("{l},teacher-only,{teacher_ndcg:.6}\n"));
                csv.push_str(&format!("{l},ssi,{ssi_ndcg:.6}\n"));
            }
            Err(e) => {
                eprintln!("sweep cell layers={l} failed: {e}");
                csv.push_str(&format!("{l},teacher-only,error\n"));
                csv.push_str(&format!("{l},ssi,error\n"));
            }
        }
    }
    if let Some(parent) = csv_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(csv_path, csv)?;
    Ok(())
}

fn sweep_cell(
    cfg: &RunConfig,
    dataset: &Dataset,
    train: &[ssi::data::InteractionSequence],
) -> Result<(f64, f64)> {
    let enc_cfg = cfg.encoder.to_encoder_config(dataset.vocab.size());
    let pre_cfg = cfg.ssl.to_pretrain_config(cfg.run.seed);
    let mut teachers = Vec::new();
    for task in [TaskKind::Temporal, TaskKind::Persona, TaskKind::Global] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ task_seed_tag(task));
        let mut encoder: Encoder<f32> = Encoder::new(enc_cfg.clone(), &mut rng)?;
        pretrain(task, &mut encoder, train, &pre_cfg)?;
        let meta = TeacherMeta {
            task,
            encoder: enc_cfg.clone(),
            config_hash: cfg.hash(),
            steps: pre_cfg.steps,
            final_mlm: f64::NAN,
            final_task: f64::NAN,
        };
        teachers.push((encoder, meta));
    }
    let teacher_scorer = |prefix: &[u32]| -> Vec<f64> {
        next_item_scores(&teachers[0].0, prefix).into_iter().map(|x| x as f64).collect()
    };
    let teacher_report = evaluate(teacher_scorer, Split::Test, dataset, cfg.eval.seed)?;

    let student_cfg = cfg.student.to_student_config(dataset.vocab.size())?;
    let di_cfg = cfg.imitation.to_distill_config(cfg.run.seed, cfg.eval.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x5354_5544_454e_54);
    let mut student = Student::<f32>::new(student_cfg, &mut rng)?;
    distill(&mut student, &teachers, dataset, &di_cfg)?;
    let student_report = evaluate(student_scorer(&student), Split::Test, dataset, cfg.eval.seed)?;
    Ok((teacher_report.ndcg(10), student_report.ndcg(10)))
}

fn print_stats(dataset: &Dataset) {
    let s = dataset.stats();
    println!("users              {}", s.users);
    println!("items              {}", s.items);
    println!("actions            {}", s.actions);
    println!("avg actions/user   {:.2}", s.avg_actions_per_user);
    println!("avg actions/item   {:.2}", s.avg_actions_per_item);
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    for row in rows {
        writeln!(f, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config_hash: String,
    seed: u64,
    git_describe: String,
    wall_clock_secs: f64,
}

fn write_manifest(out_dir: &Path, name: &str, cfg: &RunConfig, started: Instant) -> Result<()> {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    let manifest = RunManifest {
        subcommand: name.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        git_describe: git,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join(format!("{name}-manifest.json")),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}
