//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{prepare_dataset, ExperimentConfig};
use crate::data::{generate_world, sample_triplets, write_gallery, write_triplet_file, TripletBatch};
use crate::eval::{evaluate, mask_alignment_report, mask_rows};
use crate::experiment::{ablation_table, run, run_ablations};
use crate::train::{Ablation, Checkpoint, CheckpointSink};

pub const OUT_ROOT_ENV: &str = "TGCIR_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "tgcir", version, about = "Target-guided composed image retrieval on synthetic attribute worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON experiment config; missing keys take the built-in defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory. Defaults to `$TGCIR_OUT_ROOT/<command>-<fingerprint>` (root `runs`).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Shortcut for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and write the gallery and triplet files.
    GenerateData(Common),
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Epoch checkpoints to retain (0 keeps all).
        #[arg(long, default_value_t = 2)]
        keep_checkpoints: usize,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump per-query keep/replace masks and the mask alignment report.
    InspectMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and each ablation, and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds per variant, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData(_) => "generate-data",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::InspectMasks { .. } => "inspect-masks",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenerateData(c) => c,
            Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::InspectMasks { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

fn resolve_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    Ok(ExperimentConfig::load(common.config.as_deref(), &overrides)?)
}

fn run_dir(command: &str, common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let fp = crate::train::config_fingerprint(&cfg.model, &cfg.train);
    root.join(format!("{command}-{}", &fp[..12]))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", cli.command.name());
            1
        }
    }
}

pub fn execute(command: &Command) -> anyhow::Result<()> {
    let cfg = resolve_config(command.common())?;
    let dir = run_dir(command.name(), command.common(), &cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("config.json"), &(cfg.to_json_pretty() + "\n"))?;
    log::info!("{} -> {}", command.name(), dir.display());
    match command {
        Command::GenerateData(_) => generate_data(&cfg, &dir),
        Command::Train {
            checkpoint,
            keep_checkpoints,
            ..
        } => train(&cfg, &dir, checkpoint.as_deref(), *keep_checkpoints),
        Command::Evaluate { checkpoint, .. } => evaluate_cmd(&cfg, &dir, checkpoint),
        Command::InspectMasks { checkpoint, .. } => inspect_masks(&cfg, &dir, checkpoint),
        Command::Ablate { seeds, .. } => ablate(&cfg, &dir, *seeds),
    }
}

fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let world = generate_world(&cfg.world)?;
    let train = sample_triplets(&world, cfg.data.train_triplets, cfg.data.max_changes, cfg.data.train_seed)?;
    let test = sample_triplets(&world, cfg.data.test_queries, cfg.data.max_changes, cfg.data.test_seed)?;
    let manifest = write_gallery(dir, &world.gallery)?;
    write_triplet_file(&dir.join("train.tsv"), &train, &world.gallery)?;
    write_triplet_file(&dir.join("test.tsv"), &test, &world.gallery)?;
    #[derive(Serialize)]
    struct WorldDump<'a> {
        spec: &'a crate::data::WorldSpec,
        latents: &'a [Vec<usize>],
    }
    write_json(
        &dir.join("world.json"),
        &WorldDump {
            spec: &world.spec,
            latents: &world.latents,
        },
    )?;
    println!(
        "wrote {} images, {} train and {} test triplets to {} (manifest {})",
        world.gallery.len(),
        train.len(),
        test.len(),
        dir.display(),
        manifest.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, dir: &Path, resume: Option<&Path>, keep: usize) -> anyhow::Result<()> {
    let data = prepare_dataset(cfg)?;
    let state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            ckpt.expect_config(&cfg.model, &cfg.train)?;
            Some(ckpt.into_state()?)
        }
        None => None,
    };
    let sink = CheckpointSink {
        dir: dir.join("checkpoints"),
        keep,
    };
    let log_path = dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut write_err = None;
    let out = run(cfg, &data, state, Some(&sink), |r| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("log record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        bail!("writing {}: {e}", log_path.display());
    }
    // Also covers runs with no epochs left, which write no epoch checkpoint.
    Checkpoint::from_state(&out.state, &cfg.model, &cfg.train).write(&sink.latest())?;
    write_json(&dir.join("report.json"), &out.report)?;
    write_text(&dir.join("report.txt"), &out.report.to_text())?;
    print!("{}", out.report.to_text());
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, dir: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = ckpt.into_model()?;
    let data = prepare_dataset(cfg)?;
    let report = evaluate(&model, &data.test, &data.gallery, &cfg.eval.ks, &cfg.eval.subset_ks, cfg.eval.protocol)?;
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn inspect_masks(cfg: &ExperimentConfig, dir: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = ckpt.into_model()?;
    let data = prepare_dataset(cfg)?;
    let k = model.k();
    let batch = TripletBatch::assemble(&data.gallery, &data.test)?;
    let refs: Vec<&[f64]> = batch.references.iter().map(Vec::as_slice).collect();
    let texts: Vec<&[f64]> = batch.texts.iter().map(Vec::as_slice).collect();
    let student = model.student_queries(&refs, &texts)?;
    let teacher = match model.heads.teacher {
        Some(_) => Some(model.teacher_masks(&batch)?),
        None => None,
    };
    #[derive(Serialize)]
    struct MaskRecord<'a> {
        query: usize,
        reference: &'a str,
        target: &'a str,
        changes: Option<&'a [crate::data::AttributeChange]>,
        student_keep: &'a [f64],
        student_replace: &'a [f64],
        teacher_keep: Option<&'a [f64]>,
        teacher_replace: Option<&'a [f64]>,
    }
    let mut lines = String::new();
    for (i, q) in data.test.iter().enumerate() {
        let rows = i * k..(i + 1) * k;
        let rec = MaskRecord {
            query: i,
            reference: &data.gallery.ids[q.reference_id],
            target: &data.gallery.ids[q.target_id],
            changes: q.changed_attributes.as_deref(),
            student_keep: &student.keep.data()[rows.clone()],
            student_replace: &student.replace.data()[rows.clone()],
            teacher_keep: teacher.as_ref().map(|t| &t.keep.data()[rows.clone()]),
            teacher_replace: teacher.as_ref().map(|t| &t.replace.data()[rows.clone()]),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    write_text(&dir.join("masks.jsonl"), &lines)?;

    let changes: Option<Vec<_>> = data.test.iter().map(|q| q.changed_attributes.clone()).collect();
    let Some(changes) = changes else {
        println!("masks written; no ground-truth changes, alignment skipped");
        return Ok(());
    };
    let a = cfg.world.num_attributes;
    if k < a {
        println!("masks written; {k} slots < {a} attributes, alignment skipped");
        return Ok(());
    }
    let mut reports = serde_json::Map::new();
    let student_report = mask_alignment_report(&mask_rows(&student.replace, k), &changes, a)?;
    println!("student alignment\t{:.4}", student_report.score);
    reports.insert("student".into(), serde_json::to_value(&student_report)?);
    if let Some(t) = &teacher {
        let r = mask_alignment_report(&mask_rows(&t.replace, k), &changes, a)?;
        println!("teacher alignment\t{:.4}", r.score);
        reports.insert("teacher".into(), serde_json::to_value(&r)?);
    }
    write_json(&dir.join("alignment.json"), &reports)?;
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, dir: &Path, seeds: u64) -> anyhow::Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let data = prepare_dataset(cfg)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
    let rows = run_ablations(cfg, &data, &Ablation::ALL, &seed_list, |a, s, r| {
        log::info!("{} seed {s}: avg {:.4}", a.name(), r.avg());
    })?;
    let table = ablation_table(&rows);
    write_text(&dir.join("ablation.md"), &table)?;
    let json: Vec<_> = rows
        .iter()
        .map(|r| serde_json::json!({ "variant": r.ablation.name(), "reports": r.reports }))
        .collect();
    write_json(&dir.join("ablation.json"), &json)?;
    print!("{table}");
    Ok(())
}
