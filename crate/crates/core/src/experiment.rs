//! End-to-end runs: data, training, evaluation.

use crate::config::{prepare_dataset, Dataset, ExperimentConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::train::{run_training, Ablation, CheckpointSink, TrainLogRecord, TrainState};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub report: EvalReport,
    pub log: Vec<TrainLogRecord>,
}

/// Evaluates the student branch of `state` on the test split.
pub fn evaluate_state(cfg: &ExperimentConfig, data: &Dataset, state: &TrainState) -> Result<EvalReport> {
    evaluate(
        &state.model,
        &data.test,
        &data.gallery,
        &cfg.eval.ks,
        &cfg.eval.subset_ks,
        cfg.eval.protocol,
    )
}

/// Trains from scratch (or continues `resume`) and evaluates.
pub fn run(
    cfg: &ExperimentConfig,
    data: &Dataset,
    resume: Option<TrainState>,
    sink: Option<&CheckpointSink>,
    mut on_log: impl FnMut(&TrainLogRecord),
) -> Result<RunOutcome> {
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(&cfg.model, &cfg.train)?,
    };
    let mut log = Vec::new();
    run_training(&mut state, &cfg.model, &cfg.train, &data.train, &data.gallery, sink, |r| {
        on_log(r);
        log.push(r.clone());
    })?;
    let report = evaluate_state(cfg, data, &state)?;
    Ok(RunOutcome { state, report, log })
}

/// Convenience wrapper: prepares the data and runs without checkpoints.
pub fn run_config(cfg: &ExperimentConfig) -> Result<(Dataset, RunOutcome)> {
    let data = prepare_dataset(cfg)?;
    let out = run(cfg, &data, None, None, |_| {})?;
    Ok((data, out))
}

/// One row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        self.reports.iter().map(&f).sum::<f64>() / self.reports.len() as f64
    }

    pub fn std(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        let n = self.reports.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean(&f);
        (self.reports.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Runs every requested ablation for every seed on the same data.
pub fn run_ablations(
    cfg: &ExperimentConfig,
    data: &Dataset,
    ablations: &[Ablation],
    seeds: &[u64],
    mut progress: impl FnMut(Ablation, u64, &EvalReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &ablation in ablations {
        let mut reports = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.ablation = ablation;
            c.train.seed = seed;
            let out = run(&c, data, None, None, |_| {})?;
            progress(ablation, seed, &out.report);
            reports.push(out.report);
        }
        rows.push(AblationRow { ablation, reports });
    }
    Ok(rows)
}

/// Markdown table with one row per variant and one column per metric.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first().and_then(|r| r.reports.first()) else {
        return String::new();
    };
    let mut columns: Vec<(String, Box<dyn Fn(&EvalReport) -> f64>)> = Vec::new();
    for &k in first.recall_at.keys() {
        columns.push((format!("R@{k}"), Box::new(move |r: &EvalReport| r.recall_at[&k])));
    }
    if let Some(sub) = &first.recall_subset_at {
        for &k in sub.keys() {
            columns.push((
                format!("R_subset@{k}"),
                Box::new(move |r: &EvalReport| r.recall_subset_at.as_ref().map_or(f64::NAN, |m| m[&k])),
            ));
        }
    }
    columns.push(("Avg".into(), Box::new(|r: &EvalReport| r.avg())));
    let mut s = String::from("| Method |");
    for (name, _) in &columns {
        s.push_str(&format!(" {name} |"));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(columns.len()));
    s.push('\n');
    for row in rows {
        s.push_str(&format!("| {} |", row.ablation.name()));
        for (_, f) in &columns {
            let (m, sd) = (row.mean(f), row.std(f));
            if row.reports.len() > 1 {
                s.push_str(&format!(" {:.2} ± {:.2} |", 100.0 * m, 100.0 * sd));
            } else {
                s.push_str(&format!(" {:.2} |", 100.0 * m));
            }
        }
        s.push('\n');
    }
    s
}
