//! Evaluation: metrics, per-case reports, the ablation harness and the
//! supervision-sensitivity sweep, with CSV and plot output.

mod metrics;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::par::{self, Exec};
use crate::phantom::PhantomSample;
use crate::segnet::{predict_labels, ModelParams, SegnetError};
use crate::trainer::{train_from, TrainConfig, TrainData, TrainError, TrainLog};

pub use metrics::{
    boundary, class_mask, dice, hausdorff, hausdorff_with, mean_foreground_dice, squared_distance_transform, Mask,
};
pub use report::{
    plot_losses, plot_sweep, read_long_csv, sweep_rows, write_eval_csv, write_long_csv, LongRow, EVAL_CSV_HEADER,
    LONG_CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("checkpoint predicts {checkpoint} classes but the dataset has {dataset}")]
    ClassMismatch { checkpoint: usize, dataset: usize },
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("scribble count {count} exceeds the {available} training images")]
    CountTooLarge { count: usize, available: usize },
    #[error("unknown ablation row {0:?} (expected 1, 2, 3, 4 or full)")]
    UnknownRow(String),
    #[error(transparent)]
    Model(#[from] SegnetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("plot: {0}")]
    Plot(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Metrics for one case. Classes are indexed `1..=m` at positions `0..m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    pub dice: Vec<f64>,
    /// `None` where a mask is empty.
    pub hd: Vec<Option<f64>>,
    pub mean_dice: f64,
    /// Mean over the defined per-class distances.
    pub mean_hd: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    /// Meaningless when `count` is 0.
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// Mean and population standard deviation. Empty input gives the
    /// undefined marker: `count == 0` with zero mean and std.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.count == 0 {
            write!(f, "undefined")
        } else {
            write!(f, "{:.4}±{:.4}", self.mean, self.std)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dice: Vec<MeanStd>,
    pub hd: Vec<MeanStd>,
    /// Cases where the distance was undefined, per class.
    pub hd_undefined: Vec<usize>,
    pub avg_dice: MeanStd,
    pub avg_hd: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    pub summary: EvalSummary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Percentile Hausdorff (e.g. 95); `None` is the plain maximum.
    pub hd_percentile: Option<f64>,
    pub exec: Exec,
}

/// Metrics of a predicted label map against ground truth.
pub fn score_case(
    case_id: &str,
    pred: &crate::grid::LabelMap,
    gt: &crate::grid::LabelMap,
    m: usize,
    hd_percentile: Option<f64>,
) -> Result<MetricsRecord, EvalError> {
    let mut dice_v = Vec::with_capacity(m);
    let mut hd_v = Vec::with_capacity(m);
    for c in 1..=m as u8 {
        let (p, g) = (class_mask(pred, c), class_mask(gt, c));
        dice_v.push(dice(&p, &g)?);
        hd_v.push(hausdorff_with(&p, &g, hd_percentile)?);
    }
    let defined: Vec<f64> = hd_v.iter().flatten().copied().collect();
    Ok(MetricsRecord {
        case_id: case_id.to_string(),
        mean_dice: dice_v.iter().sum::<f64>() / m as f64,
        mean_hd: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        dice: dice_v,
        hd: hd_v,
    })
}

pub fn summarize(records: &[MetricsRecord], m: usize) -> EvalSummary {
    let per_class =
        |f: &dyn Fn(&MetricsRecord) -> Option<f64>| MeanStd::of(&records.iter().filter_map(f).collect::<Vec<_>>());
    EvalSummary {
        dice: (0..m).map(|c| per_class(&|r| Some(r.dice[c]))).collect(),
        hd: (0..m).map(|c| per_class(&|r| r.hd[c])).collect(),
        hd_undefined: (0..m)
            .map(|c| records.iter().filter(|r| r.hd[c].is_none()).count())
            .collect(),
        avg_dice: per_class(&|r| Some(r.mean_dice)),
        avg_hd: per_class(&|r| r.mean_hd),
    }
}

/// Runs the model on every case and scores it (argmax over the softmax head).
pub fn evaluate(
    params: &ModelParams,
    samples: &[PhantomSample],
    ids: &[String],
    num_classes: usize,
    opts: EvalOptions,
) -> Result<EvalReport, EvalError> {
    let m = params.spec().num_classes;
    if m != num_classes {
        return Err(EvalError::ClassMismatch {
            checkpoint: m,
            dataset: num_classes,
        });
    }
    let indices: Vec<usize> = (0..samples.len()).collect();
    let records: Vec<MetricsRecord> = par::map(opts.exec.resolve(), &indices, |&i| {
        let pred = predict_labels(params, &samples[i].image)?;
        let id = ids.get(i).cloned().unwrap_or_else(|| format!("{i:04}"));
        score_case(&id, &pred, &samples[i].labels, m, opts.hd_percentile)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let summary = summarize(&records, m);
    Ok(EvalReport { records, summary })
}

/// Loss-toggle patterns of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    /// Scribble and category supervision only.
    R1,
    /// + mix consistency.
    R2,
    /// + cluster (with the mapping loss that trains the prototypes).
    R3,
    /// + mix and cluster.
    R4,
    /// Every term.
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [Self::R1, Self::R2, Self::R3, Self::R4, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::R1 => "#1",
            Self::R2 => "#2",
            Self::R3 => "#3",
            Self::R4 => "#4",
            Self::Full => "MedCL",
        }
    }

    /// `base` with the terms this row disables set to zero.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        let (mix, cluster, ac) = match self {
            Self::R1 => (false, false, false),
            Self::R2 => (true, false, false),
            Self::R3 => (false, true, false),
            Self::R4 => (true, true, false),
            Self::Full => (true, true, true),
        };
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        LossWeights {
            mix: on(mix, base.mix),
            cluster: on(cluster, base.cluster),
            ac: on(ac, base.ac),
            map: on(cluster || ac, base.map),
            scribble: base.scribble,
            category: base.category,
        }
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationRow {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_start_matches('#').to_ascii_lowercase().as_str() {
            "1" => Ok(Self::R1),
            "2" => Ok(Self::R2),
            "3" => Ok(Self::R3),
            "4" => Ok(Self::R4),
            "full" | "medcl" => Ok(Self::Full),
            _ => Err(EvalError::UnknownRow(s.to_string())),
        }
    }
}

/// One training run scored on the evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub summary: EvalSummary,
    pub best_val_dice: Option<f64>,
    #[serde(skip)]
    pub log: TrainLog,
}

impl RunResult {
    pub fn mean_dice(&self) -> f64 {
        self.summary.avg_dice.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    /// Numeric axis value (scribble count, or row position).
    pub value: f64,
    pub runs: Vec<RunResult>,
    /// Mean ± std of the per-run mean Dice.
    pub dice: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn point(&self, label: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.label == label)
    }

    /// Printable table: one line per axis value.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>6} {:>16}\n", self.axis, "runs", "dice");
        for p in &self.points {
            out.push_str(&format!(
                "{:<10} {:>6} {:>16}\n",
                p.label,
                p.runs.len(),
                p.dice.to_string()
            ));
        }
        out
    }
}

/// A training job of a sweep: its label, axis value, config and seed.
struct Job {
    point: usize,
    seed: u64,
    cfg: TrainConfig,
}

fn run_jobs(
    jobs: &[Job],
    data: &TrainData,
    eval_set: &[PhantomSample],
    exec: Exec,
) -> Result<Vec<RunResult>, EvalError> {
    let ids: Vec<String> = (0..eval_set.len()).map(|i| format!("{i:04}")).collect();
    par::map(exec.resolve(), jobs, |job| -> Result<RunResult, EvalError> {
        let outcome = train_from(&job.cfg, data, None, None, None)?;
        let report = evaluate(
            &outcome.best,
            eval_set,
            &ids,
            data.num_classes,
            EvalOptions {
                hd_percentile: None,
                exec: job.cfg.trainer.exec,
            },
        )?;
        Ok(RunResult {
            seed: job.seed,
            summary: report.summary,
            best_val_dice: outcome.best_val_dice,
            log: outcome.log,
        })
    })
    .into_iter()
    .collect()
}

fn assemble(axis: &str, labels: Vec<(String, f64)>, jobs: &[Job], runs: Vec<RunResult>) -> SweepResult {
    let mut points: Vec<SweepPoint> = labels
        .into_iter()
        .map(|(label, value)| SweepPoint {
            label,
            value,
            runs: Vec::new(),
            dice: MeanStd::default(),
        })
        .collect();
    for (job, run) in jobs.iter().zip(runs) {
        points[job.point].runs.push(run);
    }
    for p in &mut points {
        p.dice = MeanStd::of(&p.runs.iter().map(RunResult::mean_dice).collect::<Vec<_>>());
    }
    SweepResult {
        axis: axis.to_string(),
        points,
    }
}

/// Trains every row with every seed and scores each run on `eval_set`.
pub fn ablate(
    base: &TrainConfig,
    data: &TrainData,
    eval_set: &[PhantomSample],
    rows: &[AblationRow],
    seeds: &[u64],
    exec: Exec,
) -> Result<SweepResult, EvalError> {
    if rows.len() < 2 {
        return Err(EvalError::TooFew {
            what: "ablation rows",
            needed: 2,
            got: rows.len(),
        });
    }
    let mut jobs = Vec::new();
    for (point, row) in rows.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.losses.weights = row.weights(base.losses.weights);
            cfg.trainer.seed = seed;
            jobs.push(Job { point, seed, cfg });
        }
    }
    let runs = run_jobs(&jobs, data, eval_set, exec)?;
    let labels = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.label().to_string(), i as f64))
        .collect();
    Ok(assemble("row", labels, &jobs, runs))
}

/// Trains with the first `count` training images scribbled, for every count
/// and seed, and scores each run on `eval_set`.
pub fn sensitivity_sweep(
    base: &TrainConfig,
    data: &TrainData,
    eval_set: &[PhantomSample],
    counts: &[usize],
    seeds: &[u64],
    exec: Exec,
) -> Result<SweepResult, EvalError> {
    if let Some(&count) = counts.iter().find(|&&c| c > data.train.len()) {
        return Err(EvalError::CountTooLarge {
            count,
            available: data.train.len(),
        });
    }
    let mut jobs = Vec::new();
    for (point, &count) in counts.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.trainer.scribble_sources = Some(count);
            cfg.trainer.seed = seed;
            jobs.push(Job { point, seed, cfg });
        }
    }
    let runs = run_jobs(&jobs, data, eval_set, exec)?;
    let labels = counts.iter().map(|&c| (c.to_string(), c as f64)).collect();
    Ok(assemble("scribbles", labels, &jobs, runs))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Ties share the average of their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `None` when either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Printable per-class table with an `Avg` column.
pub fn summary_table(summary: &EvalSummary) -> String {
    let m = summary.dice.len();
    let mut out = format!("{:<8}", "metric");
    for c in 1..=m {
        out.push_str(&format!(" {:>16}", format!("class {c}")));
    }
    out.push_str(&format!(" {:>16}\n", "Avg"));
    out.push_str(&format!("{:<8}", "Dice"));
    for d in &summary.dice {
        out.push_str(&format!(" {:>16}", d.to_string()));
    }
    out.push_str(&format!(" {:>16}\n", summary.avg_dice.to_string()));
    out.push_str(&format!("{:<8}", "HD(px)"));
    for h in &summary.hd {
        out.push_str(&format!(" {:>16}", h.to_string()));
    }
    out.push_str(&format!(" {:>16}\n", summary.avg_hd.to_string()));
    let undefined: usize = summary.hd_undefined.iter().sum();
    if undefined > 0 {
        out.push_str(&format!(
            "HD undefined (empty mask) in {undefined} class-cases, excluded from averages\n"
        ));
    }
    out
}
