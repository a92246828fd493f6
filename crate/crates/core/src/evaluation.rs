//! Classification metrics, k-fold cross-validation orchestration and
//! report emission.
//!
//! Metrics are computed over pooled validation timesteps (class 1 =
//! occupied = positive). ROC AUC is rank-based: the probability that a
//! random positive outscores a random negative, ties counted half.

use crate::data::{normalize_apply, normalize_fit, DataError, Sample};
use crate::models::{Model, ModelConfig, ModelError};
use crate::training::{fit, TrainConfig, TrainError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fold count must be >= 2, got {0}")]
    BadFoldCount(usize),
    #[error("cannot split {n} samples into {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("fold plan covers {plan} samples but {samples} were supplied")]
    PlanMismatch { plan: usize, samples: usize },
    #[error("predictions and labels differ in length: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

// ── Fold plans ──────────────────────────────────────────────────────────

/// Assignment of every sample index to exactly one validation fold. The
/// unit of assignment is the whole day-sample, never individual hours.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sample indices validated in `fold`.
    pub fn val_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    /// Sample indices trained on for `fold`.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

/// Seeded shuffle followed by round-robin assignment: an exact partition
/// with fold sizes differing by at most one.
pub fn kfold_plan(n_samples: usize, k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    if n_samples < k {
        return Err(EvalError::TooFewSamples { n: n_samples, k });
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_samples];
    for (pos, &sample) in order.iter().enumerate() {
        assignment[sample] = pos % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

// ── Metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn add(&self, other: &Confusion) -> Confusion {
        Confusion {
            true_pos: self.true_pos + other.true_pos,
            false_pos: self.false_pos + other.false_pos,
            true_neg: self.true_neg + other.true_neg,
            false_neg: self.false_neg + other.false_neg,
        }
    }
}

/// Standard 2x2 counts over pooled timesteps.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            preds: pred.len(),
            labels: truth.len(),
        });
    }
    let mut c = Confusion::default();
    for (&p, &y) in pred.iter().zip(truth) {
        match (p != 0, y != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// Confusion counts plus the five summary metrics for one evaluation.
/// Degenerate denominators yield 0 and a flag instead of NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub counts: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub n_timesteps: usize,
    pub degenerate: Vec<&'static str>,
}

/// Computes the metric suite from hard-label counts and the pre-threshold
/// scores (needed for ROC AUC).
pub fn metrics(counts: Confusion, scores: &[f64], truth: &[u8]) -> MetricsReport {
    let mut degenerate = Vec::new();
    let total = counts.total();
    let accuracy = if total == 0 {
        degenerate.push("accuracy: no timesteps");
        0.0
    } else {
        (counts.true_pos + counts.true_neg) as f64 / total as f64
    };

    let predicted_pos = counts.true_pos + counts.false_pos;
    let precision = if predicted_pos == 0 {
        degenerate.push("precision: no predicted positives");
        0.0
    } else {
        counts.true_pos as f64 / predicted_pos as f64
    };
    let actual_pos = counts.true_pos + counts.false_neg;
    let recall = if actual_pos == 0 {
        degenerate.push("recall: no positive labels");
        0.0
    } else {
        counts.true_pos as f64 / actual_pos as f64
    };
    let f1 = if precision + recall == 0.0 {
        degenerate.push("f1: precision + recall is zero");
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let roc_auc = match rank_auc(scores, truth) {
        Some(auc) => auc,
        None => {
            degenerate.push("roc_auc: needs both classes and finite scores");
            0.0
        }
    };

    MetricsReport {
        counts,
        accuracy,
        precision,
        recall,
        f1,
        roc_auc,
        n_timesteps: total,
        degenerate,
    }
}

/// Rank-based AUC with average ranks for ties; `None` when a class is
/// absent or any score is non-finite.
fn rank_auc(scores: &[f64], truth: &[u8]) -> Option<f64> {
    let pos = truth.iter().filter(|&&y| y != 0).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 || scores.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("checked finite above"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if truth[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Some((rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64))
}

/// Pools every timestep of `samples`, thresholds the model's scores and
/// returns the metric suite.
pub fn evaluate_pooled(
    model: &Model,
    samples: &[Sample],
    threshold: f64,
) -> Result<MetricsReport, EvalError> {
    let mut scores = Vec::new();
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for sample in samples {
        let probs = model.forward(&sample.x)?;
        for (&p, &y) in probs.data().iter().zip(&sample.y) {
            scores.push(p);
            preds.push(u8::from(p >= threshold));
            truth.push(y);
        }
    }
    let counts = confusion(&preds, &truth)?;
    Ok(metrics(counts, &scores, &truth))
}

// ── Cross-validation ────────────────────────────────────────────────────

/// Outcome of one fold: its report, or a description of the training abort.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub result: Result<MetricsReport, String>,
}

#[derive(Debug, Clone)]
pub struct CrossvalResult {
    pub per_fold: Vec<FoldOutcome>,
    /// Metrics over all successful folds' pooled predictions.
    pub aggregate: MetricsReport,
}

impl CrossvalResult {
    pub fn failed_folds(&self) -> usize {
        self.per_fold.iter().filter(|f| f.result.is_err()).count()
    }
}

/// Runs the full cross-validation: per fold, a fresh model (seed offset by
/// the fold index) is trained on the other folds, with normalization fitted
/// on those folds only, and evaluated on the held-out fold. A fold whose
/// training aborts is flagged and the run continues.
///
/// `jobs` caps the number of folds trained concurrently (each fold is
/// independent; 1 runs serially). Results are identical for any `jobs`.
pub fn crossval(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    samples: &[Sample],
    plan: &FoldPlan,
    jobs: usize,
) -> Result<CrossvalResult, EvalError> {
    if plan.len() != samples.len() {
        return Err(EvalError::PlanMismatch {
            plan: plan.len(),
            samples: samples.len(),
        });
    }

    type FoldPool = (FoldOutcome, Vec<f64>, Vec<u8>, Vec<u8>);
    let run_fold = |fold: usize| -> FoldPool {
        let outcome = (|| -> Result<(MetricsReport, Vec<f64>, Vec<u8>, Vec<u8>), EvalError> {
            let train_set: Vec<Sample> = plan
                .train_indices(fold)
                .into_iter()
                .map(|i| samples[i].clone())
                .collect();
            let val_set: Vec<Sample> = plan
                .val_indices(fold)
                .into_iter()
                .map(|i| samples[i].clone())
                .collect();

            let stats = normalize_fit(&train_set)?;
            let train_set = normalize_apply(&stats, &train_set);
            let val_set = normalize_apply(&stats, &val_set);

            let mut fold_mc = model_config.clone();
            fold_mc.seed = model_config.seed.wrapping_add(fold as u64);
            let mut model = Model::build(&fold_mc)?;
            fit(&mut model, &train_set, None, train_config)?;

            let mut scores = Vec::new();
            let mut preds = Vec::new();
            let mut truth = Vec::new();
            for sample in &val_set {
                let probs = model.forward(&sample.x)?;
                for (&p, &y) in probs.data().iter().zip(&sample.y) {
                    scores.push(p);
                    preds.push(u8::from(p >= DEFAULT_THRESHOLD));
                    truth.push(y);
                }
            }
            let counts = confusion(&preds, &truth)?;
            Ok((metrics(counts, &scores, &truth), scores, preds, truth))
        })();
        match outcome {
            Ok((report, scores, preds, truth)) => (
                FoldOutcome { fold, result: Ok(report) },
                scores,
                preds,
                truth,
            ),
            Err(e) => (
                FoldOutcome { fold, result: Err(e.to_string()) },
                Vec::new(),
                Vec::new(),
                Vec::new(),
            ),
        }
    };

    // Fold-level parallelism: independent models, no shared mutable state.
    let mut outcomes: Vec<FoldPool> = if jobs <= 1 {
        (0..plan.k).map(run_fold).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(plan.k) {
                scope.spawn(|| loop {
                    let fold = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if fold >= plan.k {
                        break;
                    }
                    let outcome = run_fold(fold);
                    results.lock().expect("fold results").push(outcome);
                });
            }
        });
        let mut collected = results.into_inner().expect("fold results");
        collected.sort_by_key(|(o, _, _, _)| o.fold);
        collected
    };

    let mut all_scores = Vec::new();
    let mut all_preds = Vec::new();
    let mut all_truth = Vec::new();
    for (_, scores, preds, truth) in &mut outcomes {
        all_scores.append(scores);
        all_preds.append(preds);
        all_truth.append(truth);
    }
    let counts = confusion(&all_preds, &all_truth)?;
    let aggregate = metrics(counts, &all_scores, &all_truth);

    Ok(CrossvalResult {
        per_fold: outcomes.into_iter().map(|(o, _, _, _)| o).collect(),
        aggregate,
    })
}

// ── Report emission ─────────────────────────────────────────────────────

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "precision", "recall", "f1", "roc_auc"];

fn metric_values(report: &MetricsReport) -> [f64; 5] {
    [
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.roc_auc,
    ]
}

/// Writes the evaluation artifacts into `dir`:
///
/// - `summary.csv` / `summary.txt`: one row per model, five metric columns
///   (4 decimals);
/// - `per_fold.csv`: long-format `model,fold,metric,value` rows (full
///   precision), ready for box plots;
/// - `manifest.txt`: the caller-provided run manifest.
///
/// Returns the paths written.
pub fn emit_report(
    results: &[(String, CrossvalResult)],
    manifest: &str,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let summary_csv = dir.join("summary.csv");
    let summary_txt = dir.join("summary.txt");
    let per_fold_csv = dir.join("per_fold.csv");
    let manifest_txt = dir.join("manifest.txt");

    let mut csv = String::from("model,accuracy,precision,recall,f1,roc_auc\n");
    for (label, result) in results {
        let v = metric_values(&result.aggregate);
        csv.push_str(&format!(
            "{label},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            v[0], v[1], v[2], v[3], v[4]
        ));
    }
    std::fs::write(&summary_csv, csv)?;

    let mut txt = std::io::BufWriter::new(std::fs::File::create(&summary_txt)?);
    let label_width = results
        .iter()
        .map(|(l, _)| l.len())
        .chain(["Model".len()])
        .max()
        .unwrap_or(5);
    writeln!(
        txt,
        "{:<label_width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}",
        "Model", "Accuracy", "Precision", "Recall", "F1 score", "ROC AUC"
    )?;
    for (label, result) in results {
        let v = metric_values(&result.aggregate);
        writeln!(
            txt,
            "{label:<label_width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            v[0], v[1], v[2], v[3], v[4]
        )?;
        if result.failed_folds() > 0 {
            writeln!(
                txt,
                "{:<label_width$}  ({} of {} folds failed; see per-fold report)",
                "",
                result.failed_folds(),
                result.per_fold.len()
            )?;
        }
    }
    txt.flush()?;

    let mut long = String::from("model,fold,metric,value\n");
    for (label, result) in results {
        for outcome in &result.per_fold {
            match &outcome.result {
                Ok(report) => {
                    for (name, value) in METRIC_NAMES.iter().zip(metric_values(report)) {
                        long.push_str(&format!("{label},{},{name},{value}\n", outcome.fold));
                    }
                }
                Err(reason) => {
                    long.push_str(&format!("{label},{},failed,{reason}\n", outcome.fold));
                }
            }
        }
    }
    std::fs::write(&per_fold_csv, long)?;
    std::fs::write(&manifest_txt, manifest)?;

    Ok(vec![summary_csv, summary_txt, per_fold_csv, manifest_txt])
}
