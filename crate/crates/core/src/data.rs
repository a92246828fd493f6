//! Data pipeline: raw 1 Hz meter-data ingestion, hourly resampling with
//! majority occupancy labels, dataset summaries, normalization, windowed
//! statistical features, synthetic data generation, and the processed
//! CSV format shared by the CLI subcommands.
//!
//! Raw layout (one directory per household):
//!
//! ```text
//! <root>/<household>/smartmeter/<YYYY-MM-DD>.csv   86400 rows, F columns
//! <root>/<household>/occupancy.csv                 rows: date,s1,...,s86400
//! ```
//!
//! Readings use `-1` as the missing-value sentinel; occupancy seconds are
//! `0`, `1` or `-1` (missing).

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SECONDS_PER_DAY: usize = 86_400;
pub const SECONDS_PER_HOUR: usize = 3_600;
pub const HOURS_PER_DAY: usize = 24;
/// Fraction of missing entries per hour (in either stream) above which the
/// whole day is excluded.
pub const DEFAULT_MAX_MISSING: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("cannot fit normalization on an empty training set")]
    EmptyTrainingSet,
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── Core records ────────────────────────────────────────────────────────

/// One day of 1 Hz meter readings plus per-second occupancy status.
#[derive(Debug, Clone)]
pub struct RawDay {
    pub household: String,
    /// ISO `YYYY-MM-DD`, taken from the day file name.
    pub date: String,
    /// Flat `[86400, features]`, NaN where the source marked values missing.
    pub readings: Vec<f64>,
    pub features: usize,
    /// 86400 entries in {0, 1, -1}; -1 is missing.
    pub occupancy_seconds: Vec<i8>,
}

/// One preprocessed day: hourly feature matrix and per-hour labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub household: String,
    pub date: String,
    /// `[T, F]`
    pub x: Tensor,
    /// `T` entries in {0, 1}.
    pub y: Vec<u8>,
}

impl Sample {
    pub fn seq_len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.x.shape()[1]
    }
}

// ── Raw ingestion ───────────────────────────────────────────────────────

/// Household directory names under `root`, sorted.
pub fn list_households(root: &Path) -> Result<Vec<String>, DataError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(root).map_err(io_err(root))?;
    for entry in entries {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every day file of one household, pairing it with the occupancy row
/// of the same date. Days with no occupancy row get an all-missing status
/// stream (and fall to the completeness filter downstream).
pub fn load_raw(root: &Path, household: &str) -> Result<Vec<RawDay>, DataError> {
    let meter_dir = root.join(household).join("smartmeter");
    if !meter_dir.is_dir() {
        return Ok(Vec::new());
    }

    let occupancy = load_occupancy(&root.join(household).join("occupancy.csv"))?;

    let mut day_files: Vec<PathBuf> = std::fs::read_dir(&meter_dir)
        .map_err(io_err(&meter_dir))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(&meter_dir))?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    day_files.sort();

    let mut days = Vec::with_capacity(day_files.len());
    for path in day_files {
        let date = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (readings, features) = load_day_readings(&path)?;
        let occupancy_seconds = occupancy
            .get(&date)
            .cloned()
            .unwrap_or_else(|| vec![-1; SECONDS_PER_DAY]);
        days.push(RawDay {
            household: household.to_string(),
            date,
            readings,
            features,
            occupancy_seconds,
        });
    }
    Ok(days)
}

fn load_day_readings(path: &Path) -> Result<(Vec<f64>, usize), DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut readings = Vec::with_capacity(SECONDS_PER_DAY * 4);
    let mut features = 0usize;
    let mut rows = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let value: f64 = field.trim().parse().map_err(|_| DataError::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("`{field}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: format!("non-finite reading `{field}`"),
                });
            }
            // -1 is the source's missing marker.
            readings.push(if value == -1.0 { f64::NAN } else { value });
            count += 1;
        }
        if rows == 0 {
            features = count;
        } else if count != features {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("expected {features} columns, found {count}"),
            });
        }
        rows += 1;
    }
    if rows != SECONDS_PER_DAY {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            line: rows,
            reason: format!("expected {SECONDS_PER_DAY} rows, found {rows}"),
        });
    }
    Ok((readings, features))
}

fn load_occupancy(path: &Path) -> Result<BTreeMap<String, Vec<i8>>, DataError> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let date = fields.next().unwrap_or("").trim().to_string();
        let statuses: Vec<i8> = fields
            .map(|f| match f.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                "-1" => Ok(-1),
                other => Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: format!("`{other}` is not a valid occupancy status"),
                }),
            })
            .collect::<Result<_, _>>()?;
        if statuses.len() != SECONDS_PER_DAY {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!(
                    "expected {SECONDS_PER_DAY} statuses for {date}, found {}",
                    statuses.len()
                ),
            });
        }
        out.insert(date, statuses);
    }
    Ok(out)
}

// ── Hourly resampling ───────────────────────────────────────────────────

/// Resamples one raw day to hourly resolution: per-hour feature means and
/// majority occupancy vote, with missing entries excluded from denominators.
///
/// Returns `None` (day excluded, not an error) when any hour has more than
/// `max_missing_frac` missing entries in either stream, or when an hour
/// leaves a feature with no readings at all. Majority ties resolve to
/// occupied.
pub fn resample_hourly(day: &RawDay, max_missing_frac: f64) -> Option<Sample> {
    let f = day.features;
    debug_assert_eq!(day.readings.len(), SECONDS_PER_DAY * f);
    debug_assert_eq!(day.occupancy_seconds.len(), SECONDS_PER_DAY);

    let mut x = vec![0.0; HOURS_PER_DAY * f];
    let mut y = vec![0u8; HOURS_PER_DAY];
    for hour in 0..HOURS_PER_DAY {
        let start = hour * SECONDS_PER_HOUR;

        let mut missing_cells = 0usize;
        let mut sums = vec![0.0; f];
        let mut counts = vec![0usize; f];
        for s in start..start + SECONDS_PER_HOUR {
            for j in 0..f {
                let v = day.readings[s * f + j];
                if v.is_nan() {
                    missing_cells += 1;
                } else {
                    sums[j] += v;
                    counts[j] += 1;
                }
            }
        }
        if missing_cells as f64 > max_missing_frac * (SECONDS_PER_HOUR * f) as f64 {
            return None;
        }

        let mut ones = 0usize;
        let mut zeros = 0usize;
        let mut missing_status = 0usize;
        for s in start..start + SECONDS_PER_HOUR {
            match day.occupancy_seconds[s] {
                1 => ones += 1,
                0 => zeros += 1,
                _ => missing_status += 1,
            }
        }
        if missing_status as f64 > max_missing_frac * SECONDS_PER_HOUR as f64 {
            return None;
        }

        for j in 0..f {
            if counts[j] == 0 {
                return None;
            }
            x[hour * f + j] = sums[j] / counts[j] as f64;
        }
        y[hour] = u8::from(ones >= zeros);
    }

    Some(Sample {
        household: day.household.clone(),
        date: day.date.clone(),
        x: Tensor::new(vec![HOURS_PER_DAY, f], x).expect("resample shape"),
        y,
    })
}

// ── Dataset summary ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdSummary {
    pub household: String,
    pub days: usize,
    pub occupancy_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    /// Sorted by household.
    pub households: Vec<HouseholdSummary>,
    pub total_days: usize,
    pub overall_ratio: f64,
}

/// Per-household day counts and occupancy ratios (occupied timesteps over
/// all timesteps). Order-insensitive in the input sample order.
pub fn summarize(samples: &[Sample]) -> DatasetSummary {
    let mut acc: BTreeMap<&str, (usize, u64, u64)> = BTreeMap::new();
    for s in samples {
        let entry = acc.entry(&s.household).or_insert((0, 0, 0));
        entry.0 += 1;
        entry.1 += s.y.iter().map(|&v| u64::from(v)).sum::<u64>();
        entry.2 += s.y.len() as u64;
    }
    let households: Vec<HouseholdSummary> = acc
        .iter()
        .map(|(hh, (days, occupied, total))| HouseholdSummary {
            household: (*hh).to_string(),
            days: *days,
            occupancy_ratio: *occupied as f64 / *total as f64,
        })
        .collect();
    let total_days = households.iter().map(|h| h.days).sum();
    let occupied: u64 = acc.values().map(|v| v.1).sum();
    let total: u64 = acc.values().map(|v| v.2).sum();
    DatasetSummary {
        households,
        total_days,
        overall_ratio: if total == 0 {
            0.0
        } else {
            occupied as f64 / total as f64
        },
    }
}

// ── Normalization ───────────────────────────────────────────────────────

/// Per-feature standardization statistics, fitted on training folds only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at 1e-8.
    pub std: Vec<f64>,
}

pub fn normalize_fit(samples: &[Sample]) -> Result<NormStats, DataError> {
    let first = samples.first().ok_or(DataError::EmptyTrainingSet)?;
    let f = first.features();
    let mut sums = vec![0.0; f];
    let mut count = 0usize;
    for s in samples {
        for row in 0..s.seq_len() {
            for j in 0..f {
                sums[j] += s.x.row(row)[j];
            }
        }
        count += s.seq_len();
    }
    let mean: Vec<f64> = sums.iter().map(|v| v / count as f64).collect();
    let mut sq = vec![0.0; f];
    for s in samples {
        for row in 0..s.seq_len() {
            for j in 0..f {
                let d = s.x.row(row)[j] - mean[j];
                sq[j] += d * d;
            }
        }
    }
    let std = sq
        .iter()
        .map(|v| (v / count as f64).sqrt().max(1e-8))
        .collect();
    Ok(NormStats { mean, std })
}

pub fn normalize_apply(stats: &NormStats, samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| {
            let f = s.features();
            let data: Vec<f64> = s
                .x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - stats.mean[i % f]) / stats.std[i % f])
                .collect();
            Sample {
                household: s.household.clone(),
                date: s.date.clone(),
                x: Tensor::new(s.x.shape().to_vec(), data).expect("normalize preserves shape"),
                y: s.y.clone(),
            }
        })
        .collect()
}

// ── Windowed statistical features ───────────────────────────────────────

/// Appends, per timestep and raw feature, {mean, std, min, max, lag-1 diff}
/// over a centered window of `window` hours, widening `X` from `F` to `6F`
/// columns. Window indices are clamped to the day boundary (edge values
/// repeat); the lag-1 difference is 0 at the first hour.
pub fn manual_features(sample: &Sample, window: usize) -> Result<Sample, DataError> {
    if window == 0 || window % 2 == 0 {
        return Err(DataError::Invalid(format!(
            "feature window must be odd and >= 1, got {window}"
        )));
    }
    let t_len = sample.seq_len();
    let f = sample.features();
    let half = window / 2;
    let wide = 6 * f;
    let mut out = vec![0.0; t_len * wide];
    for t in 0..t_len {
        for j in 0..f {
            out[t * wide + j] = sample.x.row(t)[j];
        }
        for j in 0..f {
            let mut values = Vec::with_capacity(window);
            for off in 0..window {
                let idx = (t + off).saturating_sub(half).min(t_len - 1);
                values.push(sample.x.row(idx)[j]);
            }
            let mean = values.iter().sum::<f64>() / window as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let prev = t.saturating_sub(1);
            let diff = sample.x.row(t)[j] - sample.x.row(prev)[j];
            let base = t * wide + f + 5 * j;
            out[base] = mean;
            out[base + 1] = var.sqrt();
            out[base + 2] = min;
            out[base + 3] = max;
            out[base + 4] = diff;
        }
    }
    Ok(Sample {
        household: sample.household.clone(),
        date: sample.date.clone(),
        x: Tensor::new(vec![t_len, wide], out).expect("manual_features shape"),
        y: sample.y.clone(),
    })
}

// ── Synthetic data ──────────────────────────────────────────────────────

/// Desk-scale synthetic dataset settings. Occupancy follows a per-household
/// two-state Markov chain over hours; features are baseline-plus-daily-cycle
/// sinusoids with noise, and occupied hours add appliance-like load bumps
/// (scaled by `occupied_boost`; 0 severs the feature-label link entirely).
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub households: usize,
    pub days_per_household: usize,
    pub features: usize,
    pub seed: u64,
    pub occupied_boost: f64,
}

impl SynthConfig {
    pub fn new(households: usize, days_per_household: usize, seed: u64) -> Self {
        SynthConfig {
            households,
            days_per_household,
            features: 9,
            seed,
            occupied_boost: 1.0,
        }
    }
}

pub fn synth_generate(config: &SynthConfig) -> Vec<Sample> {
    assert!(config.households >= 1 && config.days_per_household >= 1 && config.features >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let f = config.features;
    let mut samples = Vec::with_capacity(config.households * config.days_per_household);

    for hh in 0..config.households {
        let household = format!("synth{hh:02}");
        // Hourly transition probabilities; the stationary occupied share
        // p_return / (p_return + p_leave) lands in roughly [0.63, 0.91].
        let p_leave = rng.gen_range(0.06..0.18);
        let p_return = rng.gen_range(0.30..0.60);
        let stationary = p_return / (p_return + p_leave);

        let baseline: Vec<f64> = (0..f).map(|_| rng.gen_range(0.5..3.0)).collect();
        let amp: Vec<f64> = (0..f).map(|_| rng.gen_range(0.1..0.8)).collect();
        let phase: Vec<f64> = (0..f).map(|_| rng.gen_range(0.0..24.0)).collect();
        let boost_w: Vec<f64> = (0..f).map(|_| rng.gen_range(0.3..1.2)).collect();
        let bump_phase: Vec<f64> = (0..f).map(|_| rng.gen_range(0.0..24.0)).collect();
        let noise: Vec<f64> = (0..f).map(|_| rng.gen_range(0.15..0.35)).collect();

        let mut state = rng.gen_bool(stationary);
        for day in 0..config.days_per_household {
            let date = synth_date(day);
            let mut y = Vec::with_capacity(HOURS_PER_DAY);
            let mut x = vec![0.0; HOURS_PER_DAY * f];
            let mut prev_bump = 0.0;
            for hour in 0..HOURS_PER_DAY {
                state = if state {
                    !rng.gen_bool(p_leave)
                } else {
                    rng.gen_bool(p_return)
                };
                y.push(u8::from(state));

                // Appliance-like load while occupied, with a tail leaking
                // into the next hour.
                let event = if state { rng.gen_range(0.7..1.3) } else { 0.0 };
                for j in 0..f {
                    let cycle = amp[j] * ((hour as f64 + phase[j]) * std::f64::consts::TAU / 24.0).sin();
                    let bump_shape = 0.6 + 0.4 * ((hour as f64 + bump_phase[j]) * std::f64::consts::TAU / 24.0).sin();
                    let occupied_load =
                        config.occupied_boost * boost_w[j] * (event * bump_shape + 0.3 * prev_bump);
                    let eps = gaussian(&mut rng) * noise[j];
                    x[hour * f + j] = baseline[j] + cycle + occupied_load + eps;
                }
                prev_bump = event;
            }
            samples.push(Sample {
                household: household.clone(),
                date,
                x: Tensor::new(vec![HOURS_PER_DAY, f], x).expect("synth shape"),
                y,
            });
        }
    }
    samples
}

/// Fabricated but valid ISO dates: 28-day months keep the arithmetic exact.
fn synth_date(day_index: usize) -> String {
    let year = 2021 + day_index / 336;
    let month = 1 + (day_index / 28) % 12;
    let day = 1 + day_index % 28;
    format!("{year:04}-{month:02}-{day:02}")
}

/// Box-Muller standard normal.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ── Processed CSV format ────────────────────────────────────────────────

/// Writes samples as `household,date,hour,f1..fF,occupied` rows with a
/// header. Floats carry 12 significant digits in scientific notation, so the
/// encoding is deterministic byte for byte.
pub fn write_processed(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let f = samples.first().map_or(0, Sample::features);
    let mut header = String::from("household,date,hour");
    for j in 1..=f {
        let _ = write!(header, ",f{j}");
    }
    header.push_str(",occupied");
    writeln!(w, "{header}").map_err(io_err(path))?;
    for s in samples {
        for hour in 0..s.seq_len() {
            let mut line = format!("{},{},{hour}", s.household, s.date);
            for v in s.x.row(hour) {
                let _ = write!(line, ",{}", fmt_sig12(*v));
            }
            let _ = write!(line, ",{}", s.y[hour]);
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a processed dataset. Rows must arrive grouped by (household, date)
/// with hours in order; every sample must share one sequence length and
/// feature count.
pub fn read_processed(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| DataError::Malformed {
        path: path.to_path_buf(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let header = header.map_err(io_err(path))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 5 || columns[..3] != ["household", "date", "hour"] || *columns.last().unwrap() != "occupied" {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            line: 1,
            reason: "expected header household,date,hour,f1..fF,occupied".into(),
        });
    }
    let f = columns.len() - 4;

    struct Open {
        household: String,
        date: String,
        rows: Vec<f64>,
        y: Vec<u8>,
    }
    let mut samples: Vec<Sample> = Vec::new();
    let mut open: Option<Open> = None;
    let mut seq_len: Option<usize> = None;

    let mut close = |open: &mut Option<Open>, seq_len: &mut Option<usize>| -> Result<(), DataError> {
        if let Some(o) = open.take() {
            let t = o.y.len();
            match seq_len {
                None => *seq_len = Some(t),
                Some(expected) if *expected != t => {
                    return Err(DataError::Invalid(format!(
                        "sample {}/{} has {t} hours, expected {expected}",
                        o.household, o.date
                    )))
                }
                _ => {}
            }
            samples.push(Sample {
                household: o.household,
                date: o.date,
                x: Tensor::new(vec![t, f], o.rows).expect("grouped rows"),
                y: o.y,
            });
        }
        Ok(())
    };

    for (idx, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| DataError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != f + 4 {
            return Err(malformed(format!(
                "expected {} fields, found {}",
                f + 4,
                fields.len()
            )));
        }
        let household = fields[0].to_string();
        let date = fields[1].to_string();
        let hour: usize = fields[2]
            .parse()
            .map_err(|_| malformed(format!("bad hour `{}`", fields[2])))?;
        let occupied: u8 = match fields[f + 3] {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(format!("bad occupied flag `{other}`"))),
        };

        let same_group = open
            .as_ref()
            .is_some_and(|o| o.household == household && o.date == date);
        if !same_group {
            close(&mut open, &mut seq_len)?;
            open = Some(Open {
                household,
                date,
                rows: Vec::with_capacity(HOURS_PER_DAY * f),
                y: Vec::with_capacity(HOURS_PER_DAY),
            });
        }
        let o = open.as_mut().expect("group opened above");
        if hour != o.y.len() {
            return Err(malformed(format!(
                "hour {hour} out of order (expected {})",
                o.y.len()
            )));
        }
        for field in &fields[3..3 + f] {
            let v: f64 = field
                .parse()
                .map_err(|_| malformed(format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(malformed(format!("non-finite feature `{field}`")));
            }
            o.rows.push(v);
        }
        o.y.push(occupied);
    }
    close(&mut open, &mut seq_len)?;
    Ok(samples)
}

/// 12 significant digits, scientific notation; `0` stays `0`.
fn fmt_sig12(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.11e}")
    }
}
