//! Accuracy metrics (per-image SSE, M-mode strips) and the latency
//! benchmark comparing constant-cost network inference with kernel
//! regression over growing databases.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::KdeModel;
use crate::lrcn::LrcnModel;
use crate::pca::{self, PcaModel};
use crate::phantom::ImageSeries;
use crate::real::Real;
use crate::sigproc::SpeedPatch;
use crate::train::TargetScaler;

/// `SSE_j = Σ_pixels (pred_j − truth_j)²` for every frame.
pub fn sse_per_image(pred: &ImageSeries, truth: &ImageSeries) -> Result<Vec<f64>> {
    if pred.n_images != truth.n_images || pred.height != truth.height || pred.width != truth.width {
        return Err(Error::shape(format!(
            "prediction is {}x{}x{}, truth is {}x{}x{}",
            pred.n_images, pred.height, pred.width, truth.n_images, truth.height, truth.width
        )));
    }
    Ok((0..pred.n_images)
        .map(|j| pred.frame(j).iter().zip(truth.frame(j)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SseSummary {
    pub per_image: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single image).
    pub std: f64,
}

impl SseSummary {
    pub fn new(per_image: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_image);
        Self { per_image, mean, std }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// SSE of one method against the PCA-space truth and against the raw images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub sse_pca: SseSummary,
    pub sse_raw: SseSummary,
}

impl MethodScores {
    pub fn score(pred: &ImageSeries, truth_raw: &ImageSeries, truth_pca: &ImageSeries) -> Result<Self> {
        Ok(Self {
            sse_pca: SseSummary::new(sse_per_image(pred, truth_pca)?),
            sse_raw: SseSummary::new(sse_per_image(pred, truth_raw)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_images: usize,
    /// Always predicts the PCA mean image.
    pub mean_predictor: MethodScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrcn: Option<MethodScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde: Option<MethodScores>,
    /// Wall-clock measurements; excluded from determinism comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<BenchReport>,
}

/// Time × height strip of one image column.
#[derive(Clone, Debug, PartialEq)]
pub struct MModeStrip {
    pub n_frames: usize,
    pub height: usize,
    /// `n_frames × height`, one row per frame.
    pub data: Vec<f64>,
}

impl MModeStrip {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.height..(j + 1) * self.height]
    }
}

pub fn mmode_extract(images: &ImageSeries, column: usize) -> Result<MModeStrip> {
    if column >= images.width {
        return Err(Error::invalid(format!(
            "column {column} out of range for width {}",
            images.width
        )));
    }
    let mut data = Vec::with_capacity(images.n_images * images.height);
    for j in 0..images.n_images {
        let f = images.frame(j);
        data.extend((0..images.height).map(|r| f[r * images.width + column]));
    }
    Ok(MModeStrip {
        n_frames: images.n_images,
        height: images.height,
        data,
    })
}

/// Pixel-wise `pred − truth`.
pub fn difference_images(pred: &ImageSeries, truth: &ImageSeries) -> Result<ImageSeries> {
    sse_per_image(pred, truth)?;
    ImageSeries::new(
        pred.frames.iter().zip(&truth.frames).map(|(a, b)| a - b).collect(),
        pred.n_images,
        pred.height,
        pred.width,
        pred.timestamps_s.clone(),
    )
}

pub enum Predictor<'a> {
    Lrcn {
        model: &'a LrcnModel<f32>,
        scaler: &'a TargetScaler,
    },
    /// Refit on the first N pool entries for each N of the sweep.
    Kde {
        patches: &'a [SpeedPatch],
        targets: &'a [Vec<f64>],
        bandwidth: Option<f64>,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_values: Vec<usize>,
    pub queries: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_values: vec![100, 200, 400, 800],
            queries: 30,
            repetitions: 3,
        }
    }
}

/// Per-query wall time in seconds; each query's time is the median over
/// repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: percentile(&s, 0.5),
            p95: percentile(&s, 0.95),
        }
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrcn: Option<TimingStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde: Option<TimingStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Seconds per stored sample.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub per_n: Vec<BenchPoint>,
    /// Least-squares fit of mean KDE query time against N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde_fit: Option<LinearFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde_spearman: Option<f64>,
    /// `(max − min) / mean` of mean LRCN query time across N.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lrcn_spread: Option<f64>,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx > 0.0 && syy > 0.0 {
        sxy / (sxx * syy).sqrt()
    } else {
        0.0
    }
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn median(mut t: Vec<f64>) -> f64 {
    t.sort_by(f64::total_cmp);
    let m = t.len();
    if m % 2 == 1 {
        t[m / 2]
    } else {
        0.5 * (t[m / 2 - 1] + t[m / 2])
    }
}

/// One timed configuration: a predictor at one database size.
struct Cell<'a> {
    point: usize,
    runner: Runner<'a>,
    /// `[query][repetition]` wall times in seconds.
    times: Vec<Vec<f64>>,
}

enum Runner<'a> {
    Lrcn {
        model: &'a LrcnModel<f32>,
        scaler: &'a TargetScaler,
    },
    Kde(KdeModel),
}

impl Runner<'_> {
    fn run(&self, pca_model: &PcaModel, q: &SpeedPatch) -> Result<Vec<f64>> {
        match self {
            Runner::Lrcn { model, scaler } => {
                let y: Vec<f64> = model.predict(q)?.iter().map(|v| v.to_f64()).collect();
                pca::reconstruct(pca_model, &scaler.invert(&y))
            }
            Runner::Kde(kde) => pca::reconstruct(pca_model, &kde.predict(q)?),
        }
    }
}

/// Times prediction plus PCA reconstruction per query, on the calling
/// thread, for every N of the sweep. Each configuration gets one untimed
/// warm-up query; repetitions then cycle through all configurations so
/// that slow drifts in machine speed affect every N alike. A query's time
/// is the median over repetitions.
pub fn bench_latency(
    predictors: &[Predictor<'_>],
    pca_model: &PcaModel,
    queries: &[SpeedPatch],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if predictors.is_empty() {
        return Err(Error::invalid("no predictors to benchmark"));
    }
    if cfg.queries < 30 || cfg.repetitions < 3 {
        return Err(Error::invalid("benchmark needs at least 30 queries and 3 repetitions"));
    }
    if queries.len() < cfg.queries {
        return Err(Error::invalid(format!(
            "{} queries requested, {} available",
            cfg.queries,
            queries.len()
        )));
    }
    if cfg.n_values.is_empty() {
        return Err(Error::invalid("empty N sweep"));
    }
    let queries = &queries[..cfg.queries];
    let mut cells = Vec::new();
    for p in predictors {
        for (point, &n) in cfg.n_values.iter().enumerate() {
            let runner = match *p {
                Predictor::Lrcn { model, scaler } => Runner::Lrcn { model, scaler },
                Predictor::Kde {
                    patches,
                    targets,
                    bandwidth,
                    seed,
                } => {
                    if n > patches.len() {
                        return Err(Error::invalid(format!(
                            "N = {n} exceeds the {} patches available",
                            patches.len()
                        )));
                    }
                    Runner::Kde(KdeModel::fit(&patches[..n], &targets[..n], bandwidth, seed)?)
                }
            };
            cells.push(Cell {
                point,
                runner,
                times: vec![Vec::with_capacity(cfg.repetitions); queries.len()],
            });
        }
    }
    for cell in &cells {
        black_box(cell.runner.run(pca_model, &queries[0])?);
    }
    for _ in 0..cfg.repetitions {
        for cell in &mut cells {
            for (q, times) in queries.iter().zip(&mut cell.times) {
                let t = Instant::now();
                black_box(cell.runner.run(pca_model, black_box(q))?);
                times.push(t.elapsed().as_secs_f64());
            }
        }
    }
    let mut per_n: Vec<BenchPoint> = cfg
        .n_values
        .iter()
        .map(|&n| BenchPoint { n, lrcn: None, kde: None })
        .collect();
    for cell in cells {
        let medians: Vec<f64> = cell.times.into_iter().map(median).collect();
        let stats = Some(TimingStats::from_samples(&medians));
        match cell.runner {
            Runner::Lrcn { .. } => per_n[cell.point].lrcn = stats,
            Runner::Kde(_) => per_n[cell.point].kde = stats,
        }
    }
    let ns: Vec<f64> = per_n.iter().map(|p| p.n as f64).collect();
    let kde_means: Option<Vec<f64>> = per_n.iter().map(|p| p.kde.as_ref().map(|t| t.mean)).collect();
    let lrcn_means: Option<Vec<f64>> = per_n.iter().map(|p| p.lrcn.as_ref().map(|t| t.mean)).collect();
    Ok(BenchReport {
        config: cfg.clone(),
        kde_fit: kde_means.as_ref().map(|m| linear_fit(&ns, m)),
        kde_spearman: kde_means.as_ref().map(|m| spearman(&ns, m)),
        lrcn_spread: lrcn_means.map(|m| {
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = m.iter().copied().fold(f64::INFINITY, f64::min);
            (max - min) / mean
        }),
        per_n,
    })
}
