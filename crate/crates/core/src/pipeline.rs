//! End-to-end commands: phantom generation, training, inference,
//! evaluation, the kernel-regression baseline and the latency benchmark.
//! The `ocm` binary is a thin argument parser over these functions.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{self, BenchConfig, BenchReport, MethodScores, MetricsReport, Predictor, SseSummary};
use crate::formats::{self, ModelBundle, TraceMetadata};
use crate::kde::KdeModel;
use crate::lrcn::{ArchSpec, LrcnModel, RecurrentState};
use crate::pca::{self, PcaModel};
use crate::phantom::{self, AcquisitionConfig, BreathingParams, ImageAnatomy, ImageSeries, ScattererField, TraceSeries};
use crate::real::Real;
use crate::sigproc::{self, AlignedPair, SpeedPatch, SpeedStream, SpeedStreamConfig, HISTORY_LEN};
use crate::train::{self, TargetScaler, TrainConfig, TrainReport};

pub const DEFAULT_TRAIN_PAIRS: usize = 100;
pub const DEFAULT_TEST_PAIRS: usize = 50;
/// Long enough for 100 + 50 image pairs at 0.85 images/s.
pub const DEFAULT_DURATION_S: f64 = 180.0;
pub const PCA_COMPONENTS: usize = 10;

/// Columns per convolution call when featurising a long stream.
const FEATURE_CHUNK: usize = 256;

// ---------------------------------------------------------------- phantom

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub duration_s: f64,
    pub f0_hz: f64,
    pub breathing_period_s: f64,
    pub snr_db: Option<f64>,
    pub scatterers: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: DEFAULT_DURATION_S,
            f0_hz: 1e6,
            breathing_period_s: 4.0,
            snr_db: Some(30.0),
            scatterers: 60,
        }
    }
}

impl PhantomSpec {
    pub fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            f0_hz: self.f0_hz,
            snr_db: self.snr_db,
            ..AcquisitionConfig::default()
        }
    }

    pub fn breathing(&self) -> BreathingParams {
        BreathingParams {
            period_s: self.breathing_period_s,
            seed: self.seed,
            ..BreathingParams::default()
        }
    }

    /// Reflectors spread over the depth range kept by the default crop.
    pub fn field(&self) -> ScattererField {
        ScattererField::tissue(self.seed, self.scatterers, 10.0, 58.0)
    }

    pub fn anatomy(&self) -> ImageAnatomy {
        let cfg = self.acquisition();
        ImageAnatomy::abdomen(cfg.image_size as f64 * cfg.pixel_pitch_mm)
    }

    /// Traces and images, with image pixels rounded to the single precision
    /// they are stored at.
    pub fn generate(&self) -> Result<(TraceSeries, ImageSeries)> {
        let (traces, mut images) = phantom::gen_dataset(
            &self.breathing(),
            &self.field(),
            &self.anatomy(),
            &self.acquisition(),
            self.duration_s,
        )?;
        images.frames.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        Ok((traces, images))
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub timestamp_unix_s: u64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            extra: serde_json::Value::Null,
        })
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub struct PhantomFiles {
    pub traces: PathBuf,
    pub images: PathBuf,
    pub manifest: PathBuf,
    pub n_traces: usize,
    pub n_images: usize,
}

pub fn cmd_phantom(spec: &PhantomSpec, out_dir: &Path) -> Result<PhantomFiles> {
    let (traces, images) = spec.generate()?;
    std::fs::create_dir_all(out_dir)?;
    let tp = out_dir.join("traces.ocmt");
    let ip = out_dir.join("images.ocmi");
    formats::write_traces(&tp, &traces)?;
    formats::write_images(&ip, &images)?;
    let mp = out_dir.join("manifest.json");
    let manifest = RunManifest::new("phantom", spec, Some(spec.seed))?.output(&tp).output(&ip);
    formats::write_json(&mp, &manifest)?;
    Ok(PhantomFiles {
        traces: tp,
        images: ip,
        manifest: mp,
        n_traces: traces.n_traces,
        n_images: images.n_images,
    })
}

// ---------------------------------------------------------- data preparation

/// Speed stream and image pairs split chronologically into train and test.
pub struct PreparedData {
    pub stream: SpeedStream,
    pub stream_config: SpeedStreamConfig,
    pub traces: TraceMetadata,
    pub images: ImageSeries,
    pub train: Vec<AlignedPair>,
    pub test: Vec<AlignedPair>,
    /// Images without enough trace history for a full patch.
    pub dropped: usize,
}

impl PreparedData {
    pub fn train_images(&self) -> Result<ImageSeries> {
        self.images.select(&self.train.iter().map(|p| p.image_index).collect::<Vec<_>>())
    }

    pub fn test_images(&self) -> Result<ImageSeries> {
        self.images.select(&self.test.iter().map(|p| p.image_index).collect::<Vec<_>>())
    }
}

fn check_time_axes(traces: &TraceSeries, images: &ImageSeries) -> Result<()> {
    let first = traces.time_of(0);
    let last = traces.time_of(traces.n_traces - 1);
    let tol = 1e-6 * traces.tr_s;
    if let Some(bad) = images.timestamps_s.iter().find(|&&t| t < first - tol || t > last + tol) {
        return Err(Error::MetadataMismatch(format!(
            "image timestamp {bad} s lies outside the trace time span [{first}, {last}] s"
        )));
    }
    Ok(())
}

/// Speed stream, patch alignment and the chronological split: the first
/// `n_train` pairs train, the next `n_test` test.
pub fn prepare(
    traces: &TraceSeries,
    images: ImageSeries,
    stream_config: SpeedStreamConfig,
    n_train: usize,
    n_test: usize,
) -> Result<PreparedData> {
    check_time_axes(traces, &images)?;
    if n_train == 0 {
        return Err(Error::invalid("need at least one training pair"));
    }
    let stream = sigproc::compute_speed_stream(traces, &stream_config)?;
    let aligned = sigproc::align_pairs(&stream, &images, HISTORY_LEN)?;
    if aligned.pairs.len() < n_train + n_test {
        return Err(Error::invalid(format!(
            "{} image pairs available ({} images lack history), {n_train} train + {n_test} test requested",
            aligned.pairs.len(),
            aligned.dropped
        )));
    }
    let mut pairs = aligned.pairs;
    pairs.truncate(n_train + n_test);
    let test = pairs.split_off(n_train);
    Ok(PreparedData {
        stream,
        stream_config,
        traces: TraceMetadata::of(traces),
        images,
        train: pairs,
        test,
        dropped: aligned.dropped,
    })
}

/// PCA fitted on the training images, at stored precision, and the
/// training targets it defines.
pub fn fit_pca_targets(data: &PreparedData, k: usize) -> Result<(PcaModel, Vec<Vec<f64>>)> {
    let mut model = pca::fit(&data.train_images()?, k)?;
    formats::pca_to_stored_precision(&mut model);
    let targets = pca::project_series(&model, &data.train_images()?)?;
    Ok((model, targets))
}

// ------------------------------------------------------------------ train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub arch: ArchSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub pca_components: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            config: TrainConfig::default(),
            arch: ArchSpec::default(),
            n_train: DEFAULT_TRAIN_PAIRS,
            n_test: DEFAULT_TEST_PAIRS,
            pca_components: PCA_COMPONENTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub wall_time_s: f64,
}

/// Training metrics file. Everything outside `timing` is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub n_train: usize,
    pub n_test: usize,
    pub dropped_images: usize,
    pub param_count: usize,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub config: TrainConfig,
    pub timing: TrainTiming,
}

impl TrainMetrics {
    fn new(data: &PreparedData, bundle: &ModelBundle, report: &TrainReport) -> Self {
        Self {
            n_train: data.train.len(),
            n_test: data.test.len(),
            dropped_images: data.dropped,
            param_count: bundle.network.param_count(),
            seed: report.seed,
            epoch_losses: report.epoch_losses.clone(),
            final_loss: report.final_loss,
            config: report.config.clone(),
            timing: TrainTiming {
                wall_time_s: report.wall_time_s,
            },
        }
    }
}

/// Fits the PCA and trains the network on prepared data.
pub fn train_prepared(
    data: &PreparedData,
    opts: &TrainOptions,
    on_epoch: impl FnMut(usize, f64) -> ControlFlow<()>,
) -> Result<(ModelBundle, TrainMetrics)> {
    let mut arch = opts.arch.clone();
    arch.output_dim = opts.pca_components;
    arch.input_d = data.stream.d;
    arch.input_n = HISTORY_LEN;
    let (pca_model, targets) = fit_pca_targets(data, opts.pca_components)?;
    let patches: Vec<SpeedPatch> = data.train.iter().map(|p| p.patch.clone()).collect();
    let outcome = train::train_observed(&patches, &targets, &arch, &opts.config, on_epoch)?;
    let bundle = ModelBundle::new(
        pca_model,
        outcome.model,
        opts.config.clone(),
        data.traces.clone(),
        data.stream_config,
        outcome.scaler,
    );
    let metrics = TrainMetrics::new(data, &bundle, &outcome.report);
    Ok((bundle, metrics))
}

pub fn cmd_train(
    traces_path: &Path,
    images_path: &Path,
    opts: &TrainOptions,
    out_model: &Path,
    metrics_path: &Path,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainMetrics> {
    let traces = formats::read_traces(traces_path)?;
    let images = formats::read_images(images_path)?;
    let data = prepare(
        &traces,
        images,
        SpeedStreamConfig::for_traces(&traces),
        opts.n_train,
        opts.n_test,
    )?;
    drop(traces);
    let (bundle, metrics) = train_prepared(&data, opts, |e, l| {
        progress(e, l);
        ControlFlow::Continue(())
    })?;
    formats::write_model(out_model, &bundle)?;
    formats::write_json(metrics_path, &metrics)?;
    let manifest = RunManifest::new("train", opts, Some(opts.config.seed))?
        .input(traces_path)
        .input(images_path)
        .output(out_model)
        .output(metrics_path);
    formats::write_json(&manifest_path(out_model), &manifest)?;
    Ok(metrics)
}

// ------------------------------------------------------------------ infer

/// Speed stream for traces the model was trained on, after checking that
/// the acquisition parameters agree.
pub fn model_stream(bundle: &ModelBundle, traces: &TraceSeries) -> Result<SpeedStream> {
    bundle.header.traces.check(traces)?;
    let stream = sigproc::compute_speed_stream(traces, &bundle.header.speed_stream)?;
    if stream.d != bundle.network.arch().input_d {
        return Err(Error::MetadataMismatch(format!(
            "speed profiles have {} bins, network expects {}",
            stream.d,
            bundle.network.arch().input_d
        )));
    }
    Ok(stream)
}

/// Convolution features of every stream column, computed in chunks.
pub fn stream_features(network: &LrcnModel<f32>, stream: &SpeedStream) -> Result<Vec<f32>> {
    let d = stream.d;
    let mut out = Vec::with_capacity(stream.n_cols * network.arch().feature_dim());
    let mut start = 0;
    while start < stream.n_cols {
        let end = (start + FEATURE_CHUNK).min(stream.n_cols);
        out.extend(network.conv_features(&stream.data[start * d..end * d], end - start)?);
        start = end;
    }
    Ok(out)
}

/// Maps network output to image space.
pub fn coefficients_to_image(bundle: &ModelBundle, y: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
    let raw: Vec<f64> = y.iter().map(|v| v.to_f64()).collect();
    let coeffs = bundle.header.target_scaler.invert(&raw);
    let image = pca::reconstruct(&bundle.pca, &coeffs)?;
    Ok((coeffs, image))
}

pub struct Inference {
    pub images: ImageSeries,
    pub coefficients: Vec<Vec<f64>>,
    pub trace_indices: Vec<usize>,
}

/// One image for every `every`-th trace once a full patch of history
/// exists. With `stateful`, the recurrent state runs continuously over the
/// stream instead of restarting from zero for each patch.
pub fn infer(bundle: &ModelBundle, traces: &TraceSeries, every: usize, stateful: bool) -> Result<Inference> {
    if every == 0 {
        return Err(Error::invalid("--every must be >= 1"));
    }
    let n = bundle.network.arch().input_n;
    let stream = model_stream(bundle, traces)?;
    if stream.n_cols < n {
        return Err(Error::InsufficientHistory {
            needed: n - 1,
            got: stream.n_cols.saturating_sub(1),
        });
    }
    let features = stream_features(&bundle.network, &stream)?;
    let fd = bundle.network.arch().feature_dim();
    let selected: Vec<usize> = (n - 1..stream.n_cols).step_by(every).collect();

    let mut state: RecurrentState<f32> = bundle.network.zero_state();
    let mut fed = 0;
    let mut frames = Vec::with_capacity(selected.len() * bundle.pca.pixels());
    let mut coefficients = Vec::with_capacity(selected.len());
    for &t in &selected {
        let y = if stateful {
            let y = bundle
                .network
                .readout_stateful(&features[fed * fd..(t + 1) * fd], t + 1 - fed, &mut state)?;
            fed = t + 1;
            y
        } else {
            bundle.network.readout(&features[(t + 1 - n) * fd..(t + 1) * fd], n)?
        };
        let (c, image) = coefficients_to_image(bundle, &y)?;
        frames.extend(image);
        coefficients.push(c);
    }
    let times = selected.iter().map(|&t| stream.time_of(t)).collect();
    let images = ImageSeries::new(frames, selected.len(), bundle.pca.height, bundle.pca.width, times)?;
    Ok(Inference {
        images,
        coefficients,
        trace_indices: selected,
    })
}

#[derive(Clone, Debug, Serialize)]
struct InferConfig {
    every: usize,
    stateful: bool,
}

pub fn cmd_infer(
    model_path: &Path,
    traces_path: &Path,
    every: usize,
    stateful: bool,
    out: &Path,
    coeffs_csv: Option<&Path>,
) -> Result<usize> {
    let bundle = formats::read_model(model_path)?;
    let traces = formats::read_traces(traces_path)?;
    let result = infer(&bundle, &traces, every, stateful)?;
    formats::write_images(out, &result.images)?;
    let mut manifest = RunManifest::new("infer", InferConfig { every, stateful }, None)?
        .input(model_path)
        .input(traces_path)
        .output(out);
    if let Some(csv) = coeffs_csv {
        let mut w = std::io::BufWriter::new(std::fs::File::create(csv)?);
        let k = bundle.pca.k();
        let header: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        writeln!(w, "trace_index,time_s,{}", header.join(","))?;
        for ((t, c), time) in result
            .trace_indices
            .iter()
            .zip(&result.coefficients)
            .zip(&result.images.timestamps_s)
        {
            let cols: Vec<String> = c.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{t},{time},{}", cols.join(","))?;
        }
        w.flush()?;
        manifest = manifest.output(csv);
    }
    formats::write_json(&manifest_path(out), &manifest)?;
    Ok(result.images.n_images)
}

// ------------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub with_kde: bool,
    pub bandwidth: Option<f64>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_train: DEFAULT_TRAIN_PAIRS,
            n_test: DEFAULT_TEST_PAIRS,
            with_kde: false,
            bandwidth: None,
            seed: 0,
        }
    }
}

/// Test-split images of each evaluated method.
pub struct Evaluation {
    pub report: MetricsReport,
    pub truth: ImageSeries,
    pub truth_pca: ImageSeries,
    pub lrcn: Option<ImageSeries>,
    pub kde: Option<ImageSeries>,
}

fn series_like(template: &ImageSeries, frames: Vec<f64>) -> Result<ImageSeries> {
    ImageSeries::new(
        frames,
        template.n_images,
        template.height,
        template.width,
        template.timestamps_s.clone(),
    )
}

/// Kernel regression fitted on the training pairs with PCA-coefficient targets.
pub fn fit_kde(data: &PreparedData, pca_model: &PcaModel, bandwidth: Option<f64>, seed: u64) -> Result<KdeModel> {
    let targets = pca::project_series(pca_model, &data.train_images()?)?;
    let patches: Vec<SpeedPatch> = data.train.iter().map(|p| p.patch.clone()).collect();
    KdeModel::fit(&patches, &targets, bandwidth, seed)
}

/// Scores the mean-image predictor, and optionally the network and the
/// kernel regression, on the test split. Without a model the PCA is fitted
/// on the training images.
pub fn evaluate(
    bundle: Option<&ModelBundle>,
    traces: &TraceSeries,
    images: ImageSeries,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let stream_config = match bundle {
        Some(b) => {
            b.header.traces.check(traces)?;
            b.header.speed_stream
        }
        None => SpeedStreamConfig::for_traces(traces),
    };
    let data = prepare(traces, images, stream_config, opts.n_train, opts.n_test)?;
    if data.test.is_empty() {
        return Err(Error::invalid("evaluation needs at least one test pair"));
    }
    let pca_model = match bundle {
        Some(b) => b.pca.clone(),
        None => fit_pca_targets(&data, PCA_COMPONENTS.min(data.train.len()))?.0,
    };
    let truth = data.test_images()?;
    let truth_pca = pca::to_pca_space(&pca_model, &truth)?;
    let mean_frames = pca_model.mean.repeat(truth.n_images);
    let mean_pred = series_like(&truth, mean_frames)?;

    let lrcn = match bundle {
        Some(b) => {
            let mut frames = Vec::with_capacity(truth.frames.len());
            for pair in &data.test {
                frames.extend(coefficients_to_image(b, &b.network.predict(&pair.patch)?)?.1);
            }
            Some(series_like(&truth, frames)?)
        }
        None => None,
    };
    let kde = if opts.with_kde {
        let model = fit_kde(&data, &pca_model, opts.bandwidth, opts.seed)?;
        let mut frames = Vec::with_capacity(truth.frames.len());
        for pair in &data.test {
            frames.extend(pca::reconstruct(&pca_model, &model.predict(&pair.patch)?)?);
        }
        Some(series_like(&truth, frames)?)
    } else {
        None
    };
    let score = |p: &ImageSeries| MethodScores::score(p, &truth, &truth_pca);
    let report = MetricsReport {
        n_images: truth.n_images,
        mean_predictor: score(&mean_pred)?,
        lrcn: lrcn.as_ref().map(score).transpose()?,
        kde: kde.as_ref().map(score).transpose()?,
        timing: None,
    };
    Ok(Evaluation {
        report,
        truth,
        truth_pca,
        lrcn,
        kde,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ExportRecord {
    file: String,
    min: f64,
    max: f64,
}

/// M-mode strips through the image centre and first-frame difference images.
fn export_pgms(ev: &Evaluation, dir: &Path) -> Result<Vec<ExportRecord>> {
    std::fs::create_dir_all(dir)?;
    let col = ev.truth.width / 2;
    let mut records = Vec::new();
    let mut series: Vec<(&str, &ImageSeries)> = vec![("truth", &ev.truth), ("truth_pca", &ev.truth_pca)];
    if let Some(s) = &ev.lrcn {
        series.push(("lrcn", s));
    }
    if let Some(s) = &ev.kde {
        series.push(("kde", s));
    }
    for (name, s) in &series {
        // stored transposed so time runs left to right, depth downwards
        let strip = evalbench::mmode_extract(s, col)?;
        let mut img = vec![0.0; strip.data.len()];
        for j in 0..strip.n_frames {
            for r in 0..strip.height {
                img[r * strip.n_frames + j] = strip.data[j * strip.height + r];
            }
        }
        let file = format!("mmode_{name}.pgm");
        let (min, max) = formats::write_pgm(&dir.join(&file), strip.n_frames, strip.height, &img)?;
        records.push(ExportRecord { file, min, max });
        if *name != "truth" && *name != "truth_pca" {
            let diff = evalbench::difference_images(s, &ev.truth_pca)?;
            let file = format!("diff_{name}_0.pgm");
            let (min, max) = formats::write_pgm(&dir.join(&file), diff.width, diff.height, diff.frame(0))?;
            records.push(ExportRecord { file, min, max });
        }
    }
    Ok(records)
}

pub fn cmd_eval(
    model_path: Option<&Path>,
    traces_path: &Path,
    images_path: &Path,
    opts: &EvalOptions,
    out: &Path,
    export_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let bundle = model_path.map(formats::read_model).transpose()?;
    let traces = formats::read_traces(traces_path)?;
    let images = formats::read_images(images_path)?;
    let ev = evaluate(bundle.as_ref(), &traces, images, opts)?;
    formats::write_json(out, &ev.report)?;
    let mut manifest = RunManifest::new("eval", opts, Some(opts.seed))?
        .input(traces_path)
        .input(images_path)
        .output(out);
    if let Some(m) = model_path {
        manifest = manifest.input(m);
    }
    if let Some(dir) = export_dir {
        let records = export_pgms(&ev, dir)?;
        manifest = manifest.output(dir);
        manifest.extra = serde_json::json!({ "pgm_normalization": records });
    }
    formats::write_json(&manifest_path(out), &manifest)?;
    Ok(ev.report)
}

/// SSE of an image file against a reference file with the same frame layout.
pub fn cmd_compare(pred_path: &Path, truth_path: &Path, out: &Path) -> Result<SseSummary> {
    let pred = formats::read_images(pred_path)?;
    let truth = formats::read_images(truth_path)?;
    let summary = SseSummary::new(evalbench::sse_per_image(&pred, &truth)?);
    formats::write_json(out, &summary)?;
    Ok(summary)
}

// -------------------------------------------------------------------- kde

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeReport {
    pub bandwidth: f64,
    pub split: Split,
    pub n_database: usize,
    pub predictions: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Image SSE against the PCA-space truth.
    pub sse_pca: SseSummary,
}

/// Fits the baseline on the training pairs and predicts the chosen split.
pub fn run_kde(
    bundle: Option<&ModelBundle>,
    traces: &TraceSeries,
    images: ImageSeries,
    opts: &EvalOptions,
    split: Split,
) -> Result<KdeReport> {
    let stream_config = match bundle {
        Some(b) => {
            b.header.traces.check(traces)?;
            b.header.speed_stream
        }
        None => SpeedStreamConfig::for_traces(traces),
    };
    let data = prepare(traces, images, stream_config, opts.n_train, opts.n_test)?;
    let pca_model = match bundle {
        Some(b) => b.pca.clone(),
        None => fit_pca_targets(&data, PCA_COMPONENTS.min(data.train.len()))?.0,
    };
    let model = fit_kde(&data, &pca_model, opts.bandwidth, opts.seed)?;
    let (pairs, truth) = match split {
        Split::Train => (&data.train, data.train_images()?),
        Split::Test => (&data.test, data.test_images()?),
    };
    let targets = pca::project_series(&pca_model, &truth)?;
    let predictions = pairs.iter().map(|p| model.predict(&p.patch)).collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(truth.frames.len());
    for y in &predictions {
        frames.extend(pca::reconstruct(&pca_model, y)?);
    }
    let pred = series_like(&truth, frames)?;
    let truth_pca = pca::to_pca_space(&pca_model, &truth)?;
    Ok(KdeReport {
        bandwidth: model.bandwidth(),
        split,
        n_database: model.len(),
        predictions,
        targets,
        sse_pca: SseSummary::new(evalbench::sse_per_image(&pred, &truth_pca)?),
    })
}

pub fn cmd_kde(
    model_path: Option<&Path>,
    traces_path: &Path,
    images_path: &Path,
    opts: &EvalOptions,
    split: Split,
    out: &Path,
) -> Result<KdeReport> {
    let bundle = model_path.map(formats::read_model).transpose()?;
    let traces = formats::read_traces(traces_path)?;
    let images = formats::read_images(images_path)?;
    let report = run_kde(bundle.as_ref(), &traces, images, opts, split)?;
    formats::write_json(out, &report)?;
    let manifest = RunManifest::new("kde", opts, Some(opts.seed))?
        .input(traces_path)
        .input(images_path)
        .output(out);
    formats::write_json(&manifest_path(out), &manifest)?;
    Ok(report)
}

// ------------------------------------------------------------------ bench

/// Database of `count` patches at evenly spaced stream positions, each
/// labelled with the PCA coefficients of the image nearest in time. Image
/// pairs alone are too few for the larger database sizes of the sweep.
pub fn bench_pool(data: &PreparedData, pca_model: &PcaModel, count: usize) -> Result<(Vec<SpeedPatch>, Vec<Vec<f64>>)> {
    let n = HISTORY_LEN;
    let first = n - 1;
    let span = data.stream.n_cols - first;
    if count == 0 || span == 0 {
        return Err(Error::invalid("stream too short for a benchmark database"));
    }
    let coeffs = pca::project_series(pca_model, &data.images)?;
    let mut patches = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for i in 0..count {
        let t = first + i * span / count;
        patches.push(sigproc::assemble_patch(&data.stream, t, n)?);
        let time = data.stream.time_of(t);
        let nearest = data
            .images
            .timestamps_s
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - time).abs().total_cmp(&(b.1 - time).abs()))
            .map(|(j, _)| j)
            .unwrap_or(0);
        targets.push(coeffs[nearest].clone());
    }
    Ok((patches, targets))
}

/// `count` query windows spread evenly over the stream.
fn query_windows(stream: &SpeedStream, count: usize) -> Result<Vec<SpeedPatch>> {
    let first = HISTORY_LEN - 1;
    let span = stream.n_cols.saturating_sub(first);
    if span == 0 {
        return Err(Error::InsufficientHistory {
            needed: first,
            got: stream.n_cols.saturating_sub(1),
        });
    }
    (0..count)
        .map(|i| sigproc::assemble_patch(stream, first + (2 * i + 1) * span / (2 * count), HISTORY_LEN))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub bench: BenchConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub bandwidth: Option<f64>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            bench: BenchConfig::default(),
            n_train: DEFAULT_TRAIN_PAIRS,
            n_test: DEFAULT_TEST_PAIRS,
            bandwidth: None,
            seed: 0,
        }
    }
}

/// Latency sweep. Without a trained model, a freshly initialised default
/// network is timed: its cost does not depend on the weights.
pub fn run_bench(bundle: Option<&ModelBundle>, traces: &TraceSeries, images: ImageSeries, opts: &BenchOptions) -> Result<BenchReport> {
    let stream_config = match bundle {
        Some(b) => {
            b.header.traces.check(traces)?;
            b.header.speed_stream
        }
        None => SpeedStreamConfig::for_traces(traces),
    };
    let data = prepare(traces, images, stream_config, opts.n_train, opts.n_test)?;
    let owned;
    let bundle = match bundle {
        Some(b) => b,
        None => {
            let (pca_model, _) = fit_pca_targets(&data, PCA_COMPONENTS.min(data.train.len()))?;
            let arch = ArchSpec {
                output_dim: pca_model.k(),
                input_d: data.stream.d,
                ..ArchSpec::default()
            };
            let network = LrcnModel::init(&arch, opts.seed)?;
            owned = ModelBundle::new(
                pca_model,
                network,
                TrainConfig::default(),
                data.traces.clone(),
                stream_config,
                TargetScaler::identity(arch.output_dim),
            );
            &owned
        }
    };
    let max_n = opts.bench.n_values.iter().copied().max().unwrap_or(0);
    let (pool, pool_targets) = bench_pool(&data, &bundle.pca, max_n)?;
    let queries = query_windows(&data.stream, opts.bench.queries)?;
    let predictors = [
        Predictor::Lrcn {
            model: &bundle.network,
            scaler: &bundle.header.target_scaler,
        },
        Predictor::Kde {
            patches: &pool,
            targets: &pool_targets,
            bandwidth: opts.bandwidth,
            seed: opts.seed,
        },
    ];
    evalbench::bench_latency(&predictors, &bundle.pca, &queries, &opts.bench)
}

pub fn cmd_bench(
    model_path: Option<&Path>,
    traces_path: &Path,
    images_path: &Path,
    opts: &BenchOptions,
    out: &Path,
) -> Result<BenchReport> {
    let bundle = model_path.map(formats::read_model).transpose()?;
    let traces = formats::read_traces(traces_path)?;
    let images = formats::read_images(images_path)?;
    let report = run_bench(bundle.as_ref(), &traces, images, opts)?;
    formats::write_json(out, &report)?;
    let manifest = RunManifest::new("bench", opts, Some(opts.seed))?
        .input(traces_path)
        .input(images_path)
        .output(out);
    formats::write_json(&manifest_path(out), &manifest)?;
    Ok(report)
}
