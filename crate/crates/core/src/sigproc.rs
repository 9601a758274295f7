//! Doppler-style phase processing of A-mode traces.
//!
//! Each trace is turned into a complex signal by zeroing negative frequencies
//! and rolling off very high ones with a Fermi weighting. The phase change
//! between consecutive traces at each depth gives a speed profile, which is
//! cropped to the depth window of interest and downsampled. Sliding windows
//! of those profiles form the network's input patches.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::phantom::{ImageSeries, TraceSeries};

/// Default depth window and output resolution of a speed profile.
pub const CROP_START: usize = 1000;
pub const CROP_END: usize = 8000;
pub const PROFILE_LEN: usize = 560;
pub const HISTORY_LEN: usize = 300;

/// Frequency-domain weighting: zero for negative frequencies, `dc_weight` at
/// DC, and `1 / (1 + exp((f - cutoff) / rolloff))` for positive ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FermiFilterSpec {
    pub cutoff_hz: f64,
    pub rolloff_width_hz: f64,
    pub dc_weight: f64,
}

impl FermiFilterSpec {
    /// Cutoff at ten times the transducer centre frequency.
    pub fn for_center_frequency(f0_hz: f64) -> Self {
        let cutoff_hz = 10.0 * f0_hz;
        Self {
            cutoff_hz,
            rolloff_width_hz: 0.05 * cutoff_hz,
            dc_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_hz > 0.0 && self.rolloff_width_hz > 0.0 && self.dc_weight.is_finite()) {
            return Err(Error::invalid("Fermi filter needs cutoff > 0 and rolloff > 0"));
        }
        Ok(())
    }

    pub fn weight(&self, f_hz: f64) -> f64 {
        1.0 / (1.0 + ((f_hz - self.cutoff_hz) / self.rolloff_width_hz).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticTrace {
    pub data: Vec<Complex64>,
}

impl AnalyticTrace {
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Phase in degrees, in `[-180, 180)`.
    pub fn phase_deg(&self) -> Vec<f64> {
        self.data.iter().map(|c| phase_deg(*c)).collect()
    }
}

fn phase_deg(c: Complex64) -> f64 {
    let p = c.im.atan2(c.re).to_degrees();
    if p >= 180.0 {
        p - 360.0
    } else {
        p
    }
}

/// Wraps an angle difference into `[-180, 180)` degrees.
pub fn wrap_deg(x: f64) -> f64 {
    x - 360.0 * ((x + 180.0) / 360.0).floor()
}

/// Reusable FFT plans and filter weights for one trace length.
pub struct AnalyticTransformer {
    len: usize,
    padded: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    weights: Vec<f64>,
}

impl AnalyticTransformer {
    pub fn new(len: usize, fs_hz: f64, filter: &FermiFilterSpec) -> Result<Self> {
        if len < 16 {
            return Err(Error::invalid(format!("trace length {len} < 16")));
        }
        if !(fs_hz > 0.0 && fs_hz.is_finite()) {
            return Err(Error::invalid("sampling rate must be > 0"));
        }
        filter.validate()?;
        let padded = len + len % 2;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(padded);
        let inverse = planner.plan_fft_inverse(padded);
        let scale = 1.0 / padded as f64;
        let weights = (0..padded)
            .map(|k| {
                if k == 0 {
                    filter.dc_weight * scale
                } else if k < padded / 2 {
                    filter.weight(k as f64 * fs_hz / padded as f64) * scale
                } else {
                    // Nyquist and negative frequencies
                    0.0
                }
            })
            .collect();
        Ok(Self {
            len,
            padded,
            forward,
            inverse,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
    }

    /// Transforms `trace` into `buf` (length `padded`); `scratch` is resized as needed.
    fn run<T: Copy + Into<f64>>(&self, trace: &[T], buf: &mut Vec<Complex64>, scratch: &mut Vec<Complex64>) {
        buf.clear();
        buf.extend(trace.iter().map(|&v| Complex64::new(v.into(), 0.0)));
        buf.resize(self.padded, Complex64::new(0.0, 0.0));
        scratch.resize(self.scratch_len(), Complex64::new(0.0, 0.0));
        self.forward.process_with_scratch(buf, scratch);
        for (c, w) in buf.iter_mut().zip(&self.weights) {
            *c *= *w;
        }
        self.inverse.process_with_scratch(buf, scratch);
    }

    pub fn transform<T: Copy + Into<f64>>(&self, trace: &[T]) -> Result<AnalyticTrace> {
        if trace.len() != self.len {
            return Err(Error::shape(format!(
                "trace has {} samples, transformer expects {}",
                trace.len(),
                self.len
            )));
        }
        ensure_finite(trace, "trace sample")?;
        let mut buf = Vec::with_capacity(self.padded);
        let mut scratch = Vec::new();
        self.run(trace, &mut buf, &mut scratch);
        buf.truncate(self.len);
        Ok(AnalyticTrace { data: buf })
    }

    fn phase_into<T: Copy + Into<f64>>(
        &self,
        trace: &[T],
        buf: &mut Vec<Complex64>,
        scratch: &mut Vec<Complex64>,
    ) -> Vec<f64> {
        self.run(trace, buf, scratch);
        buf[..self.len].iter().map(|c| phase_deg(*c)).collect()
    }
}

/// Complex analytic-like transform of a real trace. Odd lengths are padded
/// with one trailing zero internally; the output has the input's length.
pub fn analytic_transform(trace: &[f64], fs_hz: f64, filter: &FermiFilterSpec) -> Result<AnalyticTrace> {
    AnalyticTransformer::new(trace.len(), fs_hz, filter)?.transform(trace)
}

/// Per-trace-interval displacement from two phase profiles (degrees):
/// `α · wrap(θ_now − θ_prev) / 2` with `α = 0.5 λ / 360`, λ in mm.
pub fn phase_speed(theta_now: &[f64], theta_prev: &[f64], wavelength_mm: f64) -> Result<Vec<f64>> {
    if theta_now.len() != theta_prev.len() {
        return Err(Error::shape(format!(
            "phase profiles differ in length ({} vs {})",
            theta_now.len(),
            theta_prev.len()
        )));
    }
    let alpha = 0.5 * wavelength_mm / 360.0;
    Ok(theta_now
        .iter()
        .zip(theta_prev)
        .map(|(&a, &b)| alpha * wrap_deg(a - b) / 2.0)
        .collect())
}

/// Depth window `[start, end)` of a full-length profile, resampled to
/// `out_len` bins by area-weighted averaging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub trace_len: usize,
    pub start: usize,
    pub end: usize,
    pub out_len: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            trace_len: 20_000,
            start: CROP_START,
            end: CROP_END,
            out_len: PROFILE_LEN,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.start < self.end && self.end <= self.trace_len && self.out_len >= 1) {
            return Err(Error::invalid(format!("invalid crop window {self:?}")));
        }
        Ok(())
    }
}

pub fn crop_downscale(v_fullres: &[f64]) -> Result<Vec<f64>> {
    crop_downscale_with(v_fullres, &CropSpec::default())
}

pub fn crop_downscale_with(v: &[f64], crop: &CropSpec) -> Result<Vec<f64>> {
    crop.validate()?;
    if v.len() != crop.trace_len {
        return Err(Error::shape(format!(
            "profile has {} samples, expected {}",
            v.len(),
            crop.trace_len
        )));
    }
    let window = &v[crop.start..crop.end];
    let width = window.len() as f64 / crop.out_len as f64;
    let out = (0..crop.out_len)
        .map(|b| {
            let lo = b as f64 * width;
            let hi = lo + width;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(window.len());
            let mut acc = 0.0;
            for (i, &x) in window.iter().enumerate().take(last).skip(first) {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                acc += x * overlap;
            }
            acc / width
        })
        .collect();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedStreamConfig {
    pub filter: FermiFilterSpec,
    pub sound_speed_m_s: f64,
    pub crop: CropSpec,
}

impl SpeedStreamConfig {
    pub fn for_traces(traces: &TraceSeries) -> Self {
        Self {
            filter: FermiFilterSpec::for_center_frequency(traces.f0_hz),
            sound_speed_m_s: 1540.0,
            crop: CropSpec {
                trace_len: traces.samples_per_trace,
                ..CropSpec::default()
            },
        }
    }
}

/// Speed profiles over time, column-major: column `t` holds the `d` depth
/// values for trace `t`. Units are mm/s: the per-interval value of
/// [`phase_speed`] divided by TR. Reflectors moving toward the transducer
/// give positive values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedStream {
    pub data: Vec<f64>,
    pub d: usize,
    pub n_cols: usize,
    pub tr_s: f64,
    pub t0_s: f64,
}

impl SpeedStream {
    pub fn column(&self, t: usize) -> &[f64] {
        &self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.data[t * self.d + s]
    }

    pub fn time_of(&self, t: usize) -> f64 {
        self.t0_s + t as f64 * self.tr_s
    }

    /// Index of the latest column at or before `time_s`, if any.
    pub fn latest_at(&self, time_s: f64) -> Option<usize> {
        let pos = (time_s - self.t0_s) / self.tr_s;
        if pos < -1e-6 {
            return None;
        }
        let idx = (pos + 1e-6).floor() as usize;
        (idx < self.n_cols).then_some(idx)
    }
}

const STREAM_CHUNK: usize = 64;

/// Runs the full phase pipeline over every trace. Column 0 has no
/// predecessor and is all zeros.
pub fn compute_speed_stream(traces: &TraceSeries, cfg: &SpeedStreamConfig) -> Result<SpeedStream> {
    if traces.n_traces < 2 {
        return Err(Error::invalid("need at least two traces for a speed stream"));
    }
    if traces.samples_per_trace != cfg.crop.trace_len {
        return Err(Error::shape(format!(
            "traces have {} samples, crop expects {}",
            traces.samples_per_trace, cfg.crop.trace_len
        )));
    }
    cfg.crop.validate()?;
    let transformer = AnalyticTransformer::new(traces.samples_per_trace, traces.fs_hz, &cfg.filter)?;
    let wavelength_mm = cfg.sound_speed_m_s / traces.f0_hz * 1e3;
    let d = cfg.crop.out_len;
    let mut data = Vec::with_capacity(traces.n_traces * d);
    data.extend(std::iter::repeat(0.0).take(d));

    let mut prev: Option<Vec<f64>> = None;
    let mut start = 0;
    while start < traces.n_traces {
        let end = (start + STREAM_CHUNK).min(traces.n_traces);
        let phases: Vec<Vec<f64>> = (start..end)
            .into_par_iter()
            .map_init(
                || (Vec::new(), Vec::new()),
                |(buf, scratch), i| transformer.phase_into(traces.trace(i), buf, scratch),
            )
            .collect();
        for phase in phases {
            if let Some(p) = prev.as_ref() {
                let v = phase_speed(&phase, p, wavelength_mm)?;
                let col = crop_downscale_with(&v, &cfg.crop)?;
                data.extend(col.into_iter().map(|x| x / traces.tr_s));
            }
            prev = Some(phase);
        }
        start = end;
    }
    Ok(SpeedStream {
        data,
        d,
        n_cols: traces.n_traces,
        tr_s: traces.tr_s,
        t0_s: traces.t0_s,
    })
}

/// `d × n` window of speed profiles, stored column-major (column `j` is the
/// profile of trace `end_trace_index - n + 1 + j`).
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedPatch {
    pub data: Vec<f64>,
    pub d: usize,
    pub n: usize,
    pub end_trace_index: usize,
}

impl SpeedPatch {
    pub fn new(data: Vec<f64>, d: usize, n: usize, end_trace_index: usize) -> Result<Self> {
        if data.len() != d * n {
            return Err(Error::shape(format!("patch payload {} != {d}x{n}", data.len())));
        }
        ensure_finite(&data, "patch value")?;
        Ok(Self {
            data,
            d,
            n,
            end_trace_index,
        })
    }

    pub fn get(&self, s: usize, col: usize) -> f64 {
        self.data[col * self.d + s]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.d..(col + 1) * self.d]
    }
}

/// Patch ending at column `t`: columns `[t - n + 1, t]` in order.
pub fn assemble_patch(stream: &SpeedStream, t: usize, n: usize) -> Result<SpeedPatch> {
    if n == 0 {
        return Err(Error::invalid("patch length must be >= 1"));
    }
    if t + 1 < n {
        return Err(Error::InsufficientHistory { needed: n - 1, got: t });
    }
    if t >= stream.n_cols {
        return Err(Error::invalid(format!(
            "patch end {t} beyond stream of {} columns",
            stream.n_cols
        )));
    }
    let first = t + 1 - n;
    let data = stream.data[first * stream.d..(t + 1) * stream.d].to_vec();
    Ok(SpeedPatch {
        data,
        d: stream.d,
        n,
        end_trace_index: t,
    })
}

#[derive(Clone, Debug)]
pub struct AlignedPair {
    pub patch: SpeedPatch,
    pub image_index: usize,
}

#[derive(Clone, Debug)]
pub struct AlignedPairs {
    pub pairs: Vec<AlignedPair>,
    /// Images skipped for lack of history (or lying outside the stream).
    pub dropped: usize,
}

/// Pairs each image with the patch whose last column is the latest trace at
/// or before the image timestamp.
pub fn align_pairs(stream: &SpeedStream, images: &ImageSeries, n: usize) -> Result<AlignedPairs> {
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (j, &ts) in images.timestamps_s.iter().enumerate() {
        match stream.latest_at(ts) {
            Some(t) if t + 1 >= n => pairs.push(AlignedPair {
                patch: assemble_patch(stream, t, n)?,
                image_index: j,
            }),
            _ => dropped += 1,
        }
    }
    Ok(AlignedPairs { pairs, dropped })
}
