//! Deterministic respiratory phantom.
//!
//! A shared breathing displacement drives both the A-mode ultrasound traces
//! (echo delays of a set of point scatterers) and MR-like images (smooth
//! anatomical features translated along the vertical axis). Traces fire once
//! per TR; images are acquired over `lines_per_image` TRs and treated as
//! instantaneous snapshots at the centre of that window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Quasi-periodic breathing: base sinusoid with smooth per-cycle jitter of
/// period and amplitude, plus a linear drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreathingParams {
    pub period_s: f64,
    pub amplitude_mm: f64,
    pub drift_mm_per_min: f64,
    pub period_jitter_frac: f64,
    pub amplitude_jitter_frac: f64,
    pub seed: u64,
}

impl Default for BreathingParams {
    fn default() -> Self {
        Self {
            period_s: 4.0,
            amplitude_mm: 5.0,
            drift_mm_per_min: 0.5,
            period_jitter_frac: 0.1,
            amplitude_jitter_frac: 0.1,
            seed: 0,
        }
    }
}

impl BreathingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return Err(Error::invalid("breathing period must be > 0"));
        }
        if !(self.amplitude_mm >= 0.0 && self.amplitude_mm.is_finite()) {
            return Err(Error::invalid("breathing amplitude must be >= 0"));
        }
        if !self.drift_mm_per_min.is_finite() {
            return Err(Error::invalid("drift must be finite"));
        }
        for (name, v) in [
            ("period_jitter_frac", self.period_jitter_frac),
            ("amplitude_jitter_frac", self.amplitude_jitter_frac),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Acquisition geometry shared by the trace and image streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub tr_s: f64,
    pub fs_hz: f64,
    pub f0_hz: f64,
    pub trace_len: usize,
    pub lines_per_image: usize,
    pub image_rate_fps: f64,
    pub image_size: usize,
    pub sound_speed_m_s: f64,
    /// Vertical and horizontal size of one image pixel.
    pub pixel_pitch_mm: f64,
    /// Additive white Gaussian noise on traces; `None` renders noiseless.
    pub snr_db: Option<f64>,
    /// Standard deviation of the Gaussian pulse envelope, in carrier cycles.
    pub pulse_sigma_cycles: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            tr_s: 0.01,
            fs_hz: 1e8,
            f0_hz: 1e6,
            trace_len: 20_000,
            lines_per_image: 60,
            image_rate_fps: 0.85,
            image_size: 192,
            sound_speed_m_s: 1540.0,
            pixel_pitch_mm: 1.0,
            snr_db: Some(30.0),
            pulse_sigma_cycles: 1.0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tr_s", self.tr_s),
            ("fs_hz", self.fs_hz),
            ("f0_hz", self.f0_hz),
            ("image_rate_fps", self.image_rate_fps),
            ("sound_speed_m_s", self.sound_speed_m_s),
            ("pixel_pitch_mm", self.pixel_pitch_mm),
            ("pulse_sigma_cycles", self.pulse_sigma_cycles),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0")));
            }
        }
        if self.trace_len == 0 || self.lines_per_image == 0 || self.image_size == 0 {
            return Err(Error::invalid("trace_len, lines_per_image and image_size must be >= 1"));
        }
        if self.image_period_s() + 1e-12 < self.lines_per_image as f64 * self.tr_s {
            return Err(Error::invalid(
                "image period is shorter than lines_per_image * tr_s",
            ));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::invalid("snr_db must be finite (use None for noiseless)"));
            }
        }
        Ok(())
    }

    pub fn image_period_s(&self) -> f64 {
        1.0 / self.image_rate_fps
    }

    /// Deepest representable echo, in millimetres.
    pub fn max_depth_mm(&self) -> f64 {
        self.sound_speed_m_s * self.trace_len as f64 / (2.0 * self.fs_hz) * 1e3
    }

    pub fn wavelength_mm(&self) -> f64 {
        self.sound_speed_m_s / self.f0_hz * 1e3
    }

    /// Round-trip echo delay of a reflector at `depth_mm`, in samples.
    pub fn delay_samples(&self, depth_mm: f64) -> f64 {
        2.0 * depth_mm * 1e-3 / self.sound_speed_m_s * self.fs_hz
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub depth_mm: f64,
    pub reflectivity: f64,
    /// Fraction of the breathing displacement this reflector follows.
    pub motion_gain: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScattererField {
    pub scatterers: Vec<Scatterer>,
}

impl ScattererField {
    pub fn new(scatterers: Vec<Scatterer>) -> Self {
        Self { scatterers }
    }

    /// Tissue-like field: `count` reflectors uniformly spread over
    /// `[min_depth_mm, max_depth_mm]`, with motion gain rising from 0.2 near
    /// the skin to 1.0 at depth.
    pub fn tissue(seed: u64, count: usize, min_depth_mm: f64, max_depth_mm: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7_7e25);
        let span = (max_depth_mm - min_depth_mm).max(0.0);
        let scatterers = (0..count)
            .map(|_| {
                let depth_mm = min_depth_mm + span * rng.gen::<f64>();
                let reflectivity = 0.2 + 0.8 * rng.gen::<f64>();
                let rel = if span > 0.0 { (depth_mm - min_depth_mm) / span } else { 1.0 };
                Scatterer {
                    depth_mm,
                    reflectivity,
                    motion_gain: 0.2 + 0.8 * rel,
                }
            })
            .collect();
        Self { scatterers }
    }

    pub fn validate(&self, cfg: &AcquisitionConfig) -> Result<()> {
        let max_depth = cfg.max_depth_mm();
        for (i, s) in self.scatterers.iter().enumerate() {
            if !(s.depth_mm.is_finite() && s.reflectivity.is_finite() && s.motion_gain.is_finite()) {
                return Err(Error::NonFinite {
                    index: i,
                    context: "scatterer".into(),
                });
            }
            if s.depth_mm < 0.0 || s.depth_mm > max_depth {
                return Err(Error::invalid(format!(
                    "scatterer {i} at {:.3} mm lies outside [0, {max_depth:.3}] mm",
                    s.depth_mm
                )));
            }
        }
        Ok(())
    }
}

/// Smooth feature of the MR-like image. Positions are in millimetres from
/// the top-left image corner; positive displacement moves features down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ImageFeature {
    /// Soft-edged ellipse.
    Blob {
        row_mm: f64,
        col_mm: f64,
        radius_row_mm: f64,
        radius_col_mm: f64,
        edge_mm: f64,
        intensity: f64,
        motion_gain: f64,
    },
    /// Soft half-plane below a (possibly tilted) boundary line.
    Band {
        boundary_row_mm: f64,
        tilt: f64,
        edge_mm: f64,
        intensity: f64,
        motion_gain: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAnatomy {
    pub features: Vec<ImageFeature>,
}

impl ImageAnatomy {
    /// Sagittal-slice caricature sized for a `size_mm` field of view: static
    /// body outline, a moving liver with vessels, and a kidney that moves less.
    pub fn abdomen(size_mm: f64) -> Self {
        let s = size_mm / 192.0;
        use ImageFeature::*;
        Self {
            features: vec![
                Blob {
                    row_mm: 96.0 * s,
                    col_mm: 96.0 * s,
                    radius_row_mm: 88.0 * s,
                    radius_col_mm: 80.0 * s,
                    edge_mm: 3.0 * s,
                    intensity: 0.2,
                    motion_gain: 0.0,
                },
                Band {
                    boundary_row_mm: 70.0 * s,
                    tilt: 0.25,
                    edge_mm: 2.0 * s,
                    intensity: 0.15,
                    motion_gain: 1.0,
                },
                Blob {
                    row_mm: 100.0 * s,
                    col_mm: 80.0 * s,
                    radius_row_mm: 34.0 * s,
                    radius_col_mm: 46.0 * s,
                    edge_mm: 2.0 * s,
                    intensity: 0.35,
                    motion_gain: 1.0,
                },
                Blob {
                    row_mm: 95.0 * s,
                    col_mm: 70.0 * s,
                    radius_row_mm: 5.0 * s,
                    radius_col_mm: 5.0 * s,
                    edge_mm: 1.0 * s,
                    intensity: -0.3,
                    motion_gain: 1.0,
                },
                Blob {
                    row_mm: 110.0 * s,
                    col_mm: 95.0 * s,
                    radius_row_mm: 3.5 * s,
                    radius_col_mm: 3.5 * s,
                    edge_mm: 1.0 * s,
                    intensity: -0.25,
                    motion_gain: 0.9,
                },
                Blob {
                    row_mm: 135.0 * s,
                    col_mm: 130.0 * s,
                    radius_row_mm: 16.0 * s,
                    radius_col_mm: 11.0 * s,
                    edge_mm: 1.5 * s,
                    intensity: 0.3,
                    motion_gain: 0.6,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSeries {
    /// `n_traces × samples_per_trace`, trace-major. Amplitudes are stored in
    /// single precision, matching the on-disk format.
    pub data: Vec<f32>,
    pub n_traces: usize,
    pub samples_per_trace: usize,
    pub fs_hz: f64,
    pub f0_hz: f64,
    pub tr_s: f64,
    pub t0_s: f64,
}

impl TraceSeries {
    pub fn new(
        data: Vec<f32>,
        n_traces: usize,
        samples_per_trace: usize,
        fs_hz: f64,
        f0_hz: f64,
        tr_s: f64,
        t0_s: f64,
    ) -> Result<Self> {
        if n_traces == 0 || samples_per_trace == 0 {
            return Err(Error::invalid("trace series needs at least one non-empty trace"));
        }
        if data.len() != n_traces * samples_per_trace {
            return Err(Error::shape(format!(
                "trace payload has {} values, expected {n_traces}x{samples_per_trace}",
                data.len()
            )));
        }
        ensure_finite(&data, "trace sample")?;
        Ok(Self {
            data,
            n_traces,
            samples_per_trace,
            fs_hz,
            f0_hz,
            tr_s,
            t0_s,
        })
    }

    pub fn trace(&self, i: usize) -> &[f32] {
        let n = self.samples_per_trace;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn time_of(&self, i: usize) -> f64 {
        self.t0_s + i as f64 * self.tr_s
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_traces).map(|i| self.time_of(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSeries {
    /// `n_images × height × width`, frame-major then row-major.
    pub frames: Vec<f64>,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub timestamps_s: Vec<f64>,
}

impl ImageSeries {
    pub fn new(
        frames: Vec<f64>,
        n_images: usize,
        height: usize,
        width: usize,
        timestamps_s: Vec<f64>,
    ) -> Result<Self> {
        if frames.len() != n_images * height * width {
            return Err(Error::shape(format!(
                "image payload has {} values, expected {n_images}x{height}x{width}",
                frames.len()
            )));
        }
        if timestamps_s.len() != n_images {
            return Err(Error::shape("one timestamp per image required"));
        }
        if timestamps_s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("image timestamps must be strictly increasing"));
        }
        ensure_finite(&frames, "image pixel")?;
        ensure_finite(&timestamps_s, "image timestamp")?;
        Ok(Self {
            frames,
            n_images,
            height,
            width,
            timestamps_s,
        })
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        let p = self.pixels_per_frame();
        &self.frames[j * p..(j + 1) * p]
    }

    /// Subset of frames in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut frames = Vec::with_capacity(indices.len() * self.pixels_per_frame());
        let mut ts = Vec::with_capacity(indices.len());
        for &j in indices {
            if j >= self.n_images {
                return Err(Error::invalid(format!("frame index {j} out of range")));
            }
            frames.extend_from_slice(self.frame(j));
            ts.push(self.timestamps_s[j]);
        }
        Self::new(frames, indices.len(), self.height, self.width, ts)
    }
}

/// Smoothstep and its integral over `[0, u]`.
fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

fn smoothstep_integral(u: f64) -> f64 {
    u * u * u - 0.5 * u * u * u * u
}

/// Per-knot jitter draws; knot `k` sits at `k * period_s`. The sequence
/// depends only on the seed, so any time grid sees the same motion.
fn breathing_knots(params: &BreathingParams, count: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut freq = Vec::with_capacity(count);
    let mut amp = Vec::with_capacity(count);
    for _ in 0..count {
        let up: f64 = rng.gen_range(-1.0..1.0);
        let ua: f64 = rng.gen_range(-1.0..1.0);
        freq.push(1.0 / (params.period_s * (1.0 + params.period_jitter_frac * up)));
        amp.push(params.amplitude_mm * (1.0 + params.amplitude_jitter_frac * ua));
    }
    (freq, amp)
}

/// Breathing displacement (mm) sampled on `t_grid` (seconds, increasing, >= 0).
///
/// The instantaneous frequency and the amplitude are C¹ smoothstep
/// interpolants of per-cycle jittered values, so the displacement is C¹.
/// Without jitter it reduces to `A·sin(2πt/T) + drift·t`.
pub fn gen_breathing(params: &BreathingParams, t_grid: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    let (&first, &last) = match (t_grid.first(), t_grid.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::invalid("empty time grid")),
    };
    ensure_finite(t_grid, "time grid")?;
    if first < 0.0 {
        return Err(Error::invalid("time grid must start at t >= 0"));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("time grid must be increasing"));
    }
    let knot_len = params.period_s;
    let count = (last / knot_len).floor() as usize + 2;
    let (freq, amp) = breathing_knots(params, count);

    // cumulative phase (in cycles) at each knot
    let mut cycles_at_knot = Vec::with_capacity(count);
    let mut acc = 0.0;
    for k in 0..count {
        cycles_at_knot.push(acc);
        if k + 1 < count {
            acc += knot_len * 0.5 * (freq[k] + freq[k + 1]);
        }
    }

    let drift_per_s = params.drift_mm_per_min / 60.0;
    let out = t_grid
        .iter()
        .map(|&t| {
            let pos = t / knot_len;
            let k = (pos.floor() as usize).min(count - 2);
            let u = pos - k as f64;
            let cycles = cycles_at_knot[k]
                + knot_len * (freq[k] * u + (freq[k + 1] - freq[k]) * smoothstep_integral(u));
            let a = amp[k] + (amp[k + 1] - amp[k]) * smoothstep(u);
            a * (std::f64::consts::TAU * cycles).sin() + drift_per_s * t
        })
        .collect();
    Ok(out)
}

/// Gaussian-windowed cosine at f0, sampled at fs, centred on index `half`.
fn pulse_template(cfg: &AcquisitionConfig) -> (Vec<f64>, usize) {
    let sigma = cfg.pulse_sigma_cycles * cfg.fs_hz / cfg.f0_hz;
    let half = (4.0 * sigma).ceil() as usize;
    let w = std::f64::consts::TAU * cfg.f0_hz / cfg.fs_hz;
    let template = (0..=2 * half)
        .map(|i| {
            let k = i as f64 - half as f64;
            (-k * k / (2.0 * sigma * sigma)).exp() * (w * k).cos()
        })
        .collect();
    (template, half)
}

/// Pre-computed rendering state for one (field, config) pair.
struct TraceRenderer<'a> {
    field: &'a ScattererField,
    cfg: &'a AcquisitionConfig,
    template: Vec<f64>,
    half: usize,
    noise_sigma: f64,
}

impl<'a> TraceRenderer<'a> {
    fn new(field: &'a ScattererField, cfg: &'a AcquisitionConfig) -> Result<Self> {
        cfg.validate()?;
        field.validate(cfg)?;
        let (template, half) = pulse_template(cfg);
        let noise_sigma = match cfg.snr_db {
            None => 0.0,
            Some(snr) => {
                // reference power of the noiseless trace, ignoring echo overlap
                let pulse_energy: f64 = template.iter().map(|v| v * v).sum();
                let refl_energy: f64 = field.scatterers.iter().map(|s| s.reflectivity.powi(2)).sum();
                let power = refl_energy * pulse_energy / cfg.trace_len as f64;
                (power / 10f64.powf(snr / 10.0)).sqrt()
            }
        };
        Ok(Self {
            field,
            cfg,
            template,
            half,
            noise_sigma,
        })
    }

    fn render_into(&self, displacement_mm: f64, noise_stream: Option<(u64, u64)>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let len = out.len() as i64;
        for s in &self.field.scatterers {
            let depth = s.depth_mm + s.motion_gain * displacement_mm;
            let delay = self.cfg.delay_samples(depth).round() as i64;
            let start = delay - self.half as i64;
            for (j, &p) in self.template.iter().enumerate() {
                let idx = start + j as i64;
                if idx >= 0 && idx < len {
                    out[idx as usize] += s.reflectivity * p;
                }
            }
        }
        if let (Some((seed, stream)), true) = (noise_stream, self.noise_sigma > 0.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            for v in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise_sigma * z;
            }
        }
    }
}

/// Renders one A-mode trace for the given breathing displacement.
///
/// `noise_seed` selects the noise realisation; it is ignored when the
/// config is noiseless.
pub fn render_trace(
    field: &ScattererField,
    displacement_mm: f64,
    cfg: &AcquisitionConfig,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    if !displacement_mm.is_finite() {
        return Err(Error::invalid("displacement must be finite"));
    }
    let renderer = TraceRenderer::new(field, cfg)?;
    let mut out = vec![0.0; cfg.trace_len];
    renderer.render_into(displacement_mm, Some((noise_seed, 0)), &mut out);
    Ok(out)
}

fn soft_step(x: f64) -> f64 {
    0.5 * (1.0 + (x).tanh())
}

/// Renders an `image_size × image_size` frame with every feature translated
/// vertically by `motion_gain · displacement_mm`.
pub fn render_image(anatomy: &ImageAnatomy, displacement_mm: f64, cfg: &AcquisitionConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !displacement_mm.is_finite() {
        return Err(Error::invalid("displacement must be finite"));
    }
    let n = cfg.image_size;
    let pitch = cfg.pixel_pitch_mm;
    let mut img = vec![0.0; n * n];
    for feature in &anatomy.features {
        match *feature {
            ImageFeature::Blob {
                row_mm,
                col_mm,
                radius_row_mm,
                radius_col_mm,
                edge_mm,
                intensity,
                motion_gain,
            } => {
                let r0 = row_mm + motion_gain * displacement_mm;
                let mean_radius = 0.5 * (radius_row_mm + radius_col_mm);
                for i in 0..n {
                    let y = (i as f64 + 0.5) * pitch - r0;
                    for j in 0..n {
                        let x = (j as f64 + 0.5) * pitch - col_mm;
                        let rho = ((y / radius_row_mm).powi(2) + (x / radius_col_mm).powi(2)).sqrt();
                        // signed distance to the boundary, approximately in mm
                        let dist = (1.0 - rho) * mean_radius;
                        img[i * n + j] += intensity * soft_step(dist / edge_mm);
                    }
                }
            }
            ImageFeature::Band {
                boundary_row_mm,
                tilt,
                edge_mm,
                intensity,
                motion_gain,
            } => {
                let b0 = boundary_row_mm + motion_gain * displacement_mm;
                let centre = n as f64 * pitch * 0.5;
                for i in 0..n {
                    let y = (i as f64 + 0.5) * pitch;
                    for j in 0..n {
                        let x = (j as f64 + 0.5) * pitch;
                        let boundary = b0 + tilt * (x - centre);
                        img[i * n + j] += intensity * soft_step((y - boundary) / edge_mm);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Index of the first trace of image `j`'s acquisition window.
pub fn image_window_start(cfg: &AcquisitionConfig, j: usize) -> usize {
    (j as f64 * cfg.image_period_s() / cfg.tr_s).round() as usize
}

/// Generates synchronized traces and images covering `duration_s`.
///
/// One trace per TR starting at t = 0. Image `j` occupies traces
/// `[start_j, start_j + lines_per_image)` and is timestamped at the centre of
/// that window; idle TRs between windows keep firing traces.
pub fn gen_dataset(
    breathing: &BreathingParams,
    field: &ScattererField,
    anatomy: &ImageAnatomy,
    cfg: &AcquisitionConfig,
    duration_s: f64,
) -> Result<(TraceSeries, ImageSeries)> {
    cfg.validate()?;
    breathing.validate()?;
    if !(duration_s.is_finite() && duration_s >= cfg.image_period_s()) {
        return Err(Error::invalid(format!(
            "duration {duration_s} s is shorter than one image period ({:.4} s)",
            cfg.image_period_s()
        )));
    }
    let n_traces = (duration_s / cfg.tr_s).round() as usize;
    let trace_times: Vec<f64> = (0..n_traces).map(|i| i as f64 * cfg.tr_s).collect();
    let displacement = gen_breathing(breathing, &trace_times)?;

    let renderer = TraceRenderer::new(field, cfg)?;
    let len = cfg.trace_len;
    let mut data = vec![0.0f32; n_traces * len];
    data.par_chunks_mut(len).enumerate().for_each_init(
        || vec![0.0f64; len],
        |scratch, (i, chunk)| {
            renderer.render_into(displacement[i], Some((breathing.seed, i as u64 + 1)), scratch);
            for (dst, src) in chunk.iter_mut().zip(scratch.iter()) {
                *dst = *src as f32;
            }
        },
    );
    let traces = TraceSeries::new(data, n_traces, len, cfg.fs_hz, cfg.f0_hz, cfg.tr_s, 0.0)?;

    let mut timestamps = Vec::new();
    let mut j = 0;
    loop {
        let start = image_window_start(cfg, j);
        if start + cfg.lines_per_image > n_traces {
            break;
        }
        let first = start as f64 * cfg.tr_s;
        let last = (start + cfg.lines_per_image - 1) as f64 * cfg.tr_s;
        timestamps.push(0.5 * (first + last));
        j += 1;
    }
    let disp_at_images = gen_breathing(breathing, &timestamps)?;
    let px = cfg.image_size * cfg.image_size;
    let mut frames = vec![0.0; timestamps.len() * px];
    frames
        .par_chunks_mut(px)
        .zip(disp_at_images.par_iter())
        .try_for_each(|(chunk, &d)| -> Result<()> {
            chunk.copy_from_slice(&render_image(anatomy, d, cfg)?);
            Ok(())
        })?;
    let images = ImageSeries::new(frames, timestamps.len(), cfg.image_size, cfg.image_size, timestamps)?;
    Ok((traces, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> BreathingParams {
        BreathingParams {
            period_s: 4.0,
            amplitude_mm: 5.0,
            drift_mm_per_min: 0.0,
            period_jitter_frac: 0.0,
            amplitude_jitter_frac: 0.0,
            seed: 7,
        }
    }

    fn quiet_cfg() -> AcquisitionConfig {
        AcquisitionConfig {
            snr_db: None,
            ..Default::default()
        }
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let p = BreathingParams {
            amplitude_mm: 0.0,
            drift_mm_per_min: 0.0,
            ..Default::default()
        };
        let t: Vec<f64> = (0..500).map(|i| i as f64 * 0.02).collect();
        assert!(gen_breathing(&p, &t).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn pure_sine_peaks_a_period_apart() {
        let t: Vec<f64> = (0..=8000).map(|i| i as f64 * 1e-3).collect();
        let d = gen_breathing(&still(), &t).unwrap();
        let peaks: Vec<f64> = (1..d.len() - 1)
            .filter(|&i| d[i] > d[i - 1] && d[i] >= d[i + 1])
            .map(|i| t[i])
            .collect();
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0] - 1.0).abs() < 1e-9);
        assert!((peaks[1] - 5.0).abs() < 1e-9);
        assert!((peaks[1] - peaks[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn breathing_is_deterministic_and_grid_independent() {
        let p = BreathingParams::default();
        let t: Vec<f64> = (0..3000).map(|i| i as f64 * 0.01).collect();
        let a = gen_breathing(&p, &t).unwrap();
        let b = gen_breathing(&p, &t).unwrap();
        assert_eq!(a, b);
        let sub = gen_breathing(&p, &t[1000..1010]).unwrap();
        assert_eq!(&a[1000..1010], &sub[..]);
    }

    #[test]
    fn jittered_breathing_is_c1() {
        let p = BreathingParams {
            period_jitter_frac: 0.3,
            amplitude_jitter_frac: 0.3,
            ..Default::default()
        };
        // slope change across every knot should vanish with the step size
        let h = 1e-6;
        for k in 1..6 {
            let t = k as f64 * p.period_s;
            let d = gen_breathing(&p, &[t - 2.0 * h, t - h, t, t + h, t + 2.0 * h]).unwrap();
            let left = (d[2] - d[1]) / h;
            let right = (d[3] - d[2]) / h;
            assert!((left - right).abs() < 1e-3, "kink at knot {k}: {left} vs {right}");
        }
    }

    #[test]
    fn breathing_rejects_empty_grid() {
        assert!(gen_breathing(&still(), &[]).is_err());
    }

    #[test]
    fn empty_field_noiseless_trace_is_zero() {
        let tr = render_trace(&ScattererField::default(), 0.0, &quiet_cfg(), 1).unwrap();
        assert_eq!(tr.len(), 20_000);
        assert!(tr.iter().all(|&v| v == 0.0));
    }

    fn envelope_peak(trace: &[f64]) -> usize {
        let a = crate::sigproc::analytic_transform(
            trace,
            1e8,
            &crate::sigproc::FermiFilterSpec::for_center_frequency(1e6),
        )
        .unwrap();
        a.magnitude()
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0
    }

    #[test]
    fn echo_lands_at_delay_index() {
        let cfg = quiet_cfg();
        let one = |depth: f64| {
            ScattererField::new(vec![Scatterer {
                depth_mm: depth,
                reflectivity: 1.0,
                motion_gain: 1.0,
            }])
        };
        // 2 * 0.030 m / 1540 m/s * 1e8 Hz = 3896.1
        let expected = (2.0f64 * 0.030 / 1540.0 * 1e8).round() as usize;
        assert_eq!(expected, 3896);
        let tr = render_trace(&one(30.0), 0.0, &cfg, 0).unwrap();
        assert!(envelope_peak(&tr).abs_diff(expected) <= 2);

        let shift = (2.0f64 * 0.00077 / 1540.0 * 1e8).round() as usize;
        assert_eq!(shift, 100);
        let moved = render_trace(&one(30.0), 0.77, &cfg, 0).unwrap();
        assert!(envelope_peak(&moved).abs_diff(expected + shift) <= 2);
    }

    #[test]
    fn scatterer_beyond_max_depth_is_rejected() {
        let cfg = quiet_cfg();
        let field = ScattererField::new(vec![Scatterer {
            depth_mm: cfg.max_depth_mm() + 1.0,
            reflectivity: 1.0,
            motion_gain: 0.0,
        }]);
        assert!(render_trace(&field, 0.0, &cfg, 0).is_err());
    }

    #[test]
    fn noisy_trace_is_seeded() {
        let cfg = AcquisitionConfig::default();
        let field = ScattererField::tissue(1, 20, 10.0, 50.0);
        let a = render_trace(&field, 0.3, &cfg, 9).unwrap();
        let b = render_trace(&field, 0.3, &cfg, 9).unwrap();
        let c = render_trace(&field, 0.3, &cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn xcorr_peak(a: &[f64], b: &[f64], n: usize, max_lag: i64) -> i64 {
        // vertical lag maximizing sum_{i,j} a[i+lag, j] * b[i, j]
        let mut best = (f64::MIN, 0);
        for lag in -max_lag..=max_lag {
            let mut s = 0.0;
            for i in 0..n as i64 {
                let k = i + lag;
                if k < 0 || k >= n as i64 {
                    continue;
                }
                for j in 0..n {
                    s += a[k as usize * n + j] * b[i as usize * n + j];
                }
            }
            if s > best.0 {
                best = (s, lag);
            }
        }
        best.1
    }

    #[test]
    fn image_translates_with_displacement() {
        let cfg = AcquisitionConfig {
            image_size: 64,
            pixel_pitch_mm: 1.0,
            ..quiet_cfg()
        };
        let anatomy = ImageAnatomy {
            features: vec![ImageFeature::Blob {
                row_mm: 32.0,
                col_mm: 32.0,
                radius_row_mm: 10.0,
                radius_col_mm: 14.0,
                edge_mm: 2.0,
                intensity: 1.0,
                motion_gain: 1.0,
            }],
        };
        let base = render_image(&anatomy, 0.0, &cfg).unwrap();
        assert_eq!(base, render_image(&anatomy, 0.0, &cfg).unwrap());
        let d = 4.3;
        let up = render_image(&anatomy, d, &cfg).unwrap();
        let down = render_image(&anatomy, -d, &cfg).unwrap();
        assert_eq!(xcorr_peak(&up, &base, 64, 10), 4);
        assert_eq!(xcorr_peak(&down, &base, 64, 10), -4);
    }

    #[test]
    fn dataset_counts_follow_rates() {
        let cfg = AcquisitionConfig {
            trace_len: 64,
            image_size: 8,
            snr_db: None,
            ..Default::default()
        };
        let field = ScattererField::default();
        let anatomy = ImageAnatomy::abdomen(8.0);
        let (tr, im) = gen_dataset(&still(), &field, &anatomy, &cfg, 60.0).unwrap();
        assert_eq!(tr.n_traces, 6000);
        assert_eq!(im.n_images, 51);
        for (j, &ts) in im.timestamps_s.iter().enumerate() {
            let start = image_window_start(&cfg, j);
            let first = tr.time_of(start);
            let last = tr.time_of(start + cfg.lines_per_image - 1);
            assert!(ts >= first && ts <= last);
            // images never precede their traces
            let seen = tr.times().iter().filter(|&&t| t <= ts).count();
            assert_eq!(seen, start + cfg.lines_per_image / 2);
        }
        let (tr90, _) = gen_dataset(&still(), &field, &anatomy, &cfg, 90.0).unwrap();
        assert_eq!(tr90.n_traces, 9000);
        assert!(gen_dataset(&still(), &field, &anatomy, &cfg, 0.1).is_err());
    }
}
