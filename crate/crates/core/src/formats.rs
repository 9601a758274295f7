//! Little-endian binary files for traces, images and trained models, plus
//! PGM and JSON exports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrcn::{ArchSpec, LrcnModel};
use crate::pca::PcaModel;
use crate::phantom::{ImageSeries, TraceSeries};
use crate::sigproc::SpeedStreamConfig;
use crate::train::{TargetScaler, TrainConfig};

pub const TRACE_MAGIC: &[u8; 4] = b"OCMT";
pub const IMAGE_MAGIC: &[u8; 4] = b"OCMI";
pub const MODEL_MAGIC: &[u8; 4] = b"OCMM";
pub const FORMAT_VERSION: u8 = 1;

const CHUNK: usize = 1 << 14;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(4 * CHUNK);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() == 4 * CHUNK {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![0u8; 4 * CHUNK];
    while out.len() < n {
        let take = (n - out.len()).min(CHUNK);
        read_exact(r, &mut buf[..4 * take])?;
        out.extend(buf[..4 * take].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
    }
    Ok(out)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit the file format")))
}

fn expect_preamble<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut head = [0u8; 5];
    read_exact(r, &mut head)?;
    if &head[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    if head[4] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    Ok(())
}

fn expect_end<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn write_traces(path: &Path, t: &TraceSeries) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&to_u32(t.n_traces, "n_traces")?.to_le_bytes())?;
    w.write_all(&to_u32(t.samples_per_trace, "samples_per_trace")?.to_le_bytes())?;
    for v in [t.fs_hz, t.f0_hz, t.tr_s, t.t0_s] {
        w.write_all(&v.to_le_bytes())?;
    }
    write_f32s(&mut w, t.data.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<TraceSeries> {
    let mut r = open(path)?;
    expect_preamble(&mut r, TRACE_MAGIC)?;
    let n = read_u32(&mut r)? as usize;
    let len = read_u32(&mut r)? as usize;
    let fs = read_f64(&mut r)?;
    let f0 = read_f64(&mut r)?;
    let tr = read_f64(&mut r)?;
    let t0 = read_f64(&mut r)?;
    let data = read_f32s(&mut r, n * len)?;
    expect_end(&mut r)?;
    TraceSeries::new(data, n, len, fs, f0, tr, t0)
}

pub fn write_images(path: &Path, im: &ImageSeries) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    for (v, what) in [(im.n_images, "n_images"), (im.height, "height"), (im.width, "width")] {
        w.write_all(&to_u32(v, what)?.to_le_bytes())?;
    }
    for t in &im.timestamps_s {
        w.write_all(&t.to_le_bytes())?;
    }
    write_f32s(&mut w, im.frames.iter().map(|&v| v as f32))?;
    w.flush()?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<ImageSeries> {
    let mut r = open(path)?;
    expect_preamble(&mut r, IMAGE_MAGIC)?;
    let n = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let ts = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    let frames = read_f32s(&mut r, n * h * w)?;
    expect_end(&mut r)?;
    ImageSeries::new(frames.into_iter().map(f64::from).collect(), n, h, w, ts)
}

/// Acquisition parameters a trace file must match to be fed to a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub fs_hz: f64,
    pub f0_hz: f64,
    pub tr_s: f64,
    pub samples_per_trace: usize,
}

impl TraceMetadata {
    pub fn of(t: &TraceSeries) -> Self {
        Self {
            fs_hz: t.fs_hz,
            f0_hz: t.f0_hz,
            tr_s: t.tr_s,
            samples_per_trace: t.samples_per_trace,
        }
    }

    pub fn check(&self, t: &TraceSeries) -> Result<()> {
        let other = Self::of(t);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        if !(close(self.fs_hz, other.fs_hz)
            && close(self.f0_hz, other.f0_hz)
            && close(self.tr_s, other.tr_s)
            && self.samples_per_trace == other.samples_per_trace)
        {
            return Err(Error::MetadataMismatch(format!(
                "model was trained on {self:?}, traces have {other:?}"
            )));
        }
        Ok(())
    }
}

/// JSON header of a model file. Array sizes follow from `arch` and `pca_*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub arch: ArchSpec,
    pub param_count: usize,
    pub pca_components: usize,
    pub pca_height: usize,
    pub pca_width: usize,
    pub pca_degenerate: bool,
    pub train_seed: u64,
    pub train_config: TrainConfig,
    pub traces: TraceMetadata,
    pub speed_stream: SpeedStreamConfig,
    pub target_scaler: TargetScaler,
}

/// Everything needed to turn traces into images.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub header: ModelHeader,
    pub pca: PcaModel,
    pub network: LrcnModel<f32>,
}

impl ModelBundle {
    pub fn new(
        pca: PcaModel,
        network: LrcnModel<f32>,
        train_config: TrainConfig,
        traces: TraceMetadata,
        speed_stream: SpeedStreamConfig,
        target_scaler: TargetScaler,
    ) -> Self {
        let header = ModelHeader {
            arch: network.arch().clone(),
            param_count: network.param_count(),
            pca_components: pca.k(),
            pca_height: pca.height,
            pca_width: pca.width,
            pca_degenerate: pca.degenerate,
            train_seed: train_config.seed,
            train_config,
            traces,
            speed_stream,
            target_scaler,
        };
        Self { header, pca, network }
    }
}

/// Rounds PCA arrays to single precision, the precision they are stored at.
pub fn pca_to_stored_precision(pca: &mut PcaModel) {
    for v in pca.mean.iter_mut().chain(&mut pca.basis).chain(&mut pca.variances) {
        *v = f64::from(*v as f32);
    }
}

pub fn write_model(path: &Path, m: &ModelBundle) -> Result<()> {
    let header = serde_json::to_vec(&m.header)?;
    let mut w = create(path)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&to_u32(header.len(), "header length")?.to_le_bytes())?;
    w.write_all(&header)?;
    let f = |v: &f64| *v as f32;
    write_f32s(&mut w, m.pca.mean.iter().map(f))?;
    write_f32s(&mut w, m.pca.basis.iter().map(f))?;
    write_f32s(&mut w, m.pca.variances.iter().map(f))?;
    write_f32s(&mut w, m.network.params().iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelBundle> {
    let mut r = open(path)?;
    expect_preamble(&mut r, MODEL_MAGIC)?;
    let len = read_u32(&mut r)? as usize;
    let mut raw = vec![0u8; len];
    read_exact(&mut r, &mut raw)?;
    let header: ModelHeader =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("model header: {e}")))?;
    let px = header.pca_height * header.pca_width;
    let k = header.pca_components;
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
    let mean = widen(read_f32s(&mut r, px)?);
    let basis = widen(read_f32s(&mut r, k * px)?);
    let variances = widen(read_f32s(&mut r, k)?);
    let params = read_f32s(&mut r, header.param_count)?;
    expect_end(&mut r)?;
    let pca = PcaModel {
        height: header.pca_height,
        width: header.pca_width,
        mean,
        basis,
        variances,
        degenerate: header.pca_degenerate,
    };
    let network = LrcnModel::from_params(&header.arch, params)
        .map_err(|e| Error::Format(format!("network parameters: {e}")))?;
    if network.arch().output_dim != k {
        return Err(Error::Format(format!(
            "network predicts {} coefficients but the PCA has {k}",
            network.arch().output_dim
        )));
    }
    Ok(ModelBundle { header, pca, network })
}

/// Writes an 8-bit binary PGM, min-max normalised. Returns the `(min, max)`
/// mapped to 0 and 255; a constant image maps to 0.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<(f64, f64)> {
    if data.len() != width * height || data.is_empty() {
        return Err(Error::shape(format!(
            "{} values for a {width}x{height} image",
            data.len()
        )));
    }
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut w = create(path)?;
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| if span > 0.0 { (255.0 * (v - min) / span).round() as u8 } else { 0 })
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok((min, max))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ocmt");
        let data: Vec<f32> = (0..3 * 7).map(|i| (i as f32 * 0.37).sin() * 1e-3).collect();
        let t = TraceSeries::new(data, 3, 7, 1e8, 1e6, 0.01, 0.5).unwrap();
        write_traces(&p, &t).unwrap();
        assert_eq!(read_traces(&p).unwrap(), t);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..5], b"OCMT\x01");
        assert_eq!(bytes.len(), 5 + 8 + 32 + 4 * 21);
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.ocmi");
        let frames: Vec<f64> = (0..2 * 3 * 4).map(|i| f64::from(i as f32 * 0.25)).collect();
        let im = ImageSeries::new(frames, 2, 3, 4, vec![0.1, 1.3]).unwrap();
        write_images(&p, &im).unwrap();
        assert_eq!(read_images(&p).unwrap(), im);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ocmt");
        let t = TraceSeries::new(vec![0.0; 8], 2, 4, 1e8, 1e6, 0.01, 0.0).unwrap();
        write_traces(&p, &t).unwrap();
        let good = std::fs::read(&p).unwrap();

        std::fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_traces(&p), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_traces(&p), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_traces(&p), Err(Error::Format(_))));
        let mut bad = good;
        bad.push(0);
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_traces(&p), Err(Error::Format(_))));
        assert!(matches!(read_images(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let range = write_pgm(&p, 2, 2, &[-1.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(range, (-1.0, 1.0));
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 191, 255]);
        write_pgm(&p, 1, 2, &[3.0, 3.0]).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[11..], &[0, 0]);
    }
}
