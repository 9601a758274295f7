use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ocm_lrcn::evalbench::mmode_extract;
use ocm_lrcn::formats::{self, ModelBundle, TraceMetadata};
use ocm_lrcn::lrcn::{ArchSpec, LrcnModel};
use ocm_lrcn::pca;
use ocm_lrcn::phantom::ImageSeries;
use ocm_lrcn::pipeline::{self, PhantomSpec, TrainOptions};
use ocm_lrcn::sigproc::{SpeedPatch, SpeedStreamConfig};
use ocm_lrcn::train::{TargetNormalization, TargetScaler, TrainConfig};

/// Vertical shift of `col` relative to `reference` maximising their correlation.
fn best_shift(reference: &[f64], col: &[f64], max_shift: i64) -> i64 {
    let h = reference.len() as i64;
    (-max_shift..=max_shift)
        .max_by(|&a, &b| {
            let score = |s: i64| -> f64 {
                (0..h)
                    .filter(|&r| (0..h).contains(&(r + s)))
                    .map(|r| reference[r as usize] * col[(r + s) as usize])
                    .sum()
            };
            score(a).total_cmp(&score(b))
        })
        .unwrap()
}

/// Period of the sinusoid `a·sin(ωt) + b·cos(ωt) + c` that best fits `y`,
/// searched over a grid.
fn fitted_period(t: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let residual = |period: f64| {
        let w = std::f64::consts::TAU / period;
        // least squares in the basis [sin, cos, 1] via normal equations
        let rows: Vec<[f64; 3]> = t.iter().map(|&t| [(w * t).sin(), (w * t).cos(), 1.0]).collect();
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut aty = nalgebra::Vector3::<f64>::zeros();
        for (r, &v) in rows.iter().zip(y) {
            let r = nalgebra::Vector3::from(*r);
            ata += r * r.transpose();
            aty += r * v;
        }
        let coef = ata.lu().solve(&aty).unwrap();
        rows.iter()
            .zip(y)
            .map(|(r, &v)| (v - nalgebra::Vector3::from(*r).dot(&coef)).powi(2))
            .sum::<f64>()
    };
    (0..=4000)
        .map(|i| lo + (hi - lo) * i as f64 / 4000.0)
        .min_by(|&a, &b| residual(a).total_cmp(&residual(b)))
        .unwrap()
}

#[test]
fn mmode_band_follows_breathing_period() {
    let spec = PhantomSpec {
        duration_s: 60.0,
        seed: 2,
        ..PhantomSpec::default()
    };
    let (_, images) = spec.generate().unwrap();
    let strip = mmode_extract(&images, images.width / 2).unwrap();
    let row = |j: usize| &strip.data[j * strip.height..(j + 1) * strip.height];
    let shifts: Vec<f64> = (0..strip.n_frames)
        .map(|j| best_shift(row(0), row(j), 20) as f64)
        .collect();
    let period = fitted_period(&images.timestamps_s, &shifts, 2.5, 8.0);
    let expected = spec.breathing_period_s;
    assert!(
        (period - expected).abs() / expected < 0.05,
        "band period {period:.3} s, breathing period {expected} s"
    );
}

fn small_arch() -> ArchSpec {
    ArchSpec {
        conv_channels: vec![4, 2, 1],
        lstm_units: vec![4, 4],
        dropout_rate: 0.0,
        ..ArchSpec::default()
    }
}

#[test]
fn training_loss_decreases_on_phantom() {
    let spec = PhantomSpec {
        duration_s: 20.0,
        seed: 6,
        ..PhantomSpec::default()
    };
    let (traces, images) = spec.generate().unwrap();
    let data = pipeline::prepare(&traces, images, SpeedStreamConfig::for_traces(&traces), 12, 2).unwrap();
    let opts = TrainOptions {
        config: TrainConfig {
            epochs: 30,
            seed: 3,
            target_normalization: TargetNormalization::PerComponent,
            ..TrainConfig::default()
        },
        arch: small_arch(),
        n_train: 12,
        n_test: 2,
        pca_components: 10,
    };
    let (_, metrics) = pipeline::train_prepared(&data, &opts, |_, _| ControlFlow::Continue(())).unwrap();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let losses = &metrics.epoch_losses;
    let first = median(&losses[..10]);
    let last = median(&losses[losses.len() - 10..]);
    assert!(last < first, "median loss went from {first} to {last}");
}

#[test]
fn output_depends_on_column_order() {
    let arch = ArchSpec::default();
    let model = LrcnModel::<f32>::init(&arch, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, n) = (arch.input_d, arch.input_n);
    let data: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let reversed: Vec<f64> = (0..n).rev().flat_map(|c| data[c * d..(c + 1) * d].to_vec()).collect();
    let y = model.predict(&SpeedPatch::new(data, d, n, n - 1).unwrap()).unwrap();
    let y_rev = model.predict(&SpeedPatch::new(reversed, d, n, n - 1).unwrap()).unwrap();
    let diff = y.iter().zip(&y_rev).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff > 1e-6, "reversing the columns left the output unchanged");
}

#[test]
fn model_file_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, n) = (6, 5, 12);
    let frames: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let images = ImageSeries::new(frames, n, h, w, (0..n).map(|j| j as f64).collect()).unwrap();
    let mut pca_model = pca::fit(&images, 4).unwrap();
    formats::pca_to_stored_precision(&mut pca_model);
    let arch = ArchSpec {
        output_dim: 4,
        ..ArchSpec::reduced()
    };
    let network = LrcnModel::<f32>::init(&arch, 8).unwrap();
    let bundle = ModelBundle::new(
        pca_model,
        network,
        TrainConfig::default(),
        TraceMetadata {
            fs_hz: 1e8,
            f0_hz: 1e6,
            tr_s: 0.01,
            samples_per_trace: 20000,
        },
        SpeedStreamConfig {
            crop: Default::default(),
            filter: ocm_lrcn::sigproc::FermiFilterSpec::for_center_frequency(1e6),
            sound_speed_m_s: 1540.0,
        },
        TargetScaler {
            mean: vec![0.5, -1.0, 0.0, 2.0],
            scale: vec![1.0, 0.25, 3.0, 1.0],
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ocmm");
    formats::write_model(&path, &bundle).unwrap();
    let back = formats::read_model(&path).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        serde_json::to_value(&back.header).unwrap(),
        serde_json::to_value(&bundle.header).unwrap()
    );
    assert_eq!(bits(&back.pca.mean), bits(&bundle.pca.mean));
    assert_eq!(bits(&back.pca.basis), bits(&bundle.pca.basis));
    assert_eq!(bits(&back.pca.variances), bits(&bundle.pca.variances));
    let pbits = |m: &LrcnModel<f32>| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(pbits(&back.network), pbits(&bundle.network));

    // writing the read-back bundle reproduces the file byte for byte
    let again = dir.path().join("again.ocmm");
    formats::write_model(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(formats::read_model(&path), Err(ocm_lrcn::Error::Format(_))));
}
