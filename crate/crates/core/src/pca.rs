//! Principal-component compression of image frames.
//!
//! Frames have far more pixels than there are frames, so components are
//! obtained from the eigendecomposition of the `n × n` Gram matrix of the
//! centred frames and mapped back to pixel space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ImageSeries;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    /// `k × (height·width)`, one orthonormal component per row.
    pub basis: Vec<f64>,
    /// Sample variance along each component, non-increasing.
    pub variances: Vec<f64>,
    /// Set when some components were filled in by orthonormal completion
    /// because the data carried no variance along them.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.variances.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.basis[i * p..(i + 1) * p]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.pixels();
        if self.mean.len() != p || self.basis.len() != self.k() * p {
            return Err(Error::shape("PCA model arrays disagree with its dimensions"));
        }
        Ok(())
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues (unsorted) and eigenvectors as columns of a
/// row-major `n × n` matrix.
pub(crate) fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob2: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= 1e-32 * frob2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i * n + i]).collect();
    (values, v)
}

/// Flips `vec` so its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(vec: &mut [f64]) {
    let mut best = 0;
    for (i, x) in vec.iter().enumerate() {
        if x.abs() > vec[best].abs() {
            best = i;
        }
    }
    if vec.get(best).is_some_and(|&x| x < 0.0) {
        vec.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits a `k`-component model. Deterministic for given inputs.
pub fn fit(images: &ImageSeries, k: usize) -> Result<PcaModel> {
    let n = images.n_images;
    let p = images.pixels_per_frame();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= k <= n_images, got k={k}, n={n}")));
    }
    if k > p {
        return Err(Error::invalid(format!("k={k} exceeds pixel count {p}")));
    }
    let mut mean = vec![0.0; p];
    for j in 0..n {
        for (m, x) in mean.iter_mut().zip(images.frame(j)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centred = Vec::with_capacity(n * p);
    for j in 0..n {
        centred.extend(images.frame(j).iter().zip(&mean).map(|(x, m)| x - m));
    }

    let mut gram = vec![0.0; n * n];
    unsafe {
        matrixmultiply::dgemm(
            n,
            p,
            n,
            1.0,
            centred.as_ptr(),
            p as isize,
            1,
            centred.as_ptr(),
            1,
            p as isize,
            0.0,
            gram.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    // exact symmetry so the solver sees a symmetric matrix
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (gram[i * n + j] + gram[j * n + i]);
            gram[i * n + j] = s;
            gram[j * n + i] = s;
        }
    }
    let (values, vectors) = jacobi_eigen(&gram, n);

    let gram_norm = gram.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (i, &lambda) in values.iter().enumerate() {
        let q: Vec<f64> = (0..n).map(|r| vectors[r * n + i]).collect();
        let residual: f64 = (0..n)
            .map(|r| {
                let gq: f64 = (0..n).map(|c| gram[r * n + c] * q[c]).sum();
                (gq - lambda * q[r]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        if residual > 1e-10 * gram_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::invalid(format!(
                "eigen-solver residual {residual:e} exceeds tolerance"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let lambda_max = values[order[0]].max(0.0);
    let tol = 1e-10 * lambda_max;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };

    let mut basis: Vec<f64> = Vec::with_capacity(k * p);
    let mut variances = Vec::with_capacity(k);
    let mut degenerate = false;
    for &idx in order.iter().take(k) {
        let lambda = values[idx];
        if lambda > tol && lambda_max > 0.0 {
            let mut u = vec![0.0; p];
            for r in 0..n {
                let w = vectors[r * n + idx];
                for (ui, x) in u.iter_mut().zip(&centred[r * p..(r + 1) * p]) {
                    *ui += w * x;
                }
            }
            let norm = dot(&u, &u).sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            canonical_sign(&mut u);
            basis.extend(u);
            variances.push(lambda / denom);
        } else {
            degenerate = true;
            let u = orthonormal_completion(&basis, p)?;
            basis.extend(u);
            variances.push(0.0);
        }
    }
    Ok(PcaModel {
        height: images.height,
        width: images.width,
        mean,
        basis,
        variances,
        degenerate,
    })
}

/// First unit vector that survives Gram-Schmidt against `basis`.
fn orthonormal_completion(basis: &[f64], p: usize) -> Result<Vec<f64>> {
    let k = basis.len() / p;
    for j in 0..p {
        let mut u = vec![0.0; p];
        u[j] = 1.0;
        for _ in 0..2 {
            for i in 0..k {
                let b = &basis[i * p..(i + 1) * p];
                let c = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&u, &u).sqrt();
        if norm > 0.5 {
            u.iter_mut().for_each(|x| *x /= norm);
            canonical_sign(&mut u);
            return Ok(u);
        }
    }
    Err(Error::invalid("no orthonormal completion available"))
}

/// Coefficients `y_i = basis_i · (image − mean)`.
pub fn project(model: &PcaModel, image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != model.pixels() {
        return Err(Error::shape(format!(
            "image has {} pixels, model expects {}",
            image.len(),
            model.pixels()
        )));
    }
    let centred: Vec<f64> = image.iter().zip(&model.mean).map(|(x, m)| x - m).collect();
    Ok((0..model.k()).map(|i| dot(model.component(i), &centred)).collect())
}

/// `mean + Σ y_i · basis_i`.
pub fn reconstruct(model: &PcaModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.k() {
        return Err(Error::shape(format!(
            "{} coefficients given, model has {}",
            y.len(),
            model.k()
        )));
    }
    let mut out = model.mean.clone();
    for (i, &c) in y.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(model.component(i)) {
            *o += c * b;
        }
    }
    Ok(out)
}

/// Projects every frame of a series.
pub fn project_series(model: &PcaModel, images: &ImageSeries) -> Result<Vec<Vec<f64>>> {
    (0..images.n_images).map(|j| project(model, images.frame(j))).collect()
}

/// Projects then reconstructs every frame: the series "in PCA space".
pub fn to_pca_space(model: &PcaModel, images: &ImageSeries) -> Result<ImageSeries> {
    let mut frames = Vec::with_capacity(images.frames.len());
    for j in 0..images.n_images {
        frames.extend(reconstruct(model, &project(model, images.frame(j))?)?);
    }
    ImageSeries::new(
        frames,
        images.n_images,
        images.height,
        images.width,
        images.timestamps_s.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(frames: Vec<Vec<f64>>, h: usize, w: usize) -> ImageSeries {
        let n = frames.len();
        let ts = (0..n).map(|i| i as f64).collect();
        ImageSeries::new(frames.concat(), n, h, w, ts).unwrap()
    }

    fn random_images(seed: u64, n: usize, p: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    /// `n` frames in a rank-`r` affine subspace.
    fn low_rank(seed: u64, n: usize, p: usize, r: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
        let dirs = random_images(seed + 1, r, p);
        (0..n)
            .map(|_| {
                let coef: Vec<f64> = (0..r).map(|_| rng.gen_range(-5.0..5.0)).collect();
                (0..p)
                    .map(|px| offset[px] + (0..r).map(|i| coef[i] * dirs[i][px]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn max_orthonormality_error(m: &PcaModel) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..m.k() {
            for j in 0..m.k() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(m.component(i), m.component(j)) - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identical_frames_are_degenerate() {
        let frame: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        let s = series(vec![frame.clone(); 5], 4, 4);
        let m = fit(&s, 3).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.mean, frame);
        assert!(m.variances.iter().all(|&v| v == 0.0));
        assert!(max_orthonormality_error(&m) < 1e-12);
    }

    #[test]
    fn rank_three_data_is_reconstructed_exactly() {
        let frames = low_rank(3, 12, 100, 3);
        let s = series(frames.clone(), 10, 10);
        let m = fit(&s, 3).unwrap();
        assert!(!m.degenerate);
        for f in &frames {
            let r = reconstruct(&m, &project(&m, f).unwrap()).unwrap();
            let err = r.iter().zip(f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn basis_invariants_hold() {
        let s = series(random_images(5, 20, 64), 8, 8);
        let m = fit(&s, 10).unwrap();
        assert!(max_orthonormality_error(&m) < 1e-8);
        assert!(m.variances.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.variances.iter().all(|&v| v >= 0.0));
        for i in 0..m.k() {
            let c = m.component(i);
            let big = c.iter().cloned().fold(0.0, |a: f64, x| a.max(x.abs()));
            let first = c.iter().find(|x| x.abs() == big).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn project_and_reconstruct_examples() {
        let s = series(random_images(6, 15, 36), 6, 6);
        let m = fit(&s, 4).unwrap();
        assert!(project(&m, &m.mean).unwrap().iter().all(|v| v.abs() < 1e-12));
        let img: Vec<f64> = m.mean.iter().zip(m.component(0)).map(|(a, b)| a + 2.0 * b).collect();
        let y = project(&m, &img).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-12);
        assert!(y[1..].iter().all(|v| v.abs() < 1e-12));
        assert_eq!(reconstruct(&m, &[0.0; 4]).unwrap(), m.mean);

        let x = &random_images(7, 1, 36)[0];
        let y1 = project(&m, x).unwrap();
        let y2 = project(&m, &reconstruct(&m, &y1).unwrap()).unwrap();
        assert!(y1.iter().zip(&y2).all(|(a, b)| (a - b).abs() < 1e-10));

        let back = reconstruct(&m, &y1).unwrap();
        let residual: Vec<f64> = x.iter().zip(&back).map(|(a, b)| a - b).collect();
        for i in 0..m.k() {
            assert!(dot(&residual, m.component(i)).abs() < 1e-8);
        }

        assert!(project(&m, &[0.0; 35]).is_err());
        assert!(reconstruct(&m, &[0.0; 3]).is_err());
    }

    #[test]
    fn k_larger_than_frames_is_rejected() {
        let s = series(random_images(1, 3, 16), 4, 4);
        assert!(fit(&s, 4).is_err());
        assert!(fit(&s, 0).is_err());
    }

    #[test]
    fn reconstruction_error_shrinks_with_k() {
        let frames = random_images(8, 10, 49);
        let s = series(frames.clone(), 7, 7);
        let mut last = f64::INFINITY;
        for k in 1..=10 {
            let m = fit(&s, k).unwrap();
            let sse: f64 = frames
                .iter()
                .map(|f| {
                    let r = reconstruct(&m, &project(&m, f).unwrap()).unwrap();
                    r.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(sse <= last + 1e-9);
            last = sse;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0];
        let (vals, vecs) = jacobi_eigen(&a, 3);
        for i in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r * 3 + c] * vecs[c * 3 + i]).sum();
                assert!((av - vals[i] * vecs[r * 3 + i]).abs() < 1e-12);
            }
        }
        let trace: f64 = vals.iter().sum();
        assert!((trace - 8.0).abs() < 1e-12);
    }
}
