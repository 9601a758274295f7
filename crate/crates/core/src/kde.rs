//! Nadaraya-Watson regression with a Gaussian kernel: the database baseline
//! whose per-query cost grows with the number of stored patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sigproc::SpeedPatch;

/// Pairs sampled by the bandwidth heuristic.
pub const BANDWIDTH_PAIRS: usize = 2000;

#[derive(Clone, Debug)]
pub struct KdeModel {
    /// `n × dim`, stored in single precision to halve memory.
    patches: Vec<f32>,
    /// `n × k`
    targets: Vec<f64>,
    n: usize,
    dim: usize,
    k: usize,
    bandwidth: f64,
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - f64::from(y);
            d * d
        })
        .sum()
}

/// Median Euclidean distance over up to [`BANDWIDTH_PAIRS`] random pairs of
/// distinct rows; 1.0 when there are no pairs or the median is zero.
fn median_distance(rows: &[f32], n: usize, dim: usize, seed: u64) -> f64 {
    if n < 2 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_pairs = n * (n - 1) / 2;
    let mut dists: Vec<f64> = if total_pairs <= BANDWIDTH_PAIRS {
        let mut v = Vec::with_capacity(total_pairs);
        for i in 0..n {
            let a: Vec<f64> = rows[i * dim..(i + 1) * dim].iter().map(|&x| f64::from(x)).collect();
            for j in i + 1..n {
                v.push(sq_dist(&a, &rows[j * dim..(j + 1) * dim]).sqrt());
            }
        }
        v
    } else {
        (0..BANDWIDTH_PAIRS)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let j = (i + rng.gen_range(1..n)) % n;
                let a: Vec<f64> = rows[i * dim..(i + 1) * dim].iter().map(|&x| f64::from(x)).collect();
                sq_dist(&a, &rows[j * dim..(j + 1) * dim]).sqrt()
            })
            .collect()
    };
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 && median.is_finite() {
        median
    } else {
        1.0
    }
}

impl KdeModel {
    /// Stores the training set. Without an explicit bandwidth, uses the
    /// median pairwise distance (pairs drawn from `seed`).
    pub fn fit(patches: &[SpeedPatch], targets: &[Vec<f64>], bandwidth: Option<f64>, seed: u64) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::invalid("kernel regression needs at least one training patch"))?;
        if targets.len() != patches.len() {
            return Err(Error::shape(format!(
                "{} patches but {} targets",
                patches.len(),
                targets.len()
            )));
        }
        let dim = first.data.len();
        let k = targets[0].len();
        if patches.iter().any(|p| p.data.len() != dim) || targets.iter().any(|t| t.len() != k) {
            return Err(Error::shape("training patches or targets differ in size"));
        }
        if let Some(h) = bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
            }
        }
        let n = patches.len();
        let rows: Vec<f32> = patches.iter().flat_map(|p| p.data.iter().map(|&v| v as f32)).collect();
        let bandwidth = bandwidth.unwrap_or_else(|| median_distance(&rows, n, dim, seed));
        Ok(Self {
            patches: rows,
            targets: targets.concat(),
            n,
            dim,
            k,
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Kernel-weighted mean of the stored targets.
    pub fn predict(&self, x: &SpeedPatch) -> Result<Vec<f64>> {
        if x.data.len() != self.dim {
            return Err(Error::shape(format!(
                "query has {} values, model stores {}",
                x.data.len(),
                self.dim
            )));
        }
        let inv = -0.5 / (self.bandwidth * self.bandwidth);
        let exponents: Vec<f64> = self
            .patches
            .chunks_exact(self.dim)
            .map(|row| sq_dist(&x.data, row) * inv)
            .collect();
        let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut y = vec![0.0; self.k];
        let mut total = 0.0;
        for (e, t) in exponents.iter().zip(self.targets.chunks_exact(self.k)) {
            let w = (e - max).exp();
            total += w;
            for (acc, v) in y.iter_mut().zip(t) {
                *acc += w * v;
            }
        }
        y.iter_mut().for_each(|v| *v /= total);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(v: Vec<f64>) -> SpeedPatch {
        let d = v.len();
        SpeedPatch::new(v, d, 1, 0).unwrap()
    }

    /// Values on a 1/64 grid so the single-precision store is exact.
    fn grid_data(n: usize, dim: usize, seed: u64) -> (Vec<SpeedPatch>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..n)
            .map(|_| patch((0..dim).map(|_| rng.gen_range(-64i32..64) as f64 / 64.0).collect()))
            .collect();
        let targets = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        (patches, targets)
    }

    #[test]
    fn matches_naive_double_loop() {
        let (p, t) = grid_data(50, 12, 1);
        let m = KdeModel::fit(&p, &t, None, 9).unwrap();
        let q = patch((0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let got = m.predict(&q).unwrap();
        let h = m.bandwidth();
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for (pi, ti) in p.iter().zip(&t) {
            let mut d2 = 0.0;
            for s in 0..12 {
                d2 += (q.data[s] - pi.data[s]).powi(2);
            }
            let w = (-d2 / (2.0 * h * h)).exp();
            den += w;
            for c in 0..3 {
                num[c] += w * ti[c];
            }
        }
        for c in 0..3 {
            assert!((got[c] - num[c] / den).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_bandwidth_interpolates() {
        let (p, t) = grid_data(20, 8, 2);
        let m = KdeModel::fit(&p, &t, Some(1e-6), 0).unwrap();
        let y = m.predict(&p[7]).unwrap();
        for (a, b) in y.iter().zip(&t[7]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_bandwidth_averages() {
        let (p, t) = grid_data(20, 8, 3);
        let m = KdeModel::fit(&p, &t, Some(1e6), 0).unwrap();
        let y = m.predict(&p[0]).unwrap();
        for c in 0..3 {
            let mean = t.iter().map(|r| r[c]).sum::<f64>() / 20.0;
            assert!((y[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn equidistant_query_averages_two_points() {
        let p = vec![patch(vec![1.0, 0.0]), patch(vec![-1.0, 0.0])];
        let t = vec![vec![2.0], vec![4.0]];
        let m = KdeModel::fit(&p, &t, Some(0.7), 0).unwrap();
        assert!((m.predict(&patch(vec![0.0, 3.0])).unwrap()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn predictions_stay_in_target_hull() {
        let (p, t) = grid_data(30, 6, 4);
        let m = KdeModel::fit(&p, &t, None, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = patch((0..6).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let y = m.predict(&q).unwrap();
            for c in 0..3 {
                let lo = t.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
                let hi = t.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(y[c] >= lo - 1e-12 && y[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn bandwidth_heuristic_guards_and_is_seeded() {
        let same = vec![patch(vec![1.0, 2.0]); 3];
        let t = vec![vec![0.0]; 3];
        assert_eq!(KdeModel::fit(&same, &t, None, 0).unwrap().bandwidth(), 1.0);
        assert_eq!(KdeModel::fit(&same[..1], &t[..1], None, 0).unwrap().bandwidth(), 1.0);
        let (p, t) = grid_data(100, 4, 6);
        let a = KdeModel::fit(&p, &t, None, 3).unwrap().bandwidth();
        assert_eq!(a, KdeModel::fit(&p, &t, None, 3).unwrap().bandwidth());
        assert!(a > 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(KdeModel::fit(&[], &[], None, 0), Err(Error::InvalidInput(_))));
        let (p, t) = grid_data(3, 4, 7);
        assert!(KdeModel::fit(&p, &t, Some(0.0), 0).is_err());
        let m = KdeModel::fit(&p, &t, None, 0).unwrap();
        assert!(matches!(m.predict(&patch(vec![0.0; 5])), Err(Error::Shape(_))));
    }
}
