//! Convolution stack along depth.
//!
//! Activations are stored channels-last as `[column][row][channel]`, where
//! each column (one time step) carries `pad` zero rows above and below its
//! data rows. With that layout a "same" convolution over every column is a
//! single GEMM whose left operand is an overlapping (Toeplitz) view of the
//! padded buffer: row `r` of the view starts at element `r * in_ch` and spans
//! `kernel * in_ch` elements. Output rows that straddle two columns are
//! computed but never read.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchSpec, ParamLayout};
use crate::real::Real;

pub(crate) struct ConvCache<T> {
    /// Padded input, `n_cols * (len + 2*pad)` rows of `in_ch`.
    pub input: Vec<T>,
    /// Layer output after dropout, `rows_out` rows of `out_ch`.
    pub act: Vec<T>,
    pub mask: Option<Vec<u8>>,
}

/// Geometry of conv layer `l` for `n_cols` columns.
#[derive(Clone, Copy)]
struct Geom {
    len: usize,
    padded: usize,
    rows_in: usize,
    rows_out: usize,
    in_ch: usize,
    out_ch: usize,
}

fn geometry(arch: &ArchSpec, layout: &ParamLayout, l: usize, n_cols: usize) -> Geom {
    let len = arch.conv_lengths()[l];
    let pad = arch.pad();
    let padded = len + 2 * pad;
    let rows_in = n_cols * padded;
    Geom {
        len,
        padded,
        rows_in,
        rows_out: rows_in - 2 * pad,
        in_ch: layout.conv[l].in_ch,
        out_ch: layout.conv[l].out_ch,
    }
}

/// `[out][in][tap]` → `[(tap, in)][out]`.
fn forward_weights<T: Real>(w: &[T], in_ch: usize, out_ch: usize, k: usize) -> Vec<T> {
    let mut m = vec![T::ZERO; k * in_ch * out_ch];
    for o in 0..out_ch {
        for i in 0..in_ch {
            for tap in 0..k {
                m[(tap * in_ch + i) * out_ch + o] = w[(o * in_ch + i) * k + tap];
            }
        }
    }
    m
}

/// `[out][in][tap]` → `[(k-1-tap, out)][in]`, the adjoint convolution.
fn adjoint_weights<T: Real>(w: &[T], in_ch: usize, out_ch: usize, k: usize) -> Vec<T> {
    let mut m = vec![T::ZERO; k * in_ch * out_ch];
    for o in 0..out_ch {
        for i in 0..in_ch {
            for tap in 0..k {
                m[((k - 1 - tap) * out_ch + o) * in_ch + i] = w[(o * in_ch + i) * k + tap];
            }
        }
    }
    m
}

fn dropout_mask(seed: u64, layer: usize, len: usize, keep: f64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64 + 1);
    let threshold = (keep * 4_294_967_296.0).round() as u64;
    let mut mask = Vec::with_capacity(len);
    let mut draws = [0u32; 1024];
    while mask.len() < len {
        let take = (len - mask.len()).min(draws.len());
        rng.fill(&mut draws[..take]);
        mask.extend(draws[..take].iter().map(|&u| u8::from(u64::from(u) < threshold)));
    }
    mask
}

/// Places column-major `[col][row]` input into the first layer's padded buffer.
fn pad_input<T: Real>(input: &[f64], n_cols: usize, d: usize, pad: usize) -> Vec<T> {
    let padded = d + 2 * pad;
    let mut buf = vec![T::ZERO; n_cols * padded];
    for t in 0..n_cols {
        let dst = &mut buf[t * padded + pad..t * padded + pad + d];
        for (x, &v) in dst.iter_mut().zip(&input[t * d..(t + 1) * d]) {
            *x = T::from_f64(v);
        }
    }
    buf
}

/// Runs the convolution stack. Returns per-column features
/// (`n_cols × feature_dim`, column-major) and, when `keep`, caches for
/// the backward pass.
pub(crate) fn forward<T: Real>(
    arch: &ArchSpec,
    layout: &ParamLayout,
    params: &[T],
    input: &[f64],
    n_cols: usize,
    dropout_seed: Option<u64>,
    keep: bool,
) -> (Vec<T>, Vec<ConvCache<T>>) {
    let layers = arch.conv_channels.len();
    if layers == 0 {
        return (input.iter().map(|&v| T::from_f64(v)).collect(), Vec::new());
    }
    let k = arch.kernel_size;
    let pad = arch.pad();
    let pool = arch.pool_size;
    let keep_prob = 1.0 - arch.dropout_rate;
    let scale = T::from_f64(1.0 / keep_prob);
    let use_dropout = dropout_seed.is_some() && arch.dropout_rate > 0.0;

    let mut caches = Vec::with_capacity(if keep { layers } else { 0 });
    let mut buf: Vec<T> = pad_input(input, n_cols, arch.input_d, pad);
    let mut features = Vec::new();
    for l in 0..layers {
        let g = geometry(arch, layout, l, n_cols);
        let slots = &layout.conv[l];
        let wmat = forward_weights(&params[slots.weights.clone()], g.in_ch, g.out_ch, k);
        let bias = &params[slots.bias.clone()];
        let mut act = vec![T::ZERO; g.rows_out * g.out_ch];
        unsafe {
            T::gemm(
                g.rows_out,
                k * g.in_ch,
                g.out_ch,
                T::ONE,
                buf.as_ptr(),
                g.in_ch as isize,
                1,
                wmat.as_ptr(),
                g.out_ch as isize,
                1,
                T::ZERO,
                act.as_mut_ptr(),
                g.out_ch as isize,
                1,
            );
        }
        // bias and tanh in cache-sized blocks
        for block in act.chunks_mut(g.out_ch * 256) {
            for row in block.chunks_exact_mut(g.out_ch) {
                for (a, &b) in row.iter_mut().zip(bias) {
                    *a += b;
                }
            }
            T::tanh_slice(block);
        }
        // dropout is applied in place; the backward pass recovers the tanh
        // output of kept units by undoing the scale
        let mask = use_dropout.then(|| {
            let mask = dropout_mask(dropout_seed.unwrap(), l, act.len(), keep_prob);
            let gain = [T::ZERO, scale];
            for (a, &m) in act.iter_mut().zip(&mask) {
                *a *= gain[usize::from(m)];
            }
            mask
        });

        let next = if l + 1 < layers {
            let next_len = g.len / pool;
            let next_padded = next_len + 2 * pad;
            let inv = T::from_f64(1.0 / pool as f64);
            let mut next = vec![T::ZERO; n_cols * next_padded * g.out_ch];
            for t in 0..n_cols {
                for s2 in 0..next_len {
                    let dst = (t * next_padded + pad + s2) * g.out_ch;
                    for j in 0..pool {
                        let src = (t * g.padded + s2 * pool + j) * g.out_ch;
                        for o in 0..g.out_ch {
                            next[dst + o] += act[src + o];
                        }
                    }
                    for o in 0..g.out_ch {
                        next[dst + o] *= inv;
                    }
                }
            }
            next
        } else {
            features = Vec::with_capacity(n_cols * g.len);
            for t in 0..n_cols {
                for s in 0..g.len {
                    features.push(act[(t * g.padded + s) * g.out_ch]);
                }
            }
            Vec::new()
        };
        let input_buf = std::mem::replace(&mut buf, next);
        if keep {
            caches.push(ConvCache {
                input: input_buf,
                act,
                mask,
            });
        }
    }
    (features, caches)
}

/// Backpropagates `d_features` through the stack, accumulating parameter
/// gradients into `grad`.
pub(crate) fn backward<T: Real>(
    arch: &ArchSpec,
    layout: &ParamLayout,
    params: &[T],
    caches: &[ConvCache<T>],
    n_cols: usize,
    d_features: &[T],
    grad: &mut [T],
) {
    let layers = arch.conv_channels.len();
    if layers == 0 {
        return;
    }
    let k = arch.kernel_size;
    let pad = arch.pad();
    let pool = arch.pool_size;
    let scale = T::from_f64(1.0 / (1.0 - arch.dropout_rate));

    let last = geometry(arch, layout, layers - 1, n_cols);
    let mut dact = vec![T::ZERO; last.rows_out * last.out_ch];
    for t in 0..n_cols {
        for s in 0..last.len {
            dact[(t * last.padded + s) * last.out_ch] = d_features[t * last.len + s];
        }
    }

    for l in (0..layers).rev() {
        let g = geometry(arch, layout, l, n_cols);
        let cache = &caches[l];
        let slots = &layout.conv[l];

        // through dropout and tanh; rows straddling columns carry zero gradient
        match &cache.mask {
            Some(mask) => {
                // table lookup instead of a branch: the mask is random
                let gain = [T::ZERO, scale];
                let keep = T::ONE / scale;
                for ((d, &a), &m) in dact.iter_mut().zip(&cache.act).zip(mask) {
                    let a = a * keep;
                    *d = *d * gain[usize::from(m)] * (T::ONE - a * a);
                }
            }
            None => {
                for (d, &a) in dact.iter_mut().zip(&cache.act) {
                    *d = *d * (T::ONE - a * a);
                }
            }
        }
        let dz = dact;

        let gb = &mut grad[slots.bias.clone()];
        for row in dz.chunks_exact(g.out_ch) {
            for (b, &v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }

        let mut dw = vec![T::ZERO; k * g.in_ch * g.out_ch];
        unsafe {
            T::gemm(
                k * g.in_ch,
                g.rows_out,
                g.out_ch,
                T::ONE,
                cache.input.as_ptr(),
                1,
                g.in_ch as isize,
                dz.as_ptr(),
                g.out_ch as isize,
                1,
                T::ZERO,
                dw.as_mut_ptr(),
                g.out_ch as isize,
                1,
            );
        }
        let gw = &mut grad[slots.weights.clone()];
        for o in 0..g.out_ch {
            for i in 0..g.in_ch {
                for tap in 0..k {
                    gw[(o * g.in_ch + i) * k + tap] += dw[(tap * g.in_ch + i) * g.out_ch + o];
                }
            }
        }

        if l == 0 {
            break;
        }

        // gradient w.r.t. the padded input: adjoint convolution as one GEMM
        let mut dz_padded = vec![T::ZERO; (g.rows_in + k - 1) * g.out_ch];
        dz_padded[(k - 1) * g.out_ch..(k - 1) * g.out_ch + dz.len()].copy_from_slice(&dz);
        drop(dz);
        let wadj = adjoint_weights(&params[slots.weights.clone()], g.in_ch, g.out_ch, k);
        let mut dinput = vec![T::ZERO; g.rows_in * g.in_ch];
        unsafe {
            T::gemm(
                g.rows_in,
                k * g.out_ch,
                g.in_ch,
                T::ONE,
                dz_padded.as_ptr(),
                g.out_ch as isize,
                1,
                wadj.as_ptr(),
                g.in_ch as isize,
                1,
                T::ZERO,
                dinput.as_mut_ptr(),
                g.in_ch as isize,
                1,
            );
        }
        drop(dz_padded);

        // through the average pool into the previous layer's activations
        let prev = geometry(arch, layout, l - 1, n_cols);
        let inv = T::from_f64(1.0 / pool as f64);
        let mut dprev = vec![T::ZERO; prev.rows_out * prev.out_ch];
        for t in 0..n_cols {
            for s2 in 0..g.len {
                let src = (t * g.padded + pad + s2) * g.in_ch;
                for j in 0..pool {
                    let dst = (t * prev.padded + s2 * pool + j) * prev.out_ch;
                    for o in 0..prev.out_ch {
                        dprev[dst + o] = dinput[src + o] * inv;
                    }
                }
            }
        }
        dact = dprev;
    }
}
