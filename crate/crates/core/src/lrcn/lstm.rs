//! LSTM layer over a sequence, with backpropagation through time.

use super::arch::LstmSlots;
use crate::real::Real;

pub(crate) struct LstmCache<T> {
    /// `n × in_dim`
    pub input: Vec<T>,
    /// `n × 4·units` post-activation gates, ordered input, forget, candidate, output.
    pub gates: Vec<T>,
    /// `n × units`
    pub cell: Vec<T>,
    pub cell_tanh: Vec<T>,
    /// `n × units`; the layer output.
    pub hidden: Vec<T>,
    pub h0: Vec<T>,
    pub c0: Vec<T>,
}

impl<T: Real> LstmCache<T> {
    pub fn final_state(&self) -> (&[T], &[T]) {
        let u = self.h0.len();
        let n = self.hidden.len() / u;
        (
            &self.hidden[(n - 1) * u..],
            &self.cell[(n - 1) * u..],
        )
    }
}

pub(crate) fn forward<T: Real>(
    slots: &LstmSlots,
    params: &[T],
    input: Vec<T>,
    n: usize,
    h0: &[T],
    c0: &[T],
) -> LstmCache<T> {
    let (din, u) = (slots.in_dim, slots.units);
    let mut gates = vec![T::ZERO; n * 4 * u];
    let mut cell = vec![T::ZERO; n * u];
    let mut cell_tanh = vec![T::ZERO; n * u];
    let mut hidden = vec![T::ZERO; n * u];
    let mut h_prev = h0.to_vec();
    let mut c_prev = c0.to_vec();
    for t in 0..n {
        let x = &input[t * din..(t + 1) * din];
        let g = &mut gates[t * 4 * u..(t + 1) * 4 * u];
        for (q, gs) in slots.gates.iter().enumerate() {
            let wx = &params[gs.input.clone()];
            let wh = &params[gs.recurrent.clone()];
            let b = &params[gs.bias.clone()];
            for k in 0..u {
                let mut z = b[k];
                z += wx[k * din..(k + 1) * din].iter().zip(x).map(|(&w, &v)| w * v).sum::<T>();
                z += wh[k * u..(k + 1) * u].iter().zip(&h_prev).map(|(&w, &v)| w * v).sum::<T>();
                g[q * u + k] = if q == 2 { z.tanh() } else { z.sigmoid() };
            }
        }
        for k in 0..u {
            let c = g[u + k] * c_prev[k] + g[k] * g[2 * u + k];
            let tc = c.tanh();
            cell[t * u + k] = c;
            cell_tanh[t * u + k] = tc;
            hidden[t * u + k] = g[3 * u + k] * tc;
        }
        h_prev.copy_from_slice(&hidden[t * u..(t + 1) * u]);
        c_prev.copy_from_slice(&cell[t * u..(t + 1) * u]);
    }
    LstmCache {
        input,
        gates,
        cell,
        cell_tanh,
        hidden,
        h0: h0.to_vec(),
        c0: c0.to_vec(),
    }
}

/// Backpropagation through time. `dh` is the gradient of the loss w.r.t.
/// every hidden output (`n × units`). Returns the gradient w.r.t. the input.
pub(crate) fn backward<T: Real>(
    slots: &LstmSlots,
    params: &[T],
    cache: &LstmCache<T>,
    dh: &[T],
    grad: &mut [T],
) -> Vec<T> {
    let (din, u) = (slots.in_dim, slots.units);
    let n = cache.hidden.len() / u;
    let mut dx = vec![T::ZERO; n * din];
    let mut dh_next = vec![T::ZERO; u];
    let mut dc_next = vec![T::ZERO; u];
    let mut dz = vec![T::ZERO; 4 * u];
    for t in (0..n).rev() {
        let g = &cache.gates[t * 4 * u..(t + 1) * 4 * u];
        let c_prev = if t == 0 { &cache.c0[..] } else { &cache.cell[(t - 1) * u..t * u] };
        let h_prev = if t == 0 { &cache.h0[..] } else { &cache.hidden[(t - 1) * u..t * u] };
        for k in 0..u {
            let (i, f, cand, o) = (g[k], g[u + k], g[2 * u + k], g[3 * u + k]);
            let tc = cache.cell_tanh[t * u + k];
            let dhk = dh[t * u + k] + dh_next[k];
            let dc = dhk * o * (T::ONE - tc * tc) + dc_next[k];
            dz[k] = dc * cand * i * (T::ONE - i);
            dz[u + k] = dc * c_prev[k] * f * (T::ONE - f);
            dz[2 * u + k] = dc * i * (T::ONE - cand * cand);
            dz[3 * u + k] = dhk * tc * o * (T::ONE - o);
            dc_next[k] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = T::ZERO);
        let x = &cache.input[t * din..(t + 1) * din];
        let dxt = &mut dx[t * din..(t + 1) * din];
        for (q, gs) in slots.gates.iter().enumerate() {
            for k in 0..u {
                let d = dz[q * u + k];
                grad[gs.bias.start + k] += d;
                let wx_at = gs.input.start + k * din;
                for j in 0..din {
                    grad[wx_at + j] += d * x[j];
                    dxt[j] += d * params[wx_at + j];
                }
                let wh_at = gs.recurrent.start + k * u;
                for j in 0..u {
                    grad[wh_at + j] += d * h_prev[j];
                    dh_next[j] += d * params[wh_at + j];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrcn::arch::{ArchSpec, ParamLayout};

    fn scalar_layout() -> LstmSlots {
        let arch = ArchSpec {
            conv_channels: vec![],
            kernel_size: 1,
            pool_size: 1,
            lstm_units: vec![1],
            output_dim: 1,
            dropout_rate: 0.0,
            input_d: 1,
            input_n: 1,
        };
        ParamLayout::new(&arch).lstm[0].clone()
    }

    fn sig(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn scalar_cell_matches_hand_computation() {
        let slots = scalar_layout();
        // per gate: input weight, recurrent weight, bias
        let p = [0.5, -0.3, 0.1, 0.2, 0.4, 1.0, -0.7, 0.6, 0.0, 0.9, 0.1, -0.2];
        let xs = [0.3, -1.2, 0.8];
        let cache = forward(&slots, &p, xs.to_vec(), 3, &[0.0], &[0.0]);
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for (t, &x) in xs.iter().enumerate() {
            let z = |q: usize| p[3 * q] * x + p[3 * q + 1] * h + p[3 * q + 2];
            let (i, f, g, o) = (sig(z(0)), sig(z(1)), z(2).tanh(), sig(z(3)));
            c = f * c + i * g;
            h = o * c.tanh();
            assert!((cache.hidden[t] - h).abs() < 1e-15);
            assert!((cache.cell[t] - c).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gates_copy_and_hold() {
        let slots = scalar_layout();
        // input gate and output gate fully open, forget gate shut, candidate = tanh(x)
        let mut p = [0.0; 12];
        p[2] = 50.0;
        p[5] = -50.0;
        p[6] = 1.0;
        p[11] = 50.0;
        let cache = forward(&slots, &p, vec![0.4, -0.9], 2, &[0.0], &[0.0]);
        assert!((cache.cell[1] - (-0.9f64).tanh()).abs() < 1e-12);
        // forget open, input shut: state is held
        p[2] = -50.0;
        p[5] = 50.0;
        let held = forward(&slots, &p, vec![0.4, -0.9], 2, &[0.0], &[0.25]);
        assert!((held.cell[1] - 0.25).abs() < 1e-12);
    }
}
