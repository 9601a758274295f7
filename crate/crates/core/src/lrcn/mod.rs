//! Convolutional-recurrent regressor from speed patches to PCA coefficients.
//!
//! Each column of a patch passes independently through a 1-D convolution
//! stack along depth (tanh, dropout, average pooling between layers). The
//! per-column features form a sequence that feeds stacked LSTM layers, and a
//! dense layer reads the final hidden state.

mod arch;
mod conv;
mod lstm;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use arch::{param_count, ArchSpec, ConvSlots, DenseSlots, GateSlots, LstmSlots, ParamLayout};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::sigproc::SpeedPatch;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    Infer,
}

/// Intermediate values recorded by [`LrcnModel::forward`] for
/// [`LrcnModel::backward`]. Only valid for the model instance and parameter
/// version that produced it.
pub struct ForwardTape<T> {
    model_id: u64,
    version: u64,
    n_cols: usize,
    conv: Vec<conv::ConvCache<T>>,
    lstm: Vec<lstm::LstmCache<T>>,
    head_input: Vec<T>,
}

/// Recurrent state carried between calls in stateful streaming inference.
#[derive(Clone, Debug)]
pub struct RecurrentState<T> {
    pub hidden: Vec<Vec<T>>,
    pub cell: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `[out][in][kernel]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub input: Vec<T>,
    pub recurrent: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// input, forget, candidate, output
    pub gates: [GateParams<T>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Structured view of all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub conv: Vec<ConvParams<T>>,
    pub lstm: Vec<LstmParams<T>>,
    pub dense: DenseParams<T>,
}

pub struct LrcnModel<T: Real = f32> {
    arch: ArchSpec,
    layout: ParamLayout,
    params: Vec<T>,
    id: u64,
    version: u64,
}

impl<T: Real> Clone for LrcnModel<T> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl<T: Real> std::fmt::Debug for LrcnModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LrcnModel")
            .field("arch", &self.arch)
            .field("param_count", &self.params.len())
            .finish()
    }
}

fn glorot(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    for v in out {
        *v = dist.sample(rng);
    }
}

impl<T: Real> LrcnModel<T> {
    /// Glorot-uniform weights, zero biases except the forget gate (1.0).
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(arch);
        let mut p = vec![0.0f64; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.kernel_size;
        for c in &layout.conv {
            glorot(&mut rng, &mut p[c.weights.clone()], c.in_ch * k, c.out_ch * k);
        }
        for l in &layout.lstm {
            for (q, g) in l.gates.iter().enumerate() {
                glorot(&mut rng, &mut p[g.input.clone()], l.in_dim, 4 * l.units);
                glorot(&mut rng, &mut p[g.recurrent.clone()], l.units, 4 * l.units);
                if q == 1 {
                    p[g.bias.clone()].iter_mut().for_each(|b| *b = 1.0);
                }
            }
        }
        let d = &layout.dense;
        glorot(&mut rng, &mut p[d.weights.clone()], d.in_dim, d.out_dim);
        Ok(Self {
            arch: arch.clone(),
            layout,
            params: p.into_iter().map(T::from_f64).collect(),
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn from_params(arch: &ArchSpec, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(arch);
        if params.len() != layout.total {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            arch: arch.clone(),
            layout,
            params,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.version += 1;
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> LrcnModel<U> {
        LrcnModel {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn unflatten(&self) -> LayerParams<T> {
        let p = &self.params;
        let take = |r: &std::ops::Range<usize>| p[r.clone()].to_vec();
        LayerParams {
            conv: self
                .layout
                .conv
                .iter()
                .map(|c| ConvParams {
                    weights: take(&c.weights),
                    bias: take(&c.bias),
                })
                .collect(),
            lstm: self
                .layout
                .lstm
                .iter()
                .map(|l| LstmParams {
                    gates: l.gates.clone().map(|g| GateParams {
                        input: take(&g.input),
                        recurrent: take(&g.recurrent),
                        bias: take(&g.bias),
                    }),
                })
                .collect(),
            dense: DenseParams {
                weights: take(&self.layout.dense.weights),
                bias: take(&self.layout.dense.bias),
            },
        }
    }

    pub fn from_layers(arch: &ArchSpec, layers: &LayerParams<T>) -> Result<Self> {
        arch.validate()?;
        let layout = ParamLayout::new(arch);
        let mut params = vec![T::ZERO; layout.total];
        let mut put = |r: &std::ops::Range<usize>, v: &[T], what: &str| -> Result<()> {
            if v.len() != r.len() {
                return Err(Error::shape(format!("{what}: expected {} values, got {}", r.len(), v.len())));
            }
            params[r.clone()].copy_from_slice(v);
            Ok(())
        };
        if layers.conv.len() != layout.conv.len() || layers.lstm.len() != layout.lstm.len() {
            return Err(Error::shape("layer count does not match architecture"));
        }
        for (s, c) in layout.conv.iter().zip(&layers.conv) {
            put(&s.weights, &c.weights, "conv weights")?;
            put(&s.bias, &c.bias, "conv bias")?;
        }
        for (s, l) in layout.lstm.iter().zip(&layers.lstm) {
            for (gs, g) in s.gates.iter().zip(&l.gates) {
                put(&gs.input, &g.input, "lstm input kernel")?;
                put(&gs.recurrent, &g.recurrent, "lstm recurrent kernel")?;
                put(&gs.bias, &g.bias, "lstm bias")?;
            }
        }
        put(&layout.dense.weights, &layers.dense.weights, "dense weights")?;
        put(&layout.dense.bias, &layers.dense.bias, "dense bias")?;
        Self::from_params(arch, params)
    }

    fn check_patch(&self, x: &SpeedPatch) -> Result<()> {
        if x.d != self.arch.input_d || x.n != self.arch.input_n {
            return Err(Error::shape(format!(
                "patch is {}x{}, model expects {}x{}",
                x.d, x.n, self.arch.input_d, self.arch.input_n
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &SpeedPatch, mode: Mode) -> Result<(Vec<T>, ForwardTape<T>)> {
        self.check_patch(x)?;
        let dropout = match mode {
            Mode::Train { dropout_seed } => Some(dropout_seed),
            Mode::Infer => None,
        };
        let (features, conv) = conv::forward(&self.arch, &self.layout, &self.params, &x.data, x.n, dropout, true);
        let (lstm, head_input) = self.recurrent(features, x.n, None);
        let y = self.dense(&head_input);
        let tape = ForwardTape {
            model_id: self.id,
            version: self.version,
            n_cols: x.n,
            conv,
            lstm,
            head_input,
        };
        Ok((y, tape))
    }

    /// Inference-mode forward pass without recording a tape.
    pub fn predict(&self, x: &SpeedPatch) -> Result<Vec<T>> {
        self.check_patch(x)?;
        let features = self.conv_features(&x.data, x.n)?;
        self.readout(&features, x.n)
    }

    /// Convolution features for `n_cols` consecutive columns of depth
    /// `input_d` (column-major). Columns are processed independently, so
    /// features of a long stream can be computed once and sliced per window.
    pub fn conv_features(&self, columns: &[f64], n_cols: usize) -> Result<Vec<T>> {
        if columns.len() != n_cols * self.arch.input_d || n_cols == 0 {
            return Err(Error::shape(format!(
                "expected {} columns of depth {}, got {} values",
                n_cols,
                self.arch.input_d,
                columns.len()
            )));
        }
        Ok(conv::forward(&self.arch, &self.layout, &self.params, columns, n_cols, None, false).0)
    }

    /// Recurrent and dense layers over `n_cols` feature columns, starting
    /// from zero state.
    pub fn readout(&self, features: &[T], n_cols: usize) -> Result<Vec<T>> {
        let mut state = self.zero_state();
        self.readout_stateful(features, n_cols, &mut state)
    }

    pub fn zero_state(&self) -> RecurrentState<T> {
        RecurrentState {
            hidden: self.layout.lstm.iter().map(|l| vec![T::ZERO; l.units]).collect(),
            cell: self.layout.lstm.iter().map(|l| vec![T::ZERO; l.units]).collect(),
        }
    }

    /// Like [`readout`](Self::readout) but continues from `state` and leaves
    /// the final recurrent state in it.
    pub fn readout_stateful(&self, features: &[T], n_cols: usize, state: &mut RecurrentState<T>) -> Result<Vec<T>> {
        let fd = self.arch.feature_dim();
        if features.len() != n_cols * fd || n_cols == 0 {
            return Err(Error::shape(format!(
                "expected {n_cols} feature columns of size {fd}, got {} values",
                features.len()
            )));
        }
        let (caches, head) = self.recurrent(features.to_vec(), n_cols, Some(state));
        for (l, c) in caches.iter().enumerate() {
            let (h, cell) = c.final_state();
            state.hidden[l].copy_from_slice(h);
            state.cell[l].copy_from_slice(cell);
        }
        Ok(self.dense(&head))
    }

    fn recurrent(
        &self,
        features: Vec<T>,
        n: usize,
        state: Option<&RecurrentState<T>>,
    ) -> (Vec<lstm::LstmCache<T>>, Vec<T>) {
        let mut caches: Vec<lstm::LstmCache<T>> = Vec::with_capacity(self.layout.lstm.len());
        let mut seq = features;
        for (l, slots) in self.layout.lstm.iter().enumerate() {
            let zeros = vec![T::ZERO; slots.units];
            let (h0, c0) = match state {
                Some(s) => (&s.hidden[l][..], &s.cell[l][..]),
                None => (&zeros[..], &zeros[..]),
            };
            let cache = lstm::forward(slots, &self.params, seq, n, h0, c0);
            seq = cache.hidden.clone();
            caches.push(cache);
        }
        let dim = self.arch.head_input_dim();
        let head = seq[(n - 1) * dim..n * dim].to_vec();
        (caches, head)
    }

    fn dense(&self, h: &[T]) -> Vec<T> {
        let d = &self.layout.dense;
        let w = &self.params[d.weights.clone()];
        let b = &self.params[d.bias.clone()];
        (0..d.out_dim)
            .map(|o| b[o] + w[o * d.in_dim..(o + 1) * d.in_dim].iter().zip(h).map(|(&a, &x)| a * x).sum::<T>())
            .collect()
    }

    /// Gradient of `dy · y` w.r.t. every parameter, in flat layout order.
    pub fn backward(&self, tape: &ForwardTape<T>, dy: &[T]) -> Result<Vec<T>> {
        if tape.model_id != self.id || tape.version != self.version {
            return Err(Error::StaleTape(
                "tape was recorded by a different model or before a parameter update".into(),
            ));
        }
        if dy.len() != self.arch.output_dim {
            return Err(Error::shape(format!(
                "output gradient has {} entries, expected {}",
                dy.len(),
                self.arch.output_dim
            )));
        }
        let mut grad = vec![T::ZERO; self.layout.total];
        let d = &self.layout.dense;
        let w = &self.params[d.weights.clone()];
        let mut dh = vec![T::ZERO; d.in_dim];
        for o in 0..d.out_dim {
            grad[d.bias.start + o] += dy[o];
            for j in 0..d.in_dim {
                grad[d.weights.start + o * d.in_dim + j] += dy[o] * tape.head_input[j];
                dh[j] += dy[o] * w[o * d.in_dim + j];
            }
        }
        let n = tape.n_cols;
        let mut dseq = vec![T::ZERO; n * d.in_dim];
        dseq[(n - 1) * d.in_dim..].copy_from_slice(&dh);
        for (slots, cache) in self.layout.lstm.iter().zip(&tape.lstm).rev() {
            dseq = lstm::backward(slots, &self.params, cache, &dseq, &mut grad);
        }
        conv::backward(&self.arch, &self.layout, &self.params, &tape.conv, n, &dseq, &mut grad);
        Ok(grad)
    }
}

/// Non-overlapping average pooling of `x` by `p`.
pub fn avg_pool(x: &[f64], p: usize) -> Result<Vec<f64>> {
    if p == 0 || x.len() % p != 0 {
        return Err(Error::shape(format!("length {} is not divisible by pool size {p}", x.len())));
    }
    Ok(x.chunks_exact(p).map(|c| c.iter().sum::<f64>() / p as f64).collect())
}
