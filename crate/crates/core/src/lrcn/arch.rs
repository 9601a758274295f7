use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network shape: 1-d convolutions along depth (with average pooling between
/// them), stacked LSTMs along time, and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub lstm_units: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub input_d: usize,
    pub input_n: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            conv_channels: vec![64, 32, 16, 1],
            kernel_size: 9,
            pool_size: 2,
            lstm_units: vec![10, 10],
            output_dim: 10,
            dropout_rate: 0.2,
            input_d: 560,
            input_n: 300,
        }
    }
}

impl ArchSpec {
    /// Small network used for gradient checks.
    pub fn reduced() -> Self {
        Self {
            conv_channels: vec![4, 2, 1],
            kernel_size: 9,
            pool_size: 2,
            lstm_units: vec![3, 3],
            output_dim: 10,
            dropout_rate: 0.0,
            input_d: 64,
            input_n: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_d == 0 || self.input_n == 0 || self.output_dim == 0 {
            return Err(Error::invalid("input_d, input_n and output_dim must be >= 1"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd for 'same' padding"));
        }
        if self.pool_size == 0 {
            return Err(Error::invalid("pool_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must lie in [0, 1)"));
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.lstm_units.iter().any(|&u| u == 0) {
            return Err(Error::invalid("layer widths must be >= 1"));
        }
        if let Some(&last) = self.conv_channels.last() {
            if last != 1 {
                return Err(Error::invalid("last convolution must have exactly one channel"));
            }
        }
        let pools = self.conv_channels.len().saturating_sub(1) as u32;
        let divisor = self.pool_size.pow(pools);
        if self.input_d % divisor != 0 {
            return Err(Error::invalid(format!(
                "input_d {} not divisible by pool_size^{pools} = {divisor}",
                self.input_d
            )));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.kernel_size / 2
    }

    /// Depth length seen by each convolution layer.
    pub fn conv_lengths(&self) -> Vec<usize> {
        let mut len = self.input_d;
        let mut out = Vec::with_capacity(self.conv_channels.len());
        for l in 0..self.conv_channels.len() {
            if l > 0 {
                len /= self.pool_size;
            }
            out.push(len);
        }
        out
    }

    /// Size of the per-time-step feature vector entering the recurrent part.
    pub fn feature_dim(&self) -> usize {
        self.conv_lengths().last().copied().unwrap_or(self.input_d)
    }

    pub fn head_input_dim(&self) -> usize {
        self.lstm_units.last().copied().unwrap_or_else(|| self.feature_dim())
    }
}

/// Closed-form number of trainable parameters.
pub fn param_count(arch: &ArchSpec) -> usize {
    let k = arch.kernel_size;
    let mut total = 0;
    let mut in_ch = 1;
    for &out in &arch.conv_channels {
        total += out * in_ch * k + out;
        in_ch = out;
    }
    let mut in_dim = arch.feature_dim();
    for &units in &arch.lstm_units {
        total += 4 * (units * (in_dim + units) + units);
        in_dim = units;
    }
    total + arch.output_dim * in_dim + arch.output_dim
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSlots {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][kernel]`
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSlots {
    /// `[units][in]`
    pub input: Range<usize>,
    /// `[units][units]`
    pub recurrent: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmSlots {
    pub in_dim: usize,
    pub units: usize,
    /// Gate order: input, forget, cell candidate, output.
    pub gates: [GateSlots; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSlots {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Offsets of every parameter block in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub conv: Vec<ConvSlots>,
    pub lstm: Vec<LstmSlots>,
    pub dense: DenseSlots,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(arch: &ArchSpec) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let k = arch.kernel_size;
        let mut conv = Vec::new();
        let mut in_ch = 1;
        for &out_ch in &arch.conv_channels {
            let weights = take(out_ch * in_ch * k);
            let bias = take(out_ch);
            conv.push(ConvSlots {
                in_ch,
                out_ch,
                weights,
                bias,
            });
            in_ch = out_ch;
        }
        let mut lstm = Vec::new();
        let mut in_dim = arch.feature_dim();
        for &units in &arch.lstm_units {
            let mut gate = || GateSlots {
                input: take(units * in_dim),
                recurrent: take(units * units),
                bias: take(units),
            };
            let gates = [gate(), gate(), gate(), gate()];
            lstm.push(LstmSlots { in_dim, units, gates });
            in_dim = units;
        }
        let dense = DenseSlots {
            in_dim,
            out_dim: arch.output_dim,
            weights: take(arch.output_dim * in_dim),
            bias: take(arch.output_dim),
        };
        Self {
            conv,
            lstm,
            dense,
            total: at,
        }
    }
}
