use candle_core::Tensor;
use candle_nn::rnn::{LSTMConfig, LSTM, RNN};
use candle_nn::VarBuilder;

use crate::error::Result;

/// Unidirectional LSTM of several layers, batch-first.
#[derive(Clone, Debug)]
pub struct StackedLstm {
    layers: Vec<LSTM>,
}

impl StackedLstm {
    pub fn new(in_dim: usize, hidden: usize, num_layers: usize, vb: VarBuilder) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|idx| {
                let cfg = LSTMConfig {
                    layer_idx: idx,
                    ..Default::default()
                };
                let input = if idx == 0 { in_dim } else { hidden };
                candle_nn::lstm(input, hidden, cfg, vb.clone())
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// `(batch, steps, in_dim)` to the last layer's hidden states
    /// `(batch, steps, hidden)`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        for layer in &self.layers {
            let states = layer.seq(&h)?;
            h = layer.states_to_tensor(&states)?;
        }
        Ok(h)
    }
}
