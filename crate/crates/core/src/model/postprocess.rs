use candle_core::{Tensor, D};
use candle_nn::VarBuilder;

use crate::error::{shape_err, Result};
use crate::nn::correlate_valid;

/// Bank of parallel learnable FIR filters whose outputs are summed.
///
/// The effective kernel is a unit impulse plus the sum of the learned channel
/// kernels; the channels start at zero so the module is an exact identity
/// when freshly built.
#[derive(Debug, Clone)]
pub struct PostProcessor {
    kernels: Tensor,
    taps: usize,
}

impl PostProcessor {
    pub fn new(channels: usize, taps: usize, vb: VarBuilder) -> Result<Self> {
        let kernels = vb.get_with_hints((channels, taps), "kernels", candle_nn::Init::Const(0.0))?;
        Ok(Self { kernels, taps })
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Tap index aligned with the current sample.
    pub fn center(&self) -> usize {
        self.taps / 2
    }

    /// Effective single kernel: impulse at [`Self::center`] plus all channels.
    pub fn summed_kernel(&self) -> Result<Tensor> {
        let mut impulse = vec![0f64; self.taps];
        impulse[self.center()] = 1.0;
        let impulse = Tensor::from_vec(impulse, self.taps, self.kernels.device())?.to_dtype(self.kernels.dtype())?;
        Ok((self.kernels.sum(0)? + impulse)?)
    }

    /// Same-length filtering of `(b, l)` (or `(l,)`) waveforms.
    pub fn forward(&self, wave: &Tensor) -> Result<Tensor> {
        let (x, single) = match wave.rank() {
            1 => (wave.unsqueeze(0)?, true),
            2 => (wave.clone(), false),
            _ => return Err(shape_err(format!("expected (b, l), got {:?}", wave.dims()))),
        };
        let left = self.center();
        let right = self.taps - 1 - left;
        let padded = x.pad_with_zeros(D::Minus1, left, right)?;
        let y = correlate_valid(&padded, &self.summed_kernel()?)?;
        Ok(if single { y.squeeze(0)? } else { y })
    }
}
