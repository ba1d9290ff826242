//! Small building blocks shared by the grain and sequence models.

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Conv1d, Conv1dConfig, Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

/// Variable store that initializes each new parameter from a generator keyed
/// by `(seed, name)`, so weights do not depend on construction order or on
/// any global random state.
pub struct SeededVars {
    map: VarMap,
    seed: u64,
}

impl SeededVars {
    pub fn builder(map: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
        let backend: Box<dyn SimpleBackend> = Box::new(SeededVars {
            map: map.clone(),
            seed,
        });
        VarBuilder::from_backend(backend, dtype, device.clone())
    }

    fn init(&self, shape: &Shape, name: &str, init: Init) -> Vec<f64> {
        // FNV-1a keeps the stream stable across platforms and releases
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ h);
        let n = shape.elem_count();
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| {
            (0..n)
                .map(|_| mean + std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| (0..n).map(|_| rng.random_range(lo..up)).collect();
        match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn => FanInOut::FanIn.for_shape(shape),
                    FanInOut::FanOut => FanInOut::FanOut.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                }
            }
        }
    }
}

impl SimpleBackend for SeededVars {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.map.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {s:?}", var.shape());
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.init(&s, name, h);
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("variable {name} must be created with a shape")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().unwrap().contains_key(name)
    }
}

/// Variables of a map sorted by name.
pub fn sorted_vars(map: &VarMap) -> Vec<(String, Var)> {
    let data = map.data().lock().unwrap();
    let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

pub fn parameter_count(map: &VarMap) -> usize {
    map.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// `log(1 + exp(x))`, written with differentiable primitives and stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// `x + silu(W x + b)`.
#[derive(Debug, Clone)]
pub struct ResidualLinear {
    inner: Linear,
}

impl ResidualLinear {
    pub fn new(width: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            inner: candle_nn::linear(width, width, vb)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.inner.forward(x)?.silu()?)?)
    }
}

/// Channels-last 1-D convolution as an explicit unfold followed by one matmul.
///
/// Equivalent to a zero-padded `Conv1d`, but both passes run through dense
/// matrix products, which differentiate much faster on the CPU.
/// `x`: `(n, l, c_in)`, `weight`: `(c_out, c_in, k)`, output `(n, l_out, c_out)`.
pub fn conv1d_nlc(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, l, c_in) = x.dims3()?;
    let (c_out, w_in, k) = weight.dims3()?;
    if w_in != c_in {
        return Err(shape_err(format!("conv expects {w_in} input channels, got {c_in}")));
    }
    let padded_len = l + 2 * padding;
    if padded_len < k || stride == 0 {
        return Err(shape_err(format!("conv of {k} taps does not fit {padded_len} samples")));
    }
    let l_out = (padded_len - k) / stride + 1;
    let xp = if padding > 0 { x.pad_with_zeros(1, padding, padding)? } else { x.clone() };
    let span = stride * (l_out - 1) + 1;
    let taps = (0..k)
        .map(|j| {
            let t = xp.narrow(1, j, span)?;
            if stride == 1 {
                return Ok(t);
            }
            t.pad_with_zeros(1, 0, stride - 1)?
                .reshape((n, l_out, stride, c_in))?
                .narrow(2, 0, 1)?
                .squeeze(2)
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    let cols = Tensor::cat(&taps, 2)?.reshape((n * l_out, k * c_in))?;
    let w = weight.permute((0, 2, 1))?.reshape((c_out, k * c_in))?;
    let y = cols.matmul(&w.t()?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    Ok(y.reshape((n, l_out, c_out))?)
}

fn conv_forward(conv: &Conv1d, x: &Tensor) -> Result<Tensor> {
    let cfg = conv.config();
    conv1d_nlc(x, conv.weight(), conv.bias(), cfg.stride, cfg.padding)
}

/// Correlates each `(b, l)` row with `kernel` (`y[t] = sum_j k[j] x[t + j]`),
/// giving `l - k + 1` outputs.
///
/// The signal is cut into half-overlapping frames of `2k` and multiplied by a
/// banded `(2k, k)` matrix built from the kernel.
pub fn correlate_valid(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, l) = x.dims2()?;
    let k = kernel.dim(0)?;
    if k == 0 || l < k {
        return Err(shape_err(format!("kernel of {k} taps does not fit {l} samples")));
    }
    let out_len = l - k + 1;
    let blocks = out_len.div_ceil(k);
    let needed = (blocks + 1) * k;
    let xp = x.pad_with_zeros(1, 0, needed - l)?;
    let frames = crate::dsp::frame_signal(&xp, 2 * k, k)?;
    // rows of period 2k + 1 read with stride 2k shift the kernel one step per row
    let period = Tensor::cat(&[kernel, &Tensor::zeros(k + 1, kernel.dtype(), kernel.device())?], 0)?;
    let band = period
        .unsqueeze(0)?
        .broadcast_as((k, 2 * k + 1))?
        .contiguous()?
        .flatten_all()?
        .narrow(0, 0, k * 2 * k)?
        .reshape((k, 2 * k))?;
    let y = frames.broadcast_matmul(&band.t()?)?;
    Ok(y.reshape((b, blocks * k))?.narrow(1, 0, out_len)?)
}

/// Strided residual block: `silu(conv_b(silu(conv_a(x))) + skip(x))`.
///
/// `conv_a` downsamples by `stride` with a `kernel`-tap filter, `conv_b` is a
/// 3-tap refinement at the reduced rate and `skip` is a strided 1x1 projection.
#[derive(Debug, Clone)]
pub struct DownBlock {
    conv_a: Conv1d,
    conv_b: Conv1d,
    skip: Conv1d,
}

impl DownBlock {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let a_cfg = Conv1dConfig {
            padding: kernel / 2,
            stride,
            ..Default::default()
        };
        let b_cfg = Conv1dConfig {
            padding: 1,
            ..Default::default()
        };
        let s_cfg = Conv1dConfig {
            stride,
            ..Default::default()
        };
        Ok(Self {
            conv_a: candle_nn::conv1d(c_in, c_out, kernel, a_cfg, vb.pp("conv_a"))?,
            conv_b: candle_nn::conv1d(c_out, c_out, 3, b_cfg, vb.pp("conv_b"))?,
            skip: candle_nn::conv1d(c_in, c_out, 1, s_cfg, vb.pp("skip"))?,
        })
    }

    /// `(n, l, c_in)` -> `(n, l / stride, c_out)`, channels last.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = conv_forward(&self.conv_a, x)?.silu()?;
        let h = conv_forward(&self.conv_b, &h)?;
        let s = conv_forward(&self.skip, x)?;
        Ok((h + s)?.silu()?)
    }
}

/// Output length of a [`DownBlock`] (odd kernel, half padding).
pub fn down_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Upsampling stage of the convolutional decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpMode {
    /// Zero-stuffing followed by a convolution, i.e. a strided transposed convolution.
    Transposed,
    /// Nearest-neighbour repetition followed by a convolution.
    Repeat,
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    conv: Conv1d,
    factor: usize,
    mode: UpMode,
    activate: bool,
}

impl UpBlock {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        factor: usize,
        mode: UpMode,
        activate: bool,
        vb: VarBuilder,
    ) -> Result<Self> {
        let cfg = Conv1dConfig {
            padding: kernel / 2,
            ..Default::default()
        };
        Ok(Self {
            conv: candle_nn::conv1d(c_in, c_out, kernel, cfg, vb)?,
            factor,
            mode,
            activate,
        })
    }

    /// `(n, l, c_in)` -> `(n, l * factor, c_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let f = self.factor;
        let up = match self.mode {
            UpMode::Repeat => x.unsqueeze(2)?.broadcast_as((b, l, f, c))?.reshape((b, l * f, c))?,
            UpMode::Transposed => {
                let zeros = Tensor::zeros((b, l, f - 1, c), x.dtype(), x.device())?;
                Tensor::cat(&[&x.unsqueeze(2)?, &zeros], 2)?.reshape((b, l * f, c))?
            }
        };
        let y = conv_forward(&self.conv, &up)?;
        Ok(if self.activate { y.silu()? } else { y })
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    hidden_size: usize,
}

impl GruCell {
    pub fn new(input_size: usize, hidden_size: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            input: candle_nn::linear(input_size, 3 * hidden_size, vb.pp("input"))?,
            hidden: candle_nn::linear(hidden_size, 3 * hidden_size, vb.pp("hidden"))?,
            hidden_size,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    /// One step: `x` is `(b, input)`, `h` is `(b, hidden)`.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let n = self.hidden_size;
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let r = candle_nn::ops::sigmoid(&(gi.narrow(D::Minus1, 0, n)? + gh.narrow(D::Minus1, 0, n)?)?)?;
        let u = candle_nn::ops::sigmoid(&(gi.narrow(D::Minus1, n, n)? + gh.narrow(D::Minus1, n, n)?)?)?;
        let cand = (gi.narrow(D::Minus1, 2 * n, n)? + (r * gh.narrow(D::Minus1, 2 * n, n)?)?)?.tanh()?;
        // h' = (1 - u) * cand + u * h
        Ok((&cand + (u * (h - &cand)?)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn unfold_conv_matches_direct_conv() {
        let dev = Device::Cpu;
        for (c_in, c_out, k, stride, pad, l) in [(1, 4, 9, 4, 4, 64), (3, 5, 3, 1, 1, 17), (2, 2, 1, 4, 0, 16), (1, 1, 8, 1, 0, 30)] {
            let x = Tensor::randn(0f64, 1.0, (2, c_in, l), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (c_out, c_in, k), &dev).unwrap();
            let b = Tensor::randn(0f64, 1.0, c_out, &dev).unwrap();
            let direct = x
                .conv1d(&w, pad, stride, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, c_out, 1)).unwrap())
                .unwrap();
            let ours = conv1d_nlc(&x.transpose(1, 2).unwrap(), &w, Some(&b), stride, pad)
                .unwrap()
                .transpose(1, 2)
                .unwrap();
            assert_eq!(direct.dims(), ours.dims());
            let err: f64 = (direct - ours).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn banded_correlation_matches_direct_sum() {
        let dev = Device::Cpu;
        for (l, k) in [(40, 8), (17, 17), (100, 3), (9, 1)] {
            let x = Tensor::randn(0f64, 1.0, (2, l), &dev).unwrap();
            let kern = Tensor::randn(0f64, 1.0, k, &dev).unwrap();
            let y: Vec<Vec<f64>> = correlate_valid(&x, &kern).unwrap().to_vec2().unwrap();
            let xs: Vec<Vec<f64>> = x.to_vec2().unwrap();
            let ks: Vec<f64> = kern.to_vec1().unwrap();
            for (row, xr) in y.iter().zip(&xs) {
                assert_eq!(row.len(), l - k + 1);
                for (t, v) in row.iter().enumerate() {
                    let direct: f64 = (0..k).map(|j| ks[j] * xr[t + j]).sum();
                    assert!((v - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softplus_matches_reference() {
        let xs = [-50.0f64, -3.0, 0.0, 2.5, 60.0];
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let out: Vec<f64> = softplus(&t).unwrap().to_vec1().unwrap();
        for (x, y) in xs.iter().zip(out) {
            let expected = if *x > 30.0 { *x } else { (1.0 + x.exp()).ln() };
            assert!((y - expected).abs() < 1e-12, "{x}: {y} vs {expected}");
        }
    }

    #[test]
    fn block_lengths() {
        let vm = candle_nn::VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let down = DownBlock::new(1, 4, 9, 4, vb.pp("d")).unwrap();
        let x = Tensor::zeros((2, 64, 1), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(down.forward(&x).unwrap().dims(), &[2, down_len(64, 4), 4]);
        let x = Tensor::zeros((2, 6, 1), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(down.forward(&x).unwrap().dims(), &[2, 2, 4]);
        for mode in [UpMode::Transposed, UpMode::Repeat] {
            let up = UpBlock::new(4, 2, 9, 4, mode, true, vb.pp(format!("{mode:?}"))).unwrap();
            let x = Tensor::zeros((3, 5, 4), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(up.forward(&x).unwrap().dims(), &[3, 20, 2]);
        }
    }

    #[test]
    fn seeded_init_is_order_independent() {
        let build = |order: &[&str]| {
            let vm = VarMap::new();
            let vb = SeededVars::builder(&vm, 3, DType::F32, &Device::Cpu);
            for name in order {
                candle_nn::linear(4, 3, vb.pp(*name)).unwrap();
            }
            sorted_vars(&vm)
                .into_iter()
                .map(|(k, v)| (k, v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
                .collect::<Vec<_>>()
        };
        let a = build(&["a", "b"]);
        let b = build(&["b", "a"]);
        assert_eq!(a, b);
        assert_ne!(a[0].1, a[2].1);
    }

    #[test]
    fn gru_keeps_state_shape() {
        let vm = candle_nn::VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let cell = GruCell::new(3, 5, vb).unwrap();
        let x = Tensor::ones((2, 3), DType::F64, &Device::Cpu).unwrap();
        let h = Tensor::zeros((2, 5), DType::F64, &Device::Cpu).unwrap();
        let h2 = cell.step(&x, &h).unwrap();
        assert_eq!(h2.dims(), &[2, 5]);
        let v: Vec<Vec<f64>> = h2.to_vec2().unwrap();
        assert!(v.iter().flatten().all(|x| x.abs() < 1.0));
    }
}
