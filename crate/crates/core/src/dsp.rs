//! Differentiable signal kernels on candle tensors.
//!
//! Transforms run on the CPU. Real DFTs are FFT-backed custom ops whose
//! gradients are their adjoint transforms; the inverse transform reads only
//! a half spectrum, so its output is real by construction.

use std::f64::consts::PI;

use std::fmt;
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Frequency axis used for one term of the spectral loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyScale {
    Linear,
    LogFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralLossConfig {
    /// STFT sizes, strictly increasing powers of two.
    pub window_sizes: Vec<usize>,
    pub stft_overlap: f64,
    /// Floor inside `log(eps + |STFT|^2)`.
    pub epsilon: f64,
    pub scales: Vec<FrequencyScale>,
    pub log_bins_per_octave: usize,
    pub log_min_hz: f64,
    pub sample_rate: u32,
}

impl Default for SpectralLossConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![128, 256, 512, 1024, 2048],
            stft_overlap: 0.75,
            epsilon: 5e-3,
            scales: vec![FrequencyScale::Linear, FrequencyScale::LogFrequency],
            log_bins_per_octave: 24,
            log_min_hz: 32.7,
            sample_rate: 22050,
        }
    }
}

impl SpectralLossConfig {
    /// Loss scales matched to a grain geometry: powers of two up to the grain
    /// size, starting at 128 for rates of 22.05 kHz and above, 32 below.
    pub fn for_grain(grain_size: usize, sample_rate: u32) -> Self {
        let smallest = if sample_rate >= 22050 { 128 } else { 32 };
        let mut window_sizes = Vec::new();
        let mut w = smallest.min(grain_size.next_power_of_two());
        while w <= grain_size {
            window_sizes.push(w);
            w *= 2;
        }
        Self {
            window_sizes,
            sample_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::Config("no STFT window sizes".into()));
        }
        for pair in self.window_sizes.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config("window sizes must be strictly increasing".into()));
            }
        }
        if let Some(w) = self.window_sizes.iter().find(|w| !w.is_power_of_two() || **w < 4) {
            return Err(Error::Config(format!("window size {w} is not a power of two >= 4")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.stft_overlap) {
            return Err(Error::Config("stft_overlap must be in [0, 1)".into()));
        }
        for &w in &self.window_sizes {
            stft_hop(w, self.stft_overlap)?;
        }
        if self.scales.is_empty() {
            return Err(Error::Config("no frequency scales".into()));
        }
        if self.scales.contains(&FrequencyScale::LogFrequency)
            && (self.log_bins_per_octave == 0 || !(self.log_min_hz > 0.0) || self.sample_rate == 0)
        {
            return Err(Error::Config("invalid log-frequency filterbank parameters".into()));
        }
        Ok(())
    }

    pub fn max_window(&self) -> usize {
        self.window_sizes.iter().copied().max().unwrap_or(0)
    }
}

pub(crate) fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Hop for an STFT window at the given overlap; must come out integral.
pub fn stft_hop(window_size: usize, overlap: f64) -> Result<usize> {
    let hop = window_size as f64 * (1.0 - overlap);
    let rounded = hop.round();
    if (hop - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::Config(format!(
            "window {window_size} with overlap {overlap} gives non-integer hop {hop}"
        )));
    }
    Ok(rounded as usize)
}

/// Periodic Hann window (`w[0] = 0`).
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Periodic Hann scaled so copies shifted by the grain hop sum to one.
pub fn synthesis_window(grain_size: usize, overlap_ratio: f64) -> Result<Vec<f64>> {
    let supported = [0.5, 0.75];
    if !supported.iter().any(|r| (overlap_ratio - r).abs() < 1e-12) {
        return Err(Error::Config(format!(
            "synthesis window supports overlap 0.5 or 0.75, got {overlap_ratio}"
        )));
    }
    let hop = stft_hop(grain_size, overlap_ratio)?;
    if grain_size % hop != 0 {
        return Err(Error::Config(format!(
            "grain size {grain_size} is not a multiple of hop {hop}"
        )));
    }
    // Hann copies at hop n(1-r) sum to 1 / (2(1-r)).
    let gain = 2.0 * (1.0 - overlap_ratio);
    Ok(hann_periodic(grain_size).into_iter().map(|w| w * gain).collect())
}

fn vec_tensor(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, shape, device)?.to_dtype(dtype)?)
}

/// Flattens all leading dimensions: `(.., n)` -> `(m, n)`.
fn flatten_leading(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| shape_err("scalar input"))?;
    let lead: Vec<usize> = dims[..dims.len() - 1].to_vec();
    let m = lead.iter().product::<usize>();
    Ok((x.reshape((m, last))?, lead))
}

fn restore_leading(x: &Tensor, lead: &[usize]) -> Result<Tensor> {
    let mut shape = lead.to_vec();
    shape.push(x.dim(D::Minus1)?);
    Ok(x.reshape(shape)?)
}

/// Real analysis transform `(.., n) -> (.., 2 * bins)` or its adjoint
/// synthesis `(.., 2 * bins) -> (.., n)`, computed with FFTs.
///
/// Analysis gives `s_k * FFT(w * x)_k` laid out as `[re | im]`; synthesis gives
/// `w_t * Re(sum_k s_k G_k e^{2 pi i k t / n})`. Each is the other's adjoint,
/// which is how gradients flow.
#[derive(Clone)]
struct DftOp {
    n: usize,
    synthesis: bool,
    window: Option<Arc<[f64]>>,
    bin_scale: Option<Arc<[f64]>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl DftOp {
    fn adjoint(&self) -> Self {
        Self {
            synthesis: !self.synthesis,
            ..self.clone()
        }
    }

    fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    fn run(&self, input: &[f64]) -> Vec<f64> {
        let n = self.n;
        let bins = self.bins();
        let w = |t: usize| self.window.as_ref().map_or(1.0, |w| w[t]);
        let sc = |k: usize| self.bin_scale.as_ref().map_or(1.0, |s| s[k]);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let fft = if self.synthesis { &self.inverse } else { &self.forward };
        let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        if self.synthesis {
            let rows = input.len() / (2 * bins);
            let mut out = vec![0.0; rows * n];
            for (g, o) in input.chunks_exact(2 * bins).zip(out.chunks_exact_mut(n)) {
                for (k, slot) in buf.iter_mut().enumerate() {
                    *slot = if k < bins {
                        Complex::new(g[k] * sc(k), g[bins + k] * sc(k))
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (t, v) in o.iter_mut().enumerate() {
                    *v = buf[t].re * w(t);
                }
            }
            out
        } else {
            let rows = input.len() / n;
            let mut out = vec![0.0; rows * 2 * bins];
            for (x, o) in input.chunks_exact(n).zip(out.chunks_exact_mut(2 * bins)) {
                for (t, slot) in buf.iter_mut().enumerate() {
                    *slot = Complex::new(x[t] * w(t), 0.0);
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for k in 0..bins {
                    o[k] = buf[k].re * sc(k);
                    o[bins + k] = buf[k].im * sc(k);
                }
            }
            out
        }
    }
}

impl CustomOp1 for DftOp {
    fn name(&self) -> &'static str {
        if self.synthesis {
            "real-dft-synthesis"
        } else {
            "real-dft-analysis"
        }
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, b) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("dft input must be contiguous".into()))?;
        let mut dims = layout.dims().to_vec();
        let last = dims.last_mut().ok_or_else(|| candle_core::Error::Msg("dft of a scalar".into()))?;
        let (expect, produce) = if self.synthesis {
            (2 * self.bins(), self.n)
        } else {
            (self.n, 2 * self.bins())
        };
        if *last != expect {
            candle_core::bail!("dft expects last dim {expect}, got {last}");
        }
        *last = produce;
        let out = match storage {
            CpuStorage::F64(v) => CpuStorage::F64(self.run(&v[a..b])),
            CpuStorage::F32(v) => {
                let x: Vec<f64> = v[a..b].iter().map(|&e| e as f64).collect();
                CpuStorage::F32(self.run(&x).into_iter().map(|e| e as f32).collect())
            }
            _ => candle_core::bail!("dft supports f32 and f64 only"),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(self.adjoint())?))
    }
}

/// Real DFT of length `n` (CPU, via FFT).
#[derive(Clone)]
pub struct RealDft {
    analysis: DftOp,
    synthesis: DftOp,
}

impl fmt::Debug for RealDft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RealDft")
            .field("n", &self.analysis.n)
            .field("windowed", &self.analysis.window.is_some())
            .finish()
    }
}

impl RealDft {
    pub fn new(n: usize) -> Result<Self> {
        Self::with_window(n, None)
    }

    /// `analysis_window`, when given, multiplies the input of [`RealDft::forward`].
    pub fn with_window(n: usize, analysis_window: Option<&[f64]>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("DFT length {n} too small")));
        }
        if analysis_window.is_some_and(|w| w.len() != n) {
            return Err(shape_err(format!("analysis window length differs from {n}")));
        }
        let mut planner = FftPlanner::<f64>::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let bins = n / 2 + 1;
        let weights: Vec<f64> = (0..bins)
            .map(|k| {
                let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                w / n as f64
            })
            .collect();
        Ok(Self {
            analysis: DftOp {
                n,
                synthesis: false,
                window: analysis_window.map(Arc::from),
                bin_scale: None,
                forward: forward.clone(),
                inverse: inverse.clone(),
            },
            synthesis: DftOp {
                n,
                synthesis: true,
                window: None,
                bin_scale: Some(Arc::from(weights)),
                forward,
                inverse,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.analysis.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> usize {
        self.analysis.bins()
    }

    /// `(.., n)` -> `(.., 2 * bins)` laid out as `[re | im]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(D::Minus1)? != self.len() {
            return Err(shape_err(format!(
                "DFT expects last dim {}, got {:?}",
                self.len(),
                x.dims()
            )));
        }
        Ok(x.contiguous()?.apply_op1(self.analysis.clone())?)
    }

    /// Inverse of [`RealDft::forward`]; the imaginary parts of DC and Nyquist are ignored.
    pub fn inverse(&self, spectrum: &Tensor) -> Result<Tensor> {
        if spectrum.dim(D::Minus1)? != 2 * self.bins() {
            return Err(shape_err(format!(
                "inverse DFT expects last dim {}, got {:?}",
                2 * self.bins(),
                spectrum.dims()
            )));
        }
        Ok(spectrum.contiguous()?.apply_op1(self.synthesis.clone())?)
    }

    /// Power spectrum `re^2 + im^2`, shape `(.., bins)`.
    pub fn power(&self, x: &Tensor) -> Result<Tensor> {
        let bins = self.bins();
        let sq = self.forward(x)?.sqr()?;
        let re = sq.narrow(D::Minus1, 0, bins)?;
        let im = sq.narrow(D::Minus1, bins, bins)?;
        Ok((re + im)?)
    }
}

/// Zero-phase noise filtering: real magnitudes applied to both halves of the
/// Hermitian spectrum of a noise excitation.
#[derive(Debug, Clone)]
pub struct NoiseFilter {
    dft: RealDft,
}

impl NoiseFilter {
    pub fn new(grain_size: usize) -> Result<Self> {
        if grain_size % 2 != 0 {
            return Err(Error::Config(format!("grain size {grain_size} must be even")));
        }
        Ok(Self {
            dft: RealDft::new(grain_size)?,
        })
    }

    pub fn filter_size(&self) -> usize {
        self.dft.bins()
    }

    /// `coeffs`: `(.., d_h)`, `noise`: `(.., d_x)` with matching leading dims.
    pub fn apply(&self, coeffs: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let bins = self.dft.bins();
        if coeffs.dim(D::Minus1)? != bins {
            return Err(shape_err(format!(
                "filter coefficients must have {bins} bins, got {:?}",
                coeffs.dims()
            )));
        }
        let spectrum = self.dft.forward(noise)?;
        let gains = Tensor::cat(&[coeffs, coeffs], D::Minus1)?;
        self.dft.inverse(&(spectrum * gains)?)
    }
}

/// Filters one or more noise grains by real frequency magnitudes.
pub fn filter_grain(coeffs: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let n = noise.dim(D::Minus1)?;
    NoiseFilter::new(n)?.apply(coeffs, noise)
}

/// Sums windowed grains at `hop` offsets.
///
/// `grains` is `(g, d_x)` or `(batch, g, d_x)`; the output is
/// `((g - 1) * hop + d_x)` samples per batch item.
pub fn overlap_add(grains: &Tensor, hop: usize, window: &[f64]) -> Result<Tensor> {
    let batched = match grains.rank() {
        2 => grains.unsqueeze(0)?,
        3 => grains.clone(),
        _ => return Err(shape_err(format!("overlap_add expects (b, g, d_x), got {:?}", grains.dims()))),
    };
    let (b, g, d_x) = batched.dims3()?;
    if window.len() != d_x {
        return Err(shape_err(format!("window length {} != grain size {d_x}", window.len())));
    }
    if hop == 0 || hop > d_x || g == 0 {
        return Err(shape_err(format!("invalid hop {hop} for grain size {d_x}")));
    }
    let win = vec_tensor(window, &[1, 1, d_x], batched.dtype(), batched.device())?;
    let windowed = batched.broadcast_mul(&win)?;

    // Cut grains into blocks of gcd(d_x, hop) samples; block c of grain i lands
    // on output block i * stride + c.
    let block = gcd(d_x, hop);
    let per_grain = d_x / block;
    let stride = hop / block;
    let total = (g - 1) * stride + per_grain;
    let span = (g - 1) * stride + 1;
    let chunks = windowed.reshape((b, g, per_grain, block))?;
    let mut acc: Option<Tensor> = None;
    for c in 0..per_grain {
        let col = chunks.narrow(2, c, 1)?;
        let spread = if stride > 1 {
            let zeros = Tensor::zeros((b, g, stride - 1, block), col.dtype(), col.device())?;
            Tensor::cat(&[&col, &zeros], 2)?
                .reshape((b, g * stride, block))?
                .narrow(1, 0, span)?
        } else {
            col.reshape((b, g, block))?
        };
        let placed = spread.pad_with_zeros(1, c, total - c - span)?;
        acc = Some(match acc {
            None => placed,
            Some(a) => (a + placed)?,
        });
    }
    let out = acc.expect("at least one block").reshape((b, total * block))?;
    if grains.rank() == 2 {
        Ok(out.squeeze(0)?)
    } else {
        Ok(out)
    }
}

/// Splits `(b, l)` signals into `(b, frames, window)` without padding.
pub fn frame_signal(signal: &Tensor, window: usize, hop: usize) -> Result<Tensor> {
    let (b, l) = signal.dims2()?;
    if l < window {
        return Err(shape_err(format!("signal of {l} samples is shorter than window {window}")));
    }
    let frames = (l - window) / hop + 1;
    let block = gcd(window, hop);
    let per_frame = window / block;
    let stride = hop / block;
    let used = (frames - 1) * hop + window;
    let nblocks = frames * stride + per_frame - 1;
    let x = signal
        .narrow(1, 0, used)?
        .pad_with_zeros(1, 0, nblocks * block - used)?
        .reshape((b, nblocks, block))?;
    let mut cols = Vec::with_capacity(per_frame);
    for c in 0..per_frame {
        let col = x.narrow(1, c, frames * stride)?;
        let col = if stride > 1 {
            col.reshape((b, frames, stride, block))?.narrow(2, 0, 1)?
        } else {
            col.reshape((b, frames, 1, block))?
        };
        cols.push(col);
    }
    Ok(Tensor::cat(&cols, 2)?.reshape((b, frames, window))?)
}

/// Log-spaced triangular filterbank over linear STFT bins, `(bins, filters)`.
///
/// Filters sit at `min_hz * 2^(j / bins_per_octave)` up to Nyquist; the
/// weight of a linear bin is a triangle of one log step half-width around the
/// centre. Filters that cover no linear bin are dropped, the rest are
/// normalized to unit sum.
pub fn log_frequency_filterbank(
    window_size: usize,
    sample_rate: u32,
    bins_per_octave: usize,
    min_hz: f64,
) -> Vec<Vec<f64>> {
    let bins = window_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let bpo = bins_per_octave as f64;
    let positions: Vec<Option<f64>> = (0..bins)
        .map(|k| {
            let f = k as f64 * sample_rate as f64 / window_size as f64;
            (k > 0).then(|| bpo * (f / min_hz).log2())
        })
        .collect();
    let mut filters = Vec::new();
    let top = (bpo * (nyquist / min_hz).log2()).floor().max(0.0) as usize;
    for j in 0..=top {
        let mut weights: Vec<f64> = positions
            .iter()
            .map(|u| u.map_or(0.0, |u| (1.0 - (u - j as f64).abs()).max(0.0)))
            .collect();
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 {
            weights.iter_mut().for_each(|w| *w /= sum);
            filters.push(weights);
        }
    }
    filters
}

/// One resolution of the spectral loss.
#[derive(Debug, Clone)]
pub struct SpectralScale {
    pub window_size: usize,
    pub hop: usize,
    pub scale: FrequencyScale,
    dft: RealDft,
    filterbank: Option<Tensor>,
}

impl SpectralScale {
    pub fn new(
        window_size: usize,
        hop: usize,
        scale: FrequencyScale,
        config: &SpectralLossConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let window = hann_periodic(window_size);
        let dft = RealDft::with_window(window_size, Some(&window))?;
        let filterbank = match scale {
            FrequencyScale::Linear => None,
            FrequencyScale::LogFrequency => {
                let fb = log_frequency_filterbank(
                    window_size,
                    config.sample_rate,
                    config.log_bins_per_octave,
                    config.log_min_hz,
                );
                if fb.is_empty() {
                    return Err(Error::Config(format!(
                        "log-frequency filterbank for window {window_size} is empty"
                    )));
                }
                let bins = dft.bins();
                let mut flat = vec![0.0; bins * fb.len()];
                for (j, filt) in fb.iter().enumerate() {
                    for (k, w) in filt.iter().enumerate() {
                        flat[k * fb.len() + j] = *w;
                    }
                }
                Some(vec_tensor(&flat, &[bins, fb.len()], dtype, device)?)
            }
        };
        Ok(Self {
            window_size,
            hop,
            scale,
            dft,
            filterbank,
        })
    }

    /// `(b, l)` -> `(b, frames, bins)` of Hann-windowed STFT power.
    pub fn power(&self, signal: &Tensor) -> Result<Tensor> {
        self.project(self.linear_power(signal)?)
    }

    fn linear_power(&self, signal: &Tensor) -> Result<Tensor> {
        let frames = frame_signal(signal, self.window_size, self.hop)?;
        self.dft.power(&frames)
    }

    fn project(&self, power: Tensor) -> Result<Tensor> {
        match &self.filterbank {
            None => Ok(power),
            Some(fb) => {
                let (flat, lead) = flatten_leading(&power)?;
                restore_leading(&flat.matmul(fb)?, &lead)
            }
        }
    }

    /// `log(eps + power)`.
    pub fn log_magnitude(&self, signal: &Tensor, epsilon: f64) -> Result<Tensor> {
        Ok((self.power(signal)? + epsilon)?.log()?)
    }
}

/// Log-magnitude spectrogram of a `(l,)` or `(b, l)` signal.
pub fn log_magnitude(
    signal: &Tensor,
    window_size: usize,
    hop: usize,
    epsilon: f64,
    scale: FrequencyScale,
    config: &SpectralLossConfig,
) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let s = SpectralScale::new(window_size, hop, scale, config, signal.dtype(), signal.device())?;
    match signal.rank() {
        1 => Ok(s.log_magnitude(&signal.unsqueeze(0)?, epsilon)?.squeeze(0)?),
        _ => s.log_magnitude(signal, epsilon),
    }
}

/// Multi-resolution L1 distance between log-magnitude spectrograms.
#[derive(Debug, Clone)]
pub struct SpectralLoss {
    config: SpectralLossConfig,
    scales: Vec<SpectralScale>,
}

impl SpectralLoss {
    pub fn new(config: &SpectralLossConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut scales = Vec::new();
        for &w in &config.window_sizes {
            let hop = stft_hop(w, config.stft_overlap)?;
            for &scale in &config.scales {
                scales.push(SpectralScale::new(w, hop, scale, config, dtype, device)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            scales,
        })
    }

    pub fn config(&self) -> &SpectralLossConfig {
        &self.config
    }

    pub fn scales(&self) -> &[SpectralScale] {
        &self.scales
    }

    /// Per-item loss for `(b, l)` inputs, shape `(b,)`.
    pub fn per_item(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        if x.dims() != x_hat.dims() {
            return Err(shape_err(format!(
                "length mismatch: {:?} vs {:?}",
                x.dims(),
                x_hat.dims()
            )));
        }
        let len = x.dim(D::Minus1)?;
        if len < self.config.max_window() {
            return Err(shape_err(format!(
                "signal of {len} samples is shorter than the largest STFT window {}",
                self.config.max_window()
            )));
        }
        let eps = self.config.epsilon;
        let mut total: Option<Tensor> = None;
        // scales sharing a window share one STFT
        let mut cached: Option<(usize, Tensor, Tensor)> = None;
        for s in &self.scales {
            if cached.as_ref().is_none_or(|c| c.0 != s.window_size) {
                cached = Some((s.window_size, s.linear_power(x)?, s.linear_power(x_hat)?));
            }
            let (_, p, p_hat) = cached.as_ref().expect("just filled");
            let lm = (s.project(p.clone())? + eps)?.log()?;
            let lm_hat = (s.project(p_hat.clone())? + eps)?.log()?;
            let term = (lm - lm_hat)?.abs()?.sum(D::Minus1)?.sum(D::Minus1)?;
            total = Some(match total {
                None => term,
                Some(t) => (t + term)?,
            });
        }
        Ok(total.expect("validated non-empty scales"))
    }

    /// Scalar loss: per-item sum over scales, averaged over the batch.
    pub fn loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        match x.rank() {
            1 => Ok(self
                .per_item(&x.unsqueeze(0)?, &x_hat.unsqueeze(0)?)?
                .squeeze(0)?),
            2 => Ok(self.per_item(x, x_hat)?.mean(0)?),
            _ => Err(shape_err(format!("expected (l,) or (b, l), got {:?}", x.dims()))),
        }
    }
}

/// Convenience wrapper building the per-scale bases on every call.
pub fn multiscale_spectral_loss(
    x: &Tensor,
    x_hat: &Tensor,
    config: &SpectralLossConfig,
) -> Result<Tensor> {
    SpectralLoss::new(config, x.dtype(), x.device())?.loss(x, x_hat)
}

/// Magnitude STFT (`frames x bins`) with a periodic Hann window, no padding.
/// Used for evaluation metrics outside the autodiff graph.
pub fn stft_magnitude(signal: &[f32], window_size: usize, hop: usize) -> Vec<Vec<f64>> {
    if signal.len() < window_size || hop == 0 {
        return Vec::new();
    }
    let window = hann_periodic(window_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    let bins = window_size / 2 + 1;
    let frames = (signal.len() - window_size) / hop + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); window_size];
    (0..frames)
        .map(|f| {
            let start = f * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(signal[start + i] as f64 * window[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..bins].iter().map(|c| c.norm()).collect()
        })
        .collect()
}
