use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use ngs_core::dsp::multiscale_spectral_loss;
use ngs_core::model::{
    kl_divergence, reparameterize, standard_normal_like, uniform_noise, ConditionLabel, Decoder, GaussianParams,
    PostProcessor,
};
use ngs_core::{CheckpointConfig, DecoderVariant, GrainConfig, GranularModel, ModelConfig, SpectralLossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dev() -> Device {
    Device::Cpu
}

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn small_model(variant: DecoderVariant, num_classes: usize, dtype: DType) -> GranularModel {
    let grain = GrainConfig::new(64, 0.75, 16000, 4).unwrap();
    let model = ModelConfig {
        latent_dim: 4,
        embedding_dim: 6,
        variant,
        num_classes,
        encoder_channels: vec![4, 8],
        encoder_hidden: 16,
        decoder_hidden: 16,
        decoder_residual_layers: 2,
        postprocess_channels: 2,
        postprocess_taps: 8,
        temporal_hidden: 8,
        ..Default::default()
    };
    let labels = (0..num_classes).map(|i| format!("c{i}")).collect();
    let loss = SpectralLossConfig::for_grain(64, 16000);
    GranularModel::new(CheckpointConfig::new(grain, model, labels, loss), 11, dtype, &dev()).unwrap()
}

fn default_model() -> GranularModel {
    let grain = GrainConfig::default();
    let loss = SpectralLossConfig::for_grain(grain.grain_size, grain.sample_rate);
    GranularModel::new(
        CheckpointConfig::new(grain, ModelConfig::default(), Vec::new(), loss),
        0,
        DType::F32,
        &dev(),
    )
    .unwrap()
}

#[test]
fn default_geometry_shapes() {
    let model = default_model();
    let grains = Tensor::from_vec(random(13 * 2048, 1), (13, 2048), &dev())
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    let p = model.grain.encode(&grains).unwrap();
    assert_eq!(p.mu.dims(), &[13, 96]);
    assert_eq!(p.sigma().unwrap().dims(), &[13, 96]);
    let again = model.grain.encode(&grains).unwrap();
    assert_eq!(
        p.mu.to_vec2::<f32>().unwrap(),
        again.mu.to_vec2::<f32>().unwrap()
    );
    let wave = model.grain.decode(&p.mu, None, 3).unwrap();
    assert_eq!(wave.dims(), &[8192]);
    let twice = model.grain.decode(&p.mu, None, 3).unwrap();
    assert_eq!(wave.to_vec1::<f32>().unwrap(), twice.to_vec1::<f32>().unwrap());
    let h = model.grain.coefficients(&p.mu, None).unwrap();
    assert_eq!(h.dims(), &[13, 1025]);
    assert!(h.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v >= 0.0));
}

#[test]
fn encoding_is_per_grain() {
    let model = small_model(DecoderVariant::Filtering, 0, DType::F64);
    let grains = Tensor::from_vec(random(2 * 5 * 64, 2), (2, 5, 64), &dev()).unwrap();
    let batch: Vec<Vec<Vec<f64>>> = model.grain.encode(&grains).unwrap().mu.to_vec3().unwrap();
    for b in 0..2 {
        for g in 0..5 {
            let one = grains.get(b).unwrap().narrow(0, g, 1).unwrap();
            let mu: Vec<Vec<f64>> = model.grain.encode(&one).unwrap().mu.to_vec2().unwrap();
            for (x, y) in mu[0].iter().zip(&batch[b][g]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
    assert!(model.grain.encode(&Tensor::zeros((3, 63), DType::F64, &dev()).unwrap()).is_err());
}

#[test]
fn reparameterization_cases() {
    let mu = Tensor::new(&[[0.5f64, -1.0], [2.0, 0.0]], &dev()).unwrap();
    let logvar = Tensor::new(&[[0.3f64, -0.2], [1.0, 0.5]], &dev()).unwrap();
    let p = GaussianParams::new(mu.clone(), logvar).unwrap();
    let zero = Tensor::zeros((2, 2), DType::F64, &dev()).unwrap();
    let z = reparameterize(&p, &zero).unwrap();
    assert_eq!(z.0.to_vec2::<f64>().unwrap(), mu.to_vec2::<f64>().unwrap());
    let e = standard_normal_like(&mu, 4).unwrap();
    let std = GaussianParams::new(zero.clone(), zero.clone()).unwrap();
    assert_eq!(
        reparameterize(&std, &e).unwrap().0.to_vec2::<f64>().unwrap(),
        e.to_vec2::<f64>().unwrap()
    );
    let tiny = GaussianParams::new(mu.clone(), Tensor::full(-60.0f64, (2, 2), &dev()).unwrap()).unwrap();
    let z = reparameterize(&tiny, &(e.clone() * 5.0).unwrap()).unwrap();
    let diff = (z.0 - &mu).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(diff < 1e-10);
    assert!(reparameterize(&p, &Tensor::zeros((2, 3), DType::F64, &dev()).unwrap()).is_err());
}

#[test]
fn kl_cases() {
    let zeros = Tensor::zeros((3, 7), DType::F64, &dev()).unwrap();
    let prior = GaussianParams::new(zeros.clone(), zeros.clone()).unwrap();
    assert_eq!(kl_divergence(&prior).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    let shifted = GaussianParams::new(Tensor::ones((1, 96), DType::F64, &dev()).unwrap(), Tensor::zeros((1, 96), DType::F64, &dev()).unwrap()).unwrap();
    assert_eq!(kl_divergence(&shifted).unwrap().to_scalar::<f64>().unwrap(), 48.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), spread in 0.01f64..4.0) {
        let mu = Tensor::from_vec(random(24, seed), (2, 3, 4), &dev()).unwrap();
        let lv = Tensor::from_vec(random(24, seed ^ 9).into_iter().map(|v| v * spread).collect::<Vec<_>>(), (2, 3, 4), &dev()).unwrap();
        let kl = kl_divergence(&GaussianParams::new(mu, lv).unwrap()).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(kl >= 0.0);
    }
}

#[test]
fn every_variant_decodes_to_the_length_formula() {
    for v in DecoderVariant::ALL {
        let model = small_model(v, 0, DType::F32);
        let z = Tensor::from_vec(random(3 * 4 * 4, 5), (3, 4, 4), &dev())
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let wave = model.grain.decode(&z, None, 1).unwrap();
        assert_eq!(wave.dims(), &[3, 3 * 16 + 64], "{v}");
        let noise = model.grain.noise(3, 4, 1).unwrap();
        let grains = model.grain.decode_grains(&z, None, &noise).unwrap();
        assert_eq!(grains.dims(), &[3, 4, 64]);
        let enc = model.grain.encode(&grains).unwrap();
        assert_eq!(enc.mu.dims(), &[3, 4, 4]);
        assert_eq!(matches!(model.grain.decoder(), Decoder::Filtering(_)), v.is_filtering());
    }
    assert!("bogus".parse::<DecoderVariant>().is_err());
    assert!(serde_json::from_str::<ModelConfig>(r#"{"variant": "bogus"}"#).is_err());
}

#[test]
fn condition_contract() {
    let model = small_model(DecoderVariant::Filtering, 3, DType::F32);
    let z = Tensor::zeros((2, 4, 4), DType::F32, &dev()).unwrap();
    assert_eq!(model.grain.decode(&z, None, 0).unwrap_err().kind(), "missing_condition");
    assert!(model.grain.decode(&z, Some(&[0, 3]), 0).is_err());
    assert!(model.grain.decode(&z, Some(&[0]), 0).is_err());
    let a = model.grain.decode(&z, Some(&[0, 1]), 0).unwrap();
    assert_eq!(a.dims(), &[2, 112]);
    let plain = small_model(DecoderVariant::Filtering, 0, DType::F32);
    assert_eq!(plain.grain.decode(&z, Some(&[0, 0]), 0).unwrap_err().kind(), "unexpected_condition");
    assert!(plain.grain.decode(&Tensor::zeros((2, 4, 5), DType::F32, &dev()).unwrap(), None, 0).is_err());
    let label = ConditionLabel::new(3, 8).unwrap();
    assert_eq!(label.one_hot(), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(ConditionLabel::new(8, 8).is_err());
}

fn postprocessor(taps: usize, kernels: Option<Vec<f64>>) -> PostProcessor {
    let map = VarMap::new();
    let pp = PostProcessor::new(3, taps, VarBuilder::from_varmap(&map, DType::F64, &dev())).unwrap();
    if let Some(k) = kernels {
        let data = map.data().lock().unwrap();
        let var: &Var = data.get("kernels").unwrap();
        var.set(&Tensor::from_vec(k, (3, taps), &dev()).unwrap()).unwrap();
    }
    pp
}

#[test]
fn postprocessor_identity_and_impulse_response() {
    let x = Tensor::from_vec(random(200, 7), 200, &dev()).unwrap();
    let fresh = postprocessor(8, None);
    assert_eq!(fresh.forward(&x).unwrap().to_vec1::<f64>().unwrap(), x.to_vec1::<f64>().unwrap());

    let taps = 9;
    let pp = postprocessor(taps, Some(random(3 * taps, 8)));
    let kernel: Vec<f64> = pp.summed_kernel().unwrap().to_vec1().unwrap();
    let c = pp.center();
    // direct oracle: y[t] = sum_j k[j] x[t + j - c]
    let direct = |x: &[f64]| -> Vec<f64> {
        (0..x.len())
            .map(|t| {
                (0..taps)
                    .filter_map(|j| (t + j).checked_sub(c).and_then(|i| x.get(i)).map(|v| v * kernel[j]))
                    .sum()
            })
            .collect()
    };
    let mut impulse = vec![0.0; 40];
    impulse[20] = 1.0;
    let y: Vec<f64> = pp.forward(&Tensor::from_slice(&impulse, 40, &dev()).unwrap()).unwrap().to_vec1().unwrap();
    let oracle = direct(&impulse);
    for (a, b) in y.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    // the impulse response is the reversed kernel around the impulse
    for j in 0..taps {
        assert!((y[20 + c - j] - kernel[j]).abs() < 1e-12);
    }
    let xs: Vec<f64> = x.to_vec1().unwrap();
    let y: Vec<f64> = pp.forward(&x).unwrap().to_vec1().unwrap();
    for (a, b) in y.iter().zip(direct(&xs)) {
        assert!((a - b).abs() < 1e-12);
    }
    // linearity
    let x2 = Tensor::from_vec(random(200, 9), 200, &dev()).unwrap();
    let lhs = pp.forward(&((&x * 2.0).unwrap() + &x2).unwrap()).unwrap();
    let rhs = ((pp.forward(&x).unwrap() * 2.0).unwrap() + pp.forward(&x2).unwrap()).unwrap();
    let diff = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn loss_through_decoder_has_exact_latent_gradient() {
    for variant in [DecoderVariant::Filtering, DecoderVariant::FilteringPostproc, DecoderVariant::UpsampleConv] {
        let model = small_model(variant, 0, DType::F64);
        let loss_cfg = SpectralLossConfig::for_grain(64, 16000);
        let target = Tensor::from_vec(random(112, 3), (1, 112), &dev()).unwrap();
        let noise = uniform_noise(&[1, 4, 64], 2, DType::F64, &dev()).unwrap();
        let f = |z: &Tensor| {
            let wave = model.grain.decode_with_noise(z, None, &noise).unwrap();
            multiscale_spectral_loss(&target, &wave, &loss_cfg).unwrap()
        };
        let z0 = random(16, 4);
        let var = Var::from_tensor(&Tensor::from_slice(&z0, (1, 4, 4), &dev()).unwrap()).unwrap();
        let grad: Vec<f64> = f(var.as_tensor())
            .backward()
            .unwrap()
            .get(&var)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..z0.len() {
            let mut up = z0.clone();
            up[i] += h;
            let mut down = z0.clone();
            down[i] -= h;
            let eval = |v: &[f64]| f(&Tensor::from_slice(v, (1, 4, 4), &dev()).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (eval(&up) - eval(&down)) / (2.0 * h);
            num += (fd - grad[i]).powi(2);
            den += grad[i].powi(2);
        }
        assert!((num / den).sqrt() < 1e-3, "{variant}: {}", (num / den).sqrt());
    }
}
