//! Encoder, projection and regressor structure and gradients.

use cgz::losses::{contrastive_loss, huber_loss, HyperParams};
use cgz::model::{
    build_model, encoder_forward, projection_forward, regressor_forward, Bound, EncoderConfig, ModelParams,
    ParamGroup, Pooling,
};
use cgz::tensor::gradcheck::gradcheck;
use cgz::verify::{STEP, TOLERANCE};
use cgz::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        height: 8,
        width: 8,
        dilation_rates: vec![1, 2],
        kernel: 3,
        stage_channels: vec![2, 3],
        pooling,
        latent_dim: 4,
        proj_hidden: 5,
        proj_dim: 3,
        reg_hidden: 3,
    }
}

fn images(rng: &mut ChaCha8Rng, n: usize, cfg: &EncoderConfig) -> Tensor<f64> {
    Tensor::from_fn([n, cfg.in_channels, cfg.height, cfg.width], |_| rng.random_range(0.0..1.0))
}

/// Parameter count of the default network, walked stage by stage from the
/// documented sizes: 3 input channels, three stages of 16/32/64 channels,
/// three dilation branches of 3x3 kernels, 1x1 fusion, latent 128,
/// projection 128 -> 64 and regressor 64 -> 2.
fn default_count_by_hand() -> usize {
    let rates = 3;
    let mut total = 0;
    let mut c_in = 3;
    for c in [16, 32, 64] {
        total += rates * (c * c_in * 3 * 3 + c);
        total += c * (rates * c) + c;
        c_in = c;
    }
    let linear = |i: usize, o: usize| i * o + o;
    total + linear(64, 128) + linear(128, 128) + linear(128, 64) + linear(128, 64) + linear(64, 2)
}

#[test]
fn default_parameter_count_matches_shape_walk() {
    let p = build_model::<f32>(&EncoderConfig::default(), 0).unwrap();
    assert_eq!(p.parameter_count(), default_count_by_hand());
    let sum: usize = [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Regressor]
        .into_iter()
        .map(|g| p.group_count(g))
        .sum();
    assert_eq!(sum, p.parameter_count());
}

#[test]
fn flatten_pooling_is_wider() {
    let gap = EncoderConfig::default();
    let flat = EncoderConfig { pooling: Pooling::Flatten, ..EncoderConfig::default() };
    assert_eq!(gap.pooled_width(), 64);
    assert_eq!(flat.pooled_width(), 64 * 8 * 8);
    let (pg, pf) = (build_model::<f32>(&gap, 0).unwrap(), build_model::<f32>(&flat, 0).unwrap());
    assert_eq!(pf.parameter_count() - pg.parameter_count(), (4096 - 64) * 128);
}

#[test]
fn every_dilation_rate_preserves_spatial_size() {
    let cfg = EncoderConfig {
        dilation_rates: vec![1, 2, 3, 4, 5],
        kernel: 5,
        ..tiny(Pooling::Flatten)
    };
    let params = build_model::<f64>(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = params.embed(&images(&mut rng, 2, &cfg)).unwrap();
    assert_eq!(f.shape(), &[2, cfg.latent_dim]);
}

#[test]
fn encoder_output_is_finite_on_unit_range_inputs() {
    let cfg = EncoderConfig::default();
    let params = build_model::<f32>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for fill in [0.0f32, 1.0] {
        let x = Tensor::full([1, 3, 64, 64], fill);
        assert!(params.embed(&x).unwrap().is_finite());
    }
    let x: Tensor<f32> = Tensor::from_fn([4, 3, 64, 64], |_| rng.random_range(0.0..=1.0));
    let f = params.embed(&x).unwrap();
    assert_eq!(f.shape(), &[4, 128]);
    assert!(f.is_finite());
    assert_eq!(params.project(&f).unwrap().shape(), &[4, 64]);
    assert_eq!(params.regress(&f).unwrap().shape(), &[4, 2]);
}

/// With every conv weight zero, each stage emits relu of its fusion bias,
/// whatever the input.
#[test]
fn zero_conv_weights_propagate_biases_only() {
    for pooling in [Pooling::Gap, Pooling::Flatten] {
        let cfg = tiny(pooling);
        let mut params = build_model::<f64>(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names.iter().filter(|n| n.starts_with("enc.s")) {
            let shape = params.get(name).unwrap().shape().to_vec();
            let t = if name.ends_with(".w") {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
            };
            params.set(name, t).unwrap();
        }
        let last = cfg.stages() - 1;
        let fuse_bias = params.get(&format!("enc.s{last}.fuse.b")).unwrap().map(|v| v.max(0.0));
        let (h, w) = cfg.final_spatial();
        let pooled: Vec<f64> = match pooling {
            Pooling::Gap => fuse_bias.data().to_vec(),
            Pooling::Flatten => fuse_bias.data().iter().flat_map(|&v| vec![v; h * w]).collect(),
        };
        let head_w = params.get("enc.head.w").unwrap();
        let head_b = params.get("enc.head.b").unwrap();
        let out_dim = cfg.latent_dim;
        let want: Vec<f64> = (0..out_dim)
            .map(|j| head_b.data()[j] + pooled.iter().enumerate().map(|(i, p)| p * head_w.data()[i * out_dim + j]).sum::<f64>())
            .collect();
        let f = params.embed(&images(&mut rng, 3, &cfg)).unwrap();
        for row in f.data().chunks(out_dim) {
            for (got, want) in row.iter().zip(&want) {
                assert!((got - want).abs() < 1e-12, "{pooling:?}");
            }
        }
    }
}

/// Parameters as gradcheck inputs. Biases are randomized: with zero biases,
/// a pixel whose fused inputs are all zero sits exactly on a relu kink,
/// where central differences disagree with any one-sided derivative.
fn param_inputs(params: &ModelParams<f64>, seed: u64) -> (Vec<String>, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params
        .iter()
        .map(|(n, t)| {
            let t = if n.ends_with(".b") { Tensor::from_fn(t.shape().to_vec(), |_| rng.random_range(-0.5..0.5)) } else { t.clone() };
            (n.to_string(), t)
        })
        .unzip()
}

#[test]
fn regression_path_gradients_match_finite_differences() {
    for pooling in [Pooling::Gap, Pooling::Flatten] {
        let cfg = tiny(pooling);
        let params = build_model::<f64>(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = images(&mut rng, 3, &cfg);
        let target: Tensor<f64> = Tensor::from_fn([3, 2], |_| rng.random_range(-0.7..0.7));
        let (names, inputs) = param_inputs(&params, 70);
        let report = gradcheck(
            |g, vars| {
                let bound = Bound::from_vars(&cfg, names.iter().cloned().zip(vars.iter().copied()))?;
                let x = g.constant(x.clone());
                let t = g.constant(target.clone());
                let f = encoder_forward(g, &bound, x)?;
                let y = regressor_forward(g, &bound, f)?;
                huber_loss(g, y, t, 0.1)
            },
            &inputs,
            STEP,
            TOLERANCE,
        )
        .unwrap();
        assert!(report.passed(), "{pooling:?}: max error {:e}", report.max_error);
    }
}

#[test]
fn contrastive_path_gradients_match_finite_differences() {
    let cfg = tiny(Pooling::Gap);
    let params = build_model::<f64>(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = images(&mut rng, 6, &cfg);
    let hp = HyperParams { batch_size: 3, ..HyperParams::default() };
    let (names, inputs) = param_inputs(&params, 80);
    let report = gradcheck(
        |g, vars| {
            let bound = Bound::from_vars(&cfg, names.iter().cloned().zip(vars.iter().copied()))?;
            let x = g.constant(x.clone());
            let f = encoder_forward(g, &bound, x)?;
            let p = projection_forward(g, &bound, f)?;
            let p1 = g.slice_rows(p, 0, 3)?;
            let p2 = g.slice_rows(p, 3, 3)?;
            contrastive_loss(g, p1, p2, &hp)
        },
        &inputs,
        STEP,
        TOLERANCE,
    )
    .unwrap();
    assert!(report.passed(), "max error {:e}", report.max_error);
}

#[test]
fn bound_variables_must_match_layout() {
    let cfg = tiny(Pooling::Gap);
    let mut g = Graph::<f64>::new();
    let v = g.param(Tensor::zeros([1]));
    assert!(Bound::from_vars(&cfg, [("enc.head.b".to_string(), v)]).is_err());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = tiny(Pooling::Gap);
    let params = build_model::<f64>(&cfg, 0).unwrap();
    assert!(params.embed(&Tensor::zeros([1, 3, 16, 16])).is_err());
    assert!(params.embed(&Tensor::zeros([1, 1, 8, 8])).is_err());
}
