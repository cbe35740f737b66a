//! The finite-difference gradient suite behind `cgz gradcheck`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{contrastive_loss, cross_correlation, huber_loss, ntxent_loss, redundancy_term, HyperParams, LossVariant, NORM_EPS};
use crate::model::{build_model, encoder_forward, projection_forward, EncoderConfig, Pooling};
use crate::rng;
use crate::tensor::gradcheck::{finite_difference_spread, gradcheck, GradcheckReport};
use crate::tensor::{Graph, Padding, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Draws tried per instance before checking a poorly conditioned one anyway.
pub const MAX_DRAWS: usize = 16;

/// Results for one operation over several random instances.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub reports: Vec<GradcheckReport>,
    /// Instances discarded because central differences had not converged.
    pub redraws: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradcheckReport::passed)
    }

    pub fn max_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_error).fold(0.0, f64::max)
    }
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: LossFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape)
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        height: 8,
        width: 8,
        dilation_rates: vec![1, 2],
        kernel: 3,
        stage_channels: vec![3, 4],
        pooling: Pooling::Gap,
        latent_dim: 5,
        proj_hidden: 6,
        proj_dim: 4,
        reg_hidden: 3,
    }
}

/// Builds one random instance of every check.
fn cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Case)> {
    let mut out: Vec<(&'static str, Case)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            out.push(($name, Case { inputs: vec![$($input),*], f: Box::new($f) }));
        };
    }

    let w = probe(rng, &[3, 4]);
    case!("matmul", [uniform(rng, &[3, 5]), uniform(rng, &[5, 4])], move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[4, 3]);
    case!("transpose", [uniform(rng, &[3, 4])], move |g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[3, 2]);
    case!("linear", [uniform(rng, &[3, 4]), uniform(rng, &[4, 2]), uniform(rng, &[2])], move |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 3]);
    case!("add", [uniform(rng, &[2, 3]), uniform(rng, &[2, 3])], move |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 3]);
    case!("sub", [uniform(rng, &[2, 3]), uniform(rng, &[2, 3])], move |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 3]);
    case!("mul", [uniform(rng, &[2, 3]), uniform(rng, &[2, 3])], move |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 3]);
    case!("scale", [uniform(rng, &[2, 3])], move |g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[3, 4]);
    case!("add_bias", [uniform(rng, &[3, 4]), uniform(rng, &[4])], move |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[3, 4]);
    case!("relu", [away_from_zero(rng, &[3, 4])], move |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[3, 4]);
    let d = Tensor::from_fn([3, 4], |_| {
        let m: f64 = rng.random_range(0.05..0.9);
        let m = if rng.random_bool(0.5) { m } else { m + 1.1 };
        if rng.random_bool(0.5) { m } else { -m }
    });
    case!("huber", [d], move |g, v| {
        let y = g.huber(v[0], 1.0)?;
        weighted_sum(g, y, &w)
    });
    case!("sum", [uniform(rng, &[3, 4])], |g, v| g.sum(v[0]));
    case!("mean", [uniform(rng, &[3, 4])], |g, v| g.mean(v[0]));
    case!("off_diagonal_square_sum", [uniform(rng, &[4, 4])], |g, v| g.off_diagonal_square_sum(v[0]));
    case!("self_excluded_cross_entropy", [uniform(rng, &[4, 4])], |g, v| {
        g.self_excluded_cross_entropy(v[0], vec![2, 3, 0, 1])
    });
    let w = probe(rng, &[2, 12]);
    case!("flatten", [uniform(rng, &[2, 3, 2, 2])], move |g, v| {
        let y = g.flatten(v[0])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 5, 2, 3]);
    case!("concat_channels", [uniform(rng, &[2, 2, 2, 3]), uniform(rng, &[2, 3, 2, 3])], move |g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[5, 3]);
    case!("concat_rows", [uniform(rng, &[2, 3]), uniform(rng, &[3, 3])], move |g, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 3]);
    case!("slice_rows", [uniform(rng, &[5, 3])], move |g, v| {
        let y = g.slice_rows(v[0], 1, 2)?;
        weighted_sum(g, y, &w)
    });
    for (name, dilation, stride, padding, out_hw) in [
        ("conv2d_same_d1", 1, 1, Padding::Same, 6),
        ("conv2d_same_d2", 2, 1, Padding::Same, 6),
        ("conv2d_stride2_pad1", 1, 2, Padding::Explicit(1), 3),
    ] {
        let w = probe(rng, &[2, 3, out_hw, out_hw]);
        case!(name, [uniform(rng, &[2, 2, 6, 6]), uniform(rng, &[3, 2, 3, 3]), uniform(rng, &[3])], move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], dilation, stride, padding)?;
            weighted_sum(g, y, &w)
        });
    }
    let w = probe(rng, &[2, 2, 2, 3]);
    case!("avg_pool2d", [uniform(rng, &[2, 2, 4, 6])], move |g, v| {
        let y = g.avg_pool2d(v[0], 2)?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[2, 3]);
    case!("global_avg_pool", [uniform(rng, &[2, 3, 3, 2])], move |g, v| {
        let y = g.global_avg_pool(v[0])?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[3, 4]);
    case!("l2_normalize", [uniform(rng, &[3, 4])], move |g, v| {
        let y = g.l2_normalize(v[0], NORM_EPS)?;
        weighted_sum(g, y, &w)
    });
    let w = probe(rng, &[5, 3]);
    case!("batch_standardize", [uniform(rng, &[5, 3])], move |g, v| {
        let y = g.batch_standardize(v[0], NORM_EPS)?;
        weighted_sum(g, y, &w)
    });

    case!("ntxent_loss", [uniform(rng, &[4, 3]), uniform(rng, &[4, 3])], |g, v| ntxent_loss(g, v[0], v[1], 0.5));
    case!("redundancy_term", [uniform(rng, &[5, 3]), uniform(rng, &[5, 3])], |g, v| {
        let c = cross_correlation(g, v[0], v[1])?;
        redundancy_term(g, c)
    });
    for (name, variant) in [
        ("contrastive_loss_combined", LossVariant::Combined),
        ("contrastive_loss_ntxent_only", LossVariant::NtxentOnly),
        ("contrastive_loss_redundancy_only", LossVariant::RedundancyOnly),
    ] {
        let hp = HyperParams {
            batch_size: 4,
            loss_variant: variant,
            ..HyperParams::default()
        };
        case!(name, [uniform(rng, &[4, 3]), uniform(rng, &[4, 3])], move |g, v| contrastive_loss(g, v[0], v[1], &hp));
    }
    case!("huber_loss", [uniform(rng, &[4, 2]).map(|x| 3.0 * x), uniform(rng, &[4, 2])], |g, v| {
        huber_loss(g, v[0], v[1], 1.0)
    });

    // Gradients of the whole pretraining objective with respect to the images.
    let seed: u64 = rng.random();
    let params = build_model::<f64>(&tiny_encoder(), seed).expect("tiny encoder is valid");
    let x: Tensor<f64> = Tensor::from_fn([4, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let hp = HyperParams {
        batch_size: 2,
        ..HyperParams::default()
    };
    case!("pretraining_graph", [x], move |g, v| {
        let bound = params.bind(g, |_| false);
        let f = encoder_forward(g, &bound, v[0])?;
        let p = projection_forward(g, &bound, f)?;
        let p1 = g.slice_rows(p, 0, 2)?;
        let p2 = g.slice_rows(p, 2, 2)?;
        contrastive_loss(g, p1, p2, &hp)
    });
    out
}

/// Runs every check on `instances` random instances derived from `seed`.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    gradient_suite_with(instances, seed, STEP, TOLERANCE)
}

/// [`gradient_suite`] with an explicit finite-difference step and tolerance.
///
/// An instance is redrawn when its differences at `step` and `step / 10`
/// disagree by more than a tenth of `tolerance`, which happens when a relu
/// kink lies within `step` of an input or curvature is high. The filter only
/// looks at finite differences, never at backpropagated gradients.
pub fn gradient_suite_with(instances: usize, seed: u64, step: f64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries: Vec<SuiteEntry> = Vec::new();
    for i in 0..instances {
        let count = cases(&mut rng::stream(seed, &[0x6763, i as u64, 0])).len();
        for k in 0..count {
            let mut draw = 0;
            let (name, case) = loop {
                let mut rng = rng::stream(seed, &[0x6763, i as u64, draw as u64]);
                let (name, case) = cases(&mut rng).swap_remove(k);
                let spread = finite_difference_spread(&case.f, &case.inputs, step)?;
                if spread < tolerance / 10.0 || draw + 1 == MAX_DRAWS {
                    break (name, case);
                }
                draw += 1;
            };
            let report = gradcheck(&case.f, &case.inputs, step, tolerance)?;
            if i == 0 {
                entries.push(SuiteEntry { name, reports: Vec::new(), redraws: 0 });
            }
            entries[k].reports.push(report);
            entries[k].redraws += draw;
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let entries = gradient_suite(1, 7).unwrap();
        for e in &entries {
            assert!(e.passed(), "{}: max error {:e}", e.name, e.max_error());
        }
    }
}
