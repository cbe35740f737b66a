//! Two-stage training: contrastive pretraining of encoder and projection
//! head on unlabeled images, then Huber fine-tuning of the regressor.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::augment::{augment_pair, AugmentSpec};
use crate::checkpoint::{Checkpoint, RngState, Stage};
use crate::config::RunConfig;
use crate::data::{batches, split_dataset, stack_images, stack_labels, BatchMode, GazeSample};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, huber_loss, mean_angular_error, HyperParams};
use crate::model::{
    build_model, encoder_forward, projection_forward, regressor_forward, ModelParams, ParamGroup,
};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor};

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor<f32>>;

const AUGMENT_STREAM: u64 = 0x6175_676d;
const INFERENCE_CHUNK: usize = 64;

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Nothing is modified unless all gradients are valid.
pub fn adam_step(params: &mut ModelParams<f32>, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of {name}"),
            });
        }
        for moments in [&state.m, &state.v] {
            if let Some(t) = moments.get(name) {
                if t.shape() != g.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("{name}: moment {:?}, gradient {:?}", t.shape(), g.shape()),
                    ));
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, g) in grads {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("checked above");
        let it = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            .zip(g.data());
        for ((p, (m, v)), &g) in it {
            let g = g as f64;
            let m_new = b1 * *m as f64 + (1.0 - b1) * g;
            let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

fn with_context(err: Error, context: &str) -> Error {
    match err {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} ({context})"),
        },
        e => e,
    }
}

/// Contrastive loss and encoder/projection gradients for one pair of view batches.
pub fn contrastive_gradients(
    params: &ModelParams<f32>,
    view1: &Tensor<f32>,
    view2: &Tensor<f32>,
    hp: &HyperParams,
) -> Result<(f64, Gradients)> {
    let b = view1.shape().first().copied().unwrap_or(0);
    if view1.shape() != view2.shape() {
        return Err(Error::shape(
            "contrastive_gradients",
            format!("{:?} vs {:?}", view1.shape(), view2.shape()),
        ));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |n| ParamGroup::of(n) != ParamGroup::Regressor);
    // Both views go through the encoder as one batch.
    let x = g.constant(Tensor::concat_rows(&[view1.clone(), view2.clone()])?);
    let f = encoder_forward(&mut g, &bound, x)?;
    let p = projection_forward(&mut g, &bound, f)?;
    let p1 = g.slice_rows(p, 0, b)?;
    let p2 = g.slice_rows(p, b, b)?;
    let loss = contrastive_loss(&mut g, p1, p2, hp)?;
    g.backward(loss)?;
    let value = g.value(loss).item()?.as_f64();
    Ok((value, collect_grads(&g, &bound)))
}

fn collect_grads(g: &Graph<f32>, bound: &crate::model::Bound<'_>) -> Gradients {
    bound
        .vars()
        .filter(|&(_, v)| g.requires_grad(v))
        .map(|(name, v)| {
            let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            (name.to_string(), grad)
        })
        .collect()
}

/// Both augmented views of `samples[i]` for every `i` in `batch`, stacked.
/// Sample `i` draws from its own `(seed, epoch, i)` stream, so the result
/// does not depend on thread scheduling.
pub fn augment_batch(
    samples: &[GazeSample],
    batch: &[usize],
    spec: &AugmentSpec,
    seed: u64,
    epoch: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let views = batch
        .par_iter()
        .map(|&i| {
            let sample = samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
            let mut r = rng::stream(seed, &[AUGMENT_STREAM, epoch, i as u64]);
            augment_pair(&sample.image, spec, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let (v1, v2): (Vec<_>, Vec<_>) = views.into_iter().unzip();
    Ok((Tensor::stack(&v1)?, Tensor::stack(&v2)?))
}

/// Fresh model, then `cfg.pretrain_epochs` epochs of contrastive training.
pub fn pretrain(unlabeled: &[GazeSample], cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let params = build_model(&cfg.encoder_config(), cfg.model_seed)?;
    let ckpt = Checkpoint {
        config: cfg.training_snapshot(),
        stage: Stage::Pretrained,
        epoch: 0,
        loss_history: Vec::new(),
        params,
        optimizer: AdamState::new(cfg.pretrain_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        rng: RngState {
            seed: cfg.train_seed,
            epoch: 0,
        },
    };
    resume_pretraining(ckpt, unlabeled, cfg.pretrain_epochs)
}

/// Continues a pretraining checkpoint until it has seen `total_epochs`
/// epochs. Equivalent to an uninterrupted run of the same length.
pub fn resume_pretraining(mut ckpt: Checkpoint, unlabeled: &[GazeSample], total_epochs: u64) -> Result<Checkpoint> {
    ckpt.expect_stage(Stage::Pretrained)?;
    let hp = ckpt.config.hyper_params();
    let spec = ckpt.config.augment_spec();
    hp.validate()?;
    if unlabeled.len() < hp.batch_size {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs at least one full batch of {} samples, got {}",
            hp.batch_size,
            unlabeled.len()
        )));
    }
    let indices: Vec<usize> = (0..unlabeled.len()).collect();
    let seed = ckpt.rng.seed;
    while ckpt.epoch < total_epochs {
        let epoch = ckpt.rng.epoch;
        let mut total = 0.0;
        let plan = batches(&indices, hp.batch_size, seed, epoch, BatchMode::Contrastive)?;
        for (bi, batch) in plan.iter().enumerate() {
            let (v1, v2) = augment_batch(unlabeled, batch, &spec, seed, epoch)?;
            let context = format!("pretraining epoch {} batch {bi}", epoch + 1);
            let (loss, grads) =
                contrastive_gradients(&ckpt.params, &v1, &v2, &hp).map_err(|e| with_context(e, &context))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: format!("contrastive loss ({context})") });
            }
            adam_step(&mut ckpt.params, &grads, &mut ckpt.optimizer).map_err(|e| with_context(e, &context))?;
            total += loss;
        }
        let mean = total / plan.len() as f64;
        log::info!("pretrain epoch {}/{total_epochs}: loss {mean:.5}", epoch + 1);
        ckpt.loss_history.push(mean);
        ckpt.epoch += 1;
        ckpt.rng.epoch += 1;
    }
    ckpt.config.pretrain_epochs = ckpt.epoch;
    Ok(ckpt)
}

/// Latent vectors of every sample, in order.
pub fn embed_samples(params: &ModelParams<f32>, samples: &[GazeSample]) -> Result<Tensor<f32>> {
    let chunks = samples
        .chunks(INFERENCE_CHUNK)
        .map(|c| params.embed(&stack_images(c)?))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&chunks)
}

/// (pitch, yaw) predictions, `N x 2`.
pub fn predict(params: &ModelParams<f32>, samples: &[GazeSample]) -> Result<Tensor<f32>> {
    params.regress(&embed_samples(params, samples)?)
}

/// Trains the regressor with the Huber loss. `init` is a pretrained
/// checkpoint; `None` starts from a randomly initialized model (the
/// scratch baseline) and otherwise follows the same path.
pub fn finetune(labeled: &[GazeSample], init: Option<&Checkpoint>, cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut params = match init {
        Some(ckpt) => {
            ckpt.expect_stage(Stage::Pretrained)?;
            if ckpt.params.config() != &cfg.encoder_config() {
                return Err(Error::InvalidConfig(
                    "encoder settings differ from the pretrained checkpoint".into(),
                ));
            }
            ckpt.params.clone()
        }
        None => build_model(&cfg.encoder_config(), cfg.model_seed)?,
    };
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs labeled samples".into()));
    }
    let mut optimizer = AdamState::new(cfg.finetune_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let labels = stack_labels(labeled)?;
    let features = if cfg.freeze_encoder {
        Some(embed_samples(&params, labeled)?)
    } else {
        None
    };
    let indices: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(cfg.finetune_epochs as usize);
    for epoch in 0..cfg.finetune_epochs {
        let plan = batches(&indices, cfg.batch_size, cfg.train_seed, epoch, BatchMode::Finetune)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, batch) in plan.iter().enumerate() {
            let context = format!("fine-tuning epoch {} batch {bi}", epoch + 1);
            let target = gather_rows(&labels, batch)?;
            let mut g = Graph::new();
            let (bound, f) = match &features {
                Some(feats) => {
                    let bound = params.bind(&mut g, |n| ParamGroup::of(n) == ParamGroup::Regressor);
                    let f = g.constant(gather_rows(feats, batch)?);
                    (bound, f)
                }
                None => {
                    let bound = params.bind(&mut g, |n| ParamGroup::of(n) != ParamGroup::Projection);
                    let x = g.constant(stack_images(batch.iter().map(|&i| &labeled[i]))?);
                    let f = encoder_forward(&mut g, &bound, x).map_err(|e| with_context(e, &context))?;
                    (bound, f)
                }
            };
            let step = (|| {
                let y = regressor_forward(&mut g, &bound, f)?;
                let t = g.constant(target);
                let loss = huber_loss(&mut g, y, t, cfg.delta)?;
                g.backward(loss)?;
                Ok::<_, Error>(g.value(loss).item()?.as_f64())
            })()
            .map_err(|e| with_context(e, &context))?;
            let grads = collect_grads(&g, &bound);
            adam_step(&mut params, &grads, &mut optimizer).map_err(|e| with_context(e, &context))?;
            total += step * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        log::info!("fine-tune epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.finetune_epochs);
        history.push(mean);
    }
    Ok(Checkpoint {
        config: cfg.training_snapshot(),
        stage: Stage::Finetuned,
        epoch: cfg.finetune_epochs,
        loss_history: history,
        params,
        optimizer,
        rng: RngState {
            seed: cfg.train_seed,
            epoch: cfg.finetune_epochs,
        },
    })
}

fn gather_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let parts = rows
        .iter()
        .map(|&r| t.slice_rows(r, 1))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Mean angular error in degrees of a fine-tuned model on `test`.
pub fn evaluate(ckpt: &Checkpoint, test: &[GazeSample]) -> Result<f64> {
    ckpt.expect_stage(Stage::Finetuned)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("no test samples".into()));
    }
    let pred = predict(&ckpt.params, test)?;
    mean_angular_error(&pred, &stack_labels(test)?)
}

/// The unlabeled pretraining pool and the labeled fine-tuning pool of a
/// training set, per `cfg.split_seed` and `cfg.labeled_limit`.
pub struct Pools<'a> {
    samples: &'a [GazeSample],
    unlabeled: Vec<usize>,
    labeled: Vec<usize>,
}

impl<'a> Pools<'a> {
    pub fn new(samples: &'a [GazeSample], cfg: &RunConfig) -> Result<Self> {
        let split = split_dataset(samples.len(), cfg.split_seed)?;
        let mut labeled = split.finetune_labeled;
        if cfg.labeled_limit > 0 {
            labeled.truncate(cfg.labeled_limit);
        }
        Ok(Pools {
            samples,
            unlabeled: split.pretrain_unlabeled,
            labeled,
        })
    }

    /// Samples of the pretraining pool. Pretraining ignores their labels.
    pub fn unlabeled(&self) -> Vec<GazeSample> {
        self.unlabeled.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn labeled(&self) -> Vec<GazeSample> {
        self.labeled.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Outcome of one full pretrain / fine-tune / evaluate run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub pretrained: Option<Checkpoint>,
    pub finetuned: Checkpoint,
    pub mae_deg: f64,
}

/// Splits `train` 80:20, pretrains on the unlabeled part (unless
/// `cfg.scratch`), fine-tunes on up to `cfg.labeled_limit` labeled samples
/// and evaluates on `test`.
pub fn run_pipeline(train: &[GazeSample], test: &[GazeSample], cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let pools = Pools::new(train, cfg)?;
    let labeled = pools.labeled();
    let pretrained = if cfg.scratch {
        None
    } else {
        Some(pretrain(&pools.unlabeled(), cfg)?)
    };
    let finetuned = finetune(&labeled, pretrained.as_ref(), cfg)?;
    let mae_deg = evaluate(&finetuned, test)?;
    Ok(PipelineRun {
        pretrained,
        finetuned,
        mae_deg,
    })
}

/// Trailing moving average over `window` epochs.
pub fn smoothed(history: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..history.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s = &history[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}
