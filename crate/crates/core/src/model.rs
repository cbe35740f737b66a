//! Encoder, projection head and regression head.
//!
//! Each encoder stage runs one 3x3 convolution per dilation rate in
//! parallel ("same" padding, so all branches keep the stage resolution),
//! concatenates the branch outputs along channels, fuses them with a 1x1
//! convolution and halves the resolution with 2x2 average pooling. After
//! the last stage the map is reduced by global average pooling (or
//! flattened) and mapped linearly to the latent vector.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Padding, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Gap,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Dilation rates of the parallel branches, shared by every stage.
    pub dilation_rates: Vec<usize>,
    pub kernel: usize,
    /// Output channels of each branch (and of the fusion) per stage.
    pub stage_channels: Vec<usize>,
    pub pooling: Pooling,
    pub latent_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub reg_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            height: 64,
            width: 64,
            dilation_rates: vec![1, 2, 4],
            kernel: 3,
            stage_channels: vec![16, 32, 64],
            pooling: Pooling::Gap,
            latent_dim: 128,
            proj_hidden: 128,
            proj_dim: 64,
            reg_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_channels.is_empty() {
            return bad("at least one encoder stage is required".into());
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return bad(format!("dilation rates must be non-empty and >= 1: {:?}", self.dilation_rates));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        let dims = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("latent_dim", self.latent_dim),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
            ("reg_hidden", self.reg_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        if self.stage_channels.contains(&0) {
            return bad("stage channels must be >= 1".into());
        }
        let factor = 1usize << self.stages();
        if self.height % factor != 0 || self.width % factor != 0 {
            return bad(format!(
                "{}x{} input cannot be halved {} times",
                self.height,
                self.width,
                self.stages()
            ));
        }
        Ok(())
    }

    /// Spatial size after the last stage.
    pub fn final_spatial(&self) -> (usize, usize) {
        let f = 1usize << self.stages();
        (self.height / f, self.width / f)
    }

    /// Width of the vector entering the latent linear map.
    pub fn pooled_width(&self) -> usize {
        let c = *self.stage_channels.last().expect("validated");
        match self.pooling {
            Pooling::Gap => c,
            Pooling::Flatten => {
                let (h, w) = self.final_spatial();
                c * h * w
            }
        }
    }

    /// Every parameter as (name, shape, fan-in, followed by relu), in
    /// initialization order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize, bool)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut push_layer = |prefix: String, w_shape: Vec<usize>, fan_in: usize, relu: bool| {
            let bias_len = w_shape[0];
            out.push((format!("{prefix}.w"), w_shape, fan_in, relu));
            out.push((format!("{prefix}.b"), vec![bias_len], fan_in, relu));
        };
        let mut in_c = self.in_channels;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            for b in 0..self.dilation_rates.len() {
                push_layer(format!("enc.s{s}.b{b}"), vec![c, in_c, k, k], in_c * k * k, true);
            }
            let cat = c * self.dilation_rates.len();
            push_layer(format!("enc.s{s}.fuse"), vec![c, cat, 1, 1], cat, true);
            in_c = c;
        }
        // Linear weights are stored input-major (I x O); bias length is the last extent.
        let mut push_linear = |prefix: &str, i: usize, o: usize, relu: bool| {
            out.push((format!("{prefix}.w"), vec![i, o], i, relu));
            out.push((format!("{prefix}.b"), vec![o], i, relu));
        };
        push_linear("enc.head", self.pooled_width(), self.latent_dim, false);
        push_linear("proj.l0", self.latent_dim, self.proj_hidden, true);
        push_linear("proj.l1", self.proj_hidden, self.proj_dim, false);
        push_linear("reg.l0", self.latent_dim, self.reg_hidden, true);
        push_linear("reg.l1", self.reg_hidden, 2, false);
        out
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Regressor,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("proj.") {
            ParamGroup::Projection
        } else if name.starts_with("reg.") {
            ParamGroup::Regressor
        } else {
            ParamGroup::Encoder
        }
    }
}

/// Named parameter tensors of all three networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Kaiming-uniform initialization from a seeded generator. Weights feeding
/// a relu use bound `sqrt(6 / fan_in)`, linear outputs `sqrt(3 / fan_in)`;
/// biases start at zero.
pub fn build_model<T: Element>(cfg: &EncoderConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, fan_in, relu) in cfg.layout() {
        let t = if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else {
            let bound = ((if relu { 6.0 } else { 3.0 }) / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        config: cfg.clone(),
        tensors,
    })
}

impl<T: Element> ModelParams<T> {
    /// Reassembles parameters read from storage, checking names and shapes.
    pub fn from_tensors(config: EncoderConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape, _, _) in &layout {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(
                        "model parameters",
                        format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                    ))
                }
                None => return Err(Error::InvalidArgument(format!("missing parameter {name}"))),
            }
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Replaces a parameter with one of identical shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set parameter",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(n, _)| ParamGroup::of(n) == group)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Records every parameter on `g`; `trainable` decides which ones receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Bound {
            config: &self.config,
            vars,
        }
    }

    /// Latent vectors for a batch of images, without recording gradients.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let x = g.constant(x.clone());
        let f = encoder_forward(&mut g, &bound, x)?;
        Ok(g.value(f).clone())
    }

    /// Projections of latent vectors.
    pub fn project(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let f = g.constant(f.clone());
        let p = projection_forward(&mut g, &bound, f)?;
        Ok(g.value(p).clone())
    }

    /// (pitch, yaw) predictions from latent vectors.
    pub fn regress(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let f = g.constant(f.clone());
        let y = regressor_forward(&mut g, &bound, f)?;
        Ok(g.value(y).clone())
    }
}

/// Parameters recorded on a particular graph.
pub struct Bound<'a> {
    config: &'a EncoderConfig,
    vars: BTreeMap<String, Var>,
}

impl<'a> Bound<'a> {
    /// Uses existing graph variables as the parameters, one per layout entry.
    pub fn from_vars(config: &'a EncoderConfig, vars: impl IntoIterator<Item = (String, Var)>) -> Result<Self> {
        let vars: BTreeMap<String, Var> = vars.into_iter().collect();
        let layout = config.layout();
        if layout.len() != vars.len() || layout.iter().any(|(n, ..)| !vars.contains_key(n)) {
            return Err(Error::InvalidArgument(format!(
                "bound variables do not match the layout of {} parameters",
                layout.len()
            )));
        }
        Ok(Bound { config, vars })
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is part of every layout"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn linear<T: Element>(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        g.linear(x, self.var(&format!("{prefix}.w")), self.var(&format!("{prefix}.b")))
    }

    fn conv<T: Element>(&self, g: &mut Graph<T>, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
        g.conv2d(
            x,
            self.var(&format!("{prefix}.w")),
            self.var(&format!("{prefix}.b")),
            dilation,
            1,
            Padding::Same,
        )
    }
}

/// `B x C x H x W` images to `B x latent_dim` latent vectors.
pub fn encoder_forward<T: Element>(g: &mut Graph<T>, p: &Bound<'_>, x: Var) -> Result<Var> {
    let cfg = p.config;
    match *g.shape(x) {
        [_, c, h, w] if (c, h, w) == (cfg.in_channels, cfg.height, cfg.width) => {}
        ref s => {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "input {s:?}, expected B x {} x {} x {}",
                    cfg.in_channels, cfg.height, cfg.width
                ),
            ))
        }
    }
    let mut h = x;
    for s in 0..cfg.stages() {
        let mut branches = Vec::with_capacity(cfg.dilation_rates.len());
        for (b, &rate) in cfg.dilation_rates.iter().enumerate() {
            let y = p.conv(g, &format!("enc.s{s}.b{b}"), h, rate)?;
            branches.push(g.relu(y)?);
        }
        let cat = g.concat_channels(&branches)?;
        let fused = p.conv(g, &format!("enc.s{s}.fuse"), cat, 1)?;
        let fused = g.relu(fused)?;
        h = g.avg_pool2d(fused, 2)?;
    }
    let pooled = match cfg.pooling {
        Pooling::Gap => g.global_avg_pool(h)?,
        Pooling::Flatten => g.flatten(h)?,
    };
    p.linear(g, "enc.head", pooled)
}

/// Two-layer MLP: latent -> hidden (relu) -> projection.
pub fn projection_forward<T: Element>(g: &mut Graph<T>, p: &Bound<'_>, f: Var) -> Result<Var> {
    let h = p.linear(g, "proj.l0", f)?;
    let h = g.relu(h)?;
    p.linear(g, "proj.l1", h)
}

/// Two-layer MLP: latent -> hidden (relu) -> (pitch, yaw).
pub fn regressor_forward<T: Element>(g: &mut Graph<T>, p: &Bound<'_>, f: Var) -> Result<Var> {
    let h = p.linear(g, "reg.l0", f)?;
    let h = g.relu(h)?;
    p.linear(g, "reg.l1", h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
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

    #[test]
    fn seeded_build_is_deterministic() {
        let a = build_model::<f32>(&tiny(), 7).unwrap();
        let b = build_model::<f32>(&tiny(), 7).unwrap();
        let c = build_model::<f32>(&tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.dilation_rates.clear();
        assert!(build_model::<f32>(&c, 0).is_err());
        let mut c = tiny();
        c.stage_channels = vec![2, 2, 2, 2];
        assert!(c.validate().is_err(), "8x8 cannot be halved four times");
        let mut c = tiny();
        c.latent_dim = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.kernel = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = build_model::<f64>(&tiny(), 1).unwrap();
        let x = Tensor::from_fn([2, 3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let f = m.embed(&x).unwrap();
        assert_eq!(f.shape(), &[2, 5]);
        assert_eq!(m.project(&f).unwrap().shape(), &[2, 4]);
        assert_eq!(m.regress(&f).unwrap().shape(), &[2, 2]);
        let wrong = Tensor::zeros([2, 3, 8, 4]);
        assert!(m.embed(&wrong).is_err());
    }

    #[test]
    fn zero_input_zero_bias_projects_to_zero() {
        let m = build_model::<f64>(&tiny(), 1).unwrap();
        let p = m.project(&Tensor::zeros([4, 5])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_tensors_checks_layout() {
        let m = build_model::<f32>(&tiny(), 3).unwrap();
        let tensors: BTreeMap<_, _> = m.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let back = ModelParams::from_tensors(tiny(), tensors.clone()).unwrap();
        assert_eq!(back, m);
        let mut missing = tensors.clone();
        missing.remove("reg.l1.b");
        assert!(ModelParams::from_tensors(tiny(), missing).is_err());
        let mut wrong = tensors;
        wrong.insert("reg.l1.b".into(), Tensor::zeros([3]));
        assert!(ModelParams::from_tensors(tiny(), wrong).is_err());
    }

    #[test]
    fn groups_partition_parameters() {
        let m = build_model::<f32>(&tiny(), 3).unwrap();
        let total = m.group_count(ParamGroup::Encoder)
            + m.group_count(ParamGroup::Projection)
            + m.group_count(ParamGroup::Regressor);
        assert_eq!(total, m.parameter_count());
        assert_eq!(ParamGroup::of("proj.l0.w"), ParamGroup::Projection);
        assert_eq!(ParamGroup::of("enc.s0.b1.w"), ParamGroup::Encoder);
    }
}
