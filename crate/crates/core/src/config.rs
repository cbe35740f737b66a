//! Flat run configuration shared by every command.
//!
//! Files are TOML key/value documents; any key can be overridden on the
//! command line as `--key=value`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentOp, AugmentSpec, Strength};
use crate::error::{Error, Result};
use crate::losses::{HyperParams, LossVariant};
use crate::model::{EncoderConfig, Pooling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_path: String,
    pub test_path: String,
    pub split_seed: u64,
    /// Size of the labeled pool taken from the fine-tuning split (0: all of it).
    pub labeled_limit: usize,
    pub image_size: usize,

    pub dilation_rates: Vec<usize>,
    pub kernel: usize,
    pub stage_channels: Vec<usize>,
    pub pooling: Pooling,
    pub latent_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub reg_hidden: usize,

    pub tau: f64,
    pub gamma: f64,
    pub delta: f64,
    pub batch_size: usize,
    pub loss_variant: LossVariant,

    /// Operations each view draws from.
    pub augment_ops: Vec<AugmentOp>,
    pub augment_strength: Strength,
    pub picks_per_view: usize,

    pub pretrain_epochs: u64,
    pub finetune_epochs: u64,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub freeze_encoder: bool,
    /// Fine-tune from random initialization instead of a pretrained checkpoint.
    pub scratch: bool,
    pub model_seed: u64,
    pub train_seed: u64,

    pub checkpoint_path: String,
    pub output_path: String,
    /// Pretraining checkpoint to continue from.
    pub resume_path: String,
    /// Pretrained checkpoint that fine-tuning starts from.
    pub init_path: String,

    pub ablation_seeds: Vec<u64>,
    pub ablation_gammas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let hp = HyperParams::default();
        RunConfig {
            data_path: "data/train.cgzd".into(),
            test_path: "data/test.cgzd".into(),
            split_seed: 0,
            labeled_limit: 0,
            image_size: enc.height,
            dilation_rates: enc.dilation_rates,
            kernel: enc.kernel,
            stage_channels: enc.stage_channels,
            pooling: enc.pooling,
            latent_dim: enc.latent_dim,
            proj_hidden: enc.proj_hidden,
            proj_dim: enc.proj_dim,
            reg_hidden: enc.reg_hidden,
            tau: hp.tau,
            gamma: hp.gamma,
            delta: hp.delta,
            batch_size: hp.batch_size,
            loss_variant: hp.loss_variant,
            augment_ops: AugmentOp::POOL.to_vec(),
            augment_strength: Strength::Weak,
            picks_per_view: 3,
            pretrain_epochs: 8,
            finetune_epochs: 1000,
            pretrain_lr: 1e-3,
            finetune_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            freeze_encoder: true,
            scratch: false,
            model_seed: 1,
            train_seed: 1,
            checkpoint_path: String::new(),
            output_path: String::new(),
            resume_path: String::new(),
            init_path: String::new(),
            ablation_seeds: vec![1, 2, 3],
            ablation_gammas: vec![0.005, 0.01, 0.1],
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::data::with_path(e, path))?;
        Self::from_toml(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all TOML-representable")
    }

    /// Applies one `key=value` override. Values are parsed as TOML, falling
    /// back to a plain string (`--pooling=flatten`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {assignment:?}")))?;
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut table = toml::Table::try_from(&*self).expect("config serializes to a table");
        if !table.contains_key(&key) {
            return Err(Error::InvalidConfig(format!("unknown key {key:?}")));
        }
        table.insert(key.clone(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    /// The settings that determine training, with file locations cleared.
    /// Checkpoints store this, so runs that differ only in where they read
    /// and write produce identical files.
    pub fn training_snapshot(&self) -> RunConfig {
        RunConfig {
            data_path: String::new(),
            test_path: String::new(),
            checkpoint_path: String::new(),
            output_path: String::new(),
            resume_path: String::new(),
            init_path: String::new(),
            ..self.clone()
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            height: self.image_size,
            width: self.image_size,
            dilation_rates: self.dilation_rates.clone(),
            kernel: self.kernel,
            stage_channels: self.stage_channels.clone(),
            pooling: self.pooling,
            latent_dim: self.latent_dim,
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            reg_hidden: self.reg_hidden,
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            tau: self.tau,
            gamma: self.gamma,
            delta: self.delta,
            batch_size: self.batch_size,
            loss_variant: self.loss_variant,
        }
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            ops_pool: self.augment_ops.clone(),
            picks_per_view: self.picks_per_view,
            strength: self.augment_strength,
        }
    }

    /// Checks every field before any computation starts.
    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.hyper_params().validate()?;
        self.augment_spec().validate()?;
        let positive = [
            ("pretrain_lr", self.pretrain_lr),
            ("finetune_lr", self.finetune_lr),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::InvalidConfig("ablation_seeds must not be empty".into()));
        }
        if self.ablation_gammas.is_empty() || self.ablation_gammas.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "ablation_gammas must be non-empty and >= 0: {:?}",
                self.ablation_gammas
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
        assert_eq!(RunConfig::load(format!("{dir}/default.toml")).unwrap(), RunConfig::default());
        let quick = RunConfig::load(format!("{dir}/quickstart.toml")).unwrap();
        quick.validate().unwrap();
        assert_eq!(quick.image_size, 32);
    }

    #[test]
    fn augment_ops_override() {
        let mut c = RunConfig::default();
        c.set(r#"--augment_ops=["zoom", "hue"]"#).unwrap();
        assert_eq!(c.augment_spec().ops_pool, vec![AugmentOp::Zoom, AugmentOp::Hue]);
        c.validate().unwrap_err();
        c.set("--picks_per_view=2").unwrap();
        c.validate().unwrap();
        assert!(c.set(r#"--augment_ops=["blur"]"#).is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("tau = 0.2\npooling = \"flatten\"\n").unwrap();
        assert_eq!(c.tau, 0.2);
        assert_eq!(c.pooling, Pooling::Flatten);
        assert_eq!(c.batch_size, 64);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(RunConfig::from_toml("temperature = 0.5").is_err());
        assert!(RunConfig::default().set("--temperature=0.5").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("--gamma=0.01").unwrap();
        c.set("--pooling=flatten").unwrap();
        c.set("--loss_variant=ntxent_only").unwrap();
        c.set("--dilation_rates=[1, 3]").unwrap();
        c.set("--freeze-encoder=false").unwrap();
        c.set("--data_path=some/file.cgzd").unwrap();
        assert_eq!(c.gamma, 0.01);
        assert_eq!(c.pooling, Pooling::Flatten);
        assert_eq!(c.loss_variant, LossVariant::NtxentOnly);
        assert_eq!(c.dilation_rates, vec![1, 3]);
        assert!(!c.freeze_encoder);
        assert_eq!(c.data_path, "some/file.cgzd");
        assert!(c.set("--batch_size=many").is_err());
        assert!(c.set("--pooling=max").is_err());
        assert!(c.set("gamma").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        for o in ["--tau=0", "--batch_size=1", "--adam_beta1=1.0", "--dilation_rates=[]", "--picks_per_view=9", "--ablation_seeds=[]"] {
            let mut c = RunConfig::default();
            c.set(o).unwrap();
            assert!(c.validate().is_err(), "{o}");
        }
    }
}
