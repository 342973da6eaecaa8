//! Alternating minmax training of all six model variants, with epoch
//! checkpoints, append-only metrics and bit-reproducible resume.

mod checkpoint;
mod metrics;
mod step;

pub use checkpoint::{
    load_checkpoint, resolve_checkpoint_path, save_checkpoint, Checkpoint, CheckpointError,
    RngSnapshot,
};
pub use metrics::{read_metrics, MetricsWriter, StepMetrics};
pub use step::train_step;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, AugmentConfig, DataError, Manifest, Split};
use crate::derive_seed;
use crate::losses::{LossError, LossWeights};
use crate::networks::{
    ClassifierSpec, DiscriminatorSpec, GenArch, GeneratorSpec, ModelSpecs, Models, NetworkError,
};
use crate::optim::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss `{component}` at epoch {epoch} step {step}; aborting")]
    NonFinite {
        component: String,
        epoch: usize,
        step: usize,
    },
    #[error("variant {0} requires labelled domain-A batches")]
    MissingLabels(Variant),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The six model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain CycleGAN objective with UNet generators.
    Base,
    /// Same objective with attention-gated UNet generators.
    Dpa,
    /// `G_BA` and `D_A` conditioned on the one-hot artifact class.
    Cond,
    /// A→B→A cycle weight pinned to zero.
    NoAba,
    /// Attention channel handed to `G_BA` inside the A→B→A cycle.
    Attn,
    /// `attn` plus the weak-label classifier and mask regularisers.
    Ws,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::Dpa,
        Variant::Cond,
        Variant::NoAba,
        Variant::Attn,
        Variant::Ws,
    ];

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::Attn | Variant::Ws)
    }

    pub fn conditioned(self) -> bool {
        matches!(self, Variant::Cond)
    }

    pub fn needs_labels(self) -> bool {
        matches!(self, Variant::Cond | Variant::Ws)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Dpa => "dpa",
            Variant::Cond => "cond",
            Variant::NoAba => "no_aba",
            Variant::Attn => "attn",
            Variant::Ws => "ws",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Variant::Base),
            "dpa" => Ok(Variant::Dpa),
            "cond" => Ok(Variant::Cond),
            "no_aba" | "no-aba" => Ok(Variant::NoAba),
            "attn" => Ok(Variant::Attn),
            "ws" => Ok(Variant::Ws),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

/// Full training recipe. Defaults mirror the published protocol: Adam with
/// lr 0.001, β₁ 0.5, β₂ 0.999, exponential lr decay γ = 0.9975 per epoch,
/// 30 epochs at batch size 16, weight decay 1e-5 and label smoothing 0.9
/// on the discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Exponential decay factor applied per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Smoothed discriminator target for real samples.
    pub real_label: f64,
    pub seed: u64,
    /// When set, metric logs are a pure function of (config, data, seed):
    /// wall-clock readings are zeroed.
    pub deterministic: bool,
    pub augment: AugmentConfig,
    pub gen_base_width: usize,
    pub gen_depth: usize,
    pub disc_widths: Vec<usize>,
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let mut weights = LossWeights::default();
        if variant == Variant::NoAba {
            weights.lambda_aba = 0.0;
        }
        TrainConfig {
            variant,
            weights,
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            lr_decay: 0.9975,
            epochs: 30,
            batch_size: 16,
            weight_decay: 1e-5,
            real_label: 0.9,
            seed: 7,
            deterministic: true,
            augment: AugmentConfig::default(),
            gen_base_width: 32,
            gen_depth: 4,
            disc_widths: vec![64, 128, 256, 512],
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate().map_err(TrainError::InvalidConfig)?;
        if self.variant == Variant::NoAba && self.weights.lambda_aba != 0.0 {
            return Err(TrainError::InvalidConfig(
                "variant no_aba forces lambda_aba = 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::InvalidConfig(
                "lr must be positive and lr_decay in (0,1]".into(),
            ));
        }
        if !(self.real_label > 0.0 && self.real_label <= 1.0) {
            return Err(TrainError::InvalidConfig(
                "real_label must lie in (0,1]".into(),
            ));
        }
        self.model_specs().validate()?;
        Ok(())
    }

    /// Network wiring for this variant: input channel counts, generator
    /// arch, attention head and classifier presence.
    pub fn model_specs(&self) -> ModelSpecs {
        let arch = if self.variant == Variant::Dpa {
            GenArch::AttentionUnet
        } else {
            GenArch::Unet
        };
        let g_ba_in = if self.variant.conditioned() {
            10
        } else if self.variant.uses_attention() {
            4
        } else {
            3
        };
        let d_a_in = if self.variant.conditioned() { 10 } else { 3 };
        ModelSpecs {
            g_ab: GeneratorSpec::new(arch, 3, self.gen_base_width, self.gen_depth),
            g_ba: GeneratorSpec::new(arch, g_ba_in, self.gen_base_width, self.gen_depth),
            d_a: DiscriminatorSpec::new(d_a_in, self.disc_widths.clone()),
            d_b: DiscriminatorSpec::new(3, self.disc_widths.clone()),
            attention: self.variant.uses_attention(),
            classifier: (self.variant == Variant::Ws).then(ClassifierSpec::default),
        }
    }
}

/// Learning rate after `epoch` completed epochs: `lr·γ^epoch`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

/// Live training state: networks, optimisers, the trainer's own random
/// stream (noise channels, sampled condition labels) and the epoch count.
pub struct TrainState {
    pub models: Models,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub cfg: TrainConfig,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let models = Models::build(cfg.model_specs(), cfg.seed)?;
        let store_len = models.store.len();
        Ok(TrainState {
            models,
            opt_g: Adam::new(
                cfg.beta1 as f32,
                cfg.beta2 as f32,
                cfg.weight_decay as f32,
                store_len,
            ),
            opt_d: Adam::new(
                cfg.beta1 as f32,
                cfg.beta2 as f32,
                cfg.weight_decay as f32,
                store_len,
            ),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "trainer", 0)),
            epoch: 0,
            cfg,
        })
    }

    /// Serialisable snapshot of the full state.
    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .models
            .store
            .ids()
            .map(|id| {
                (
                    self.models.store.name(id).to_string(),
                    self.models.store.value(id).clone(),
                )
            })
            .collect();
        Checkpoint {
            version: checkpoint::FORMAT_VERSION,
            config: self.cfg.clone(),
            epoch: self.epoch,
            params,
            opt_g: self.opt_g.state(&self.models.store),
            opt_d: self.opt_d.state(&self.models.store),
            rng: RngSnapshot::capture(&self.rng),
        }
    }

    /// Rebuilds a state from a checkpoint, adopting `cfg` for run-level
    /// settings (e.g. an extended epoch budget). The architecture and
    /// variant must match the checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self, TrainError> {
        if ckpt.config.variant != cfg.variant {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint was trained with variant {}, requested {}",
                ckpt.config.variant, cfg.variant
            )));
        }
        if ckpt.config.model_specs() != cfg.model_specs() {
            return Err(TrainError::ConfigMismatch(
                "checkpoint architecture differs from the requested config".into(),
            ));
        }
        let mut state = TrainState::new(cfg)?;
        state.load_parameters(&ckpt)?;
        state
            .opt_g
            .load_state(&state.models.store, &ckpt.opt_g)
            .map_err(TrainError::ConfigMismatch)?;
        state
            .opt_d
            .load_state(&state.models.store, &ckpt.opt_d)
            .map_err(TrainError::ConfigMismatch)?;
        state.rng = ckpt.rng.restore();
        state.epoch = ckpt.epoch;
        Ok(state)
    }

    fn load_parameters(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        if ckpt.params.len() != self.models.store.len() {
            return Err(TrainError::ConfigMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.params.len(),
                self.models.store.len()
            )));
        }
        for (name, value) in &ckpt.params {
            let id = self.models.store.find(name).ok_or_else(|| {
                TrainError::ConfigMismatch(format!("checkpoint parameter `{name}` not in model"))
            })?;
            if self.models.store.value(id).shape() != value.shape() {
                return Err(TrainError::ConfigMismatch(format!(
                    "parameter `{name}` shape differs"
                )));
            }
            *self.models.store.value_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// Rebuilds the networks stored in a checkpoint (evaluation and cleaning).
pub fn restore_models(ckpt: &Checkpoint) -> Result<Models, TrainError> {
    let mut state = TrainState::new(ckpt.config.clone())?;
    state.load_parameters(ckpt)?;
    Ok(state.models)
}

fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}.bin")
}

fn write_epoch_checkpoint(state: &TrainState, out_dir: &Path) -> Result<(), TrainError> {
    let name = checkpoint_name(state.epoch);
    let path = out_dir.join(&name);
    save_checkpoint(&path, &state.checkpoint())?;
    std::fs::write(out_dir.join("latest"), &name).map_err(|source| TrainError::Io {
        path: out_dir.join("latest"),
        source,
    })?;
    Ok(())
}

fn train_epochs(
    state: &mut TrainState,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<(), TrainError> {
    let cfg = state.cfg.clone();
    let mut writer = MetricsWriter::open(&out_dir.join("metrics.csv"))?;
    let started = Instant::now();
    for epoch in state.epoch..cfg.epochs {
        let lr = lr_schedule(&cfg, epoch);
        let stream = make_batches(
            manifest,
            Split::Train,
            cfg.batch_size,
            &cfg.augment,
            cfg.seed,
            epoch as u64,
        )?;
        for (step, batch) in stream.enumerate() {
            let batch = batch?;
            let losses = train_step(state, &batch, lr)?;
            if let Some(component) = losses.first_non_finite() {
                return Err(TrainError::NonFinite {
                    component: component.to_string(),
                    epoch,
                    step,
                });
            }
            let wall_clock_s = if cfg.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            };
            writer.append(&StepMetrics {
                epoch,
                step,
                lr,
                losses,
                wall_clock_s,
            })?;
        }
        state.epoch = epoch + 1;
        write_epoch_checkpoint(state, out_dir)?;
    }
    Ok(())
}

/// Trains from scratch: writes an init checkpoint (`ckpt_epoch_0.bin`), one
/// checkpoint per epoch, a `latest` marker and an append-only `metrics.csv`.
pub fn run_training(
    cfg: TrainConfig,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    cfg.augment
        .validate(manifest.tile_size)
        .map_err(TrainError::Data)?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut state = TrainState::new(cfg)?;
    write_epoch_checkpoint(&state, out_dir)?;
    train_epochs(&mut state, manifest, out_dir)?;
    Ok(state)
}

/// Resumes an interrupted run. In deterministic mode the continued metrics
/// match an uninterrupted reference bit for bit.
pub fn resume(
    checkpoint_path: &Path,
    cfg: TrainConfig,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<TrainState, TrainError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let mut state = TrainState::from_checkpoint(ckpt, cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    train_epochs(&mut state, manifest, out_dir)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_matches_the_multiplication_oracle() {
        let cfg = TrainConfig::for_variant(Variant::Base);
        assert_eq!(lr_schedule(&cfg, 0), 0.001);
        assert!((lr_schedule(&cfg, 1) - 0.0009975).abs() < 1e-12);
        let mut oracle = 0.001;
        for _ in 0..30 {
            oracle *= 0.9975;
        }
        let got = lr_schedule(&cfg, 30);
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.000927).abs() < 1e-6, "≈0.000927, got {got}");
    }

    #[test]
    fn no_aba_forces_a_zero_cycle_weight() {
        let cfg = TrainConfig::for_variant(Variant::NoAba);
        assert_eq!(cfg.weights.lambda_aba, 0.0);
        let mut bad = cfg;
        bad.weights.lambda_aba = 5.0;
        assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn variant_wiring_sets_channel_counts() {
        let cond = TrainConfig::for_variant(Variant::Cond).model_specs();
        assert_eq!(cond.g_ba.in_channels, 10);
        assert_eq!(cond.d_a.in_channels, 10);
        assert!(!cond.attention);

        let ws = TrainConfig::for_variant(Variant::Ws).model_specs();
        assert_eq!(ws.g_ba.in_channels, 4);
        assert_eq!(ws.d_a.in_channels, 3);
        assert!(ws.attention);
        assert!(ws.classifier.is_some());

        let dpa = TrainConfig::for_variant(Variant::Dpa).model_specs();
        assert_eq!(dpa.g_ab.arch, GenArch::AttentionUnet);

        let attn = TrainConfig::for_variant(Variant::Attn).model_specs();
        assert!(attn.attention);
        assert!(attn.classifier.is_none());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("no-aba".parse::<Variant>().unwrap(), Variant::NoAba);
        assert!("bogus".parse::<Variant>().is_err());
    }
}
