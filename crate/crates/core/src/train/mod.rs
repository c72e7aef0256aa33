//! Training: parameter initialisation, patch sampling, the RMSprop-with-
//! momentum optimizer, and the epoch/subepoch loop that ties them together.
//!
//! One epoch = `subepochs_per_epoch` subepochs; one subepoch draws
//! `samples_per_subepoch` patches and consumes them in batches of
//! `batch_size`. The learning rate follows a step-halving schedule. All
//! randomness (sampling, dropout) is derived from the single config seed via
//! per-(epoch, subepoch, batch) stream seeds, so a run is reproducible and a
//! resumed run continues exactly where the original would have gone.

pub mod init;
pub mod optim;
pub mod sampler;

pub use init::{he_init_bank, FanIn};
pub use optim::{lr_at_epoch, rmsprop_step, rmsprop_update, OptimizerState, RmspropHyper};
pub use sampler::{
    sample_subvolumes, MaskSource, SampleWarning, SampledBatch, Sampler, SamplerConfig, SamplingPolicy,
    TrainingSubject,
};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Phase};
use crate::scalar::Scalar;

/// Everything the training loop needs to know, with the defaults the model
/// was designed around. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub subepochs_per_epoch: usize,
    pub samples_per_subepoch: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    /// Epochs between learning-rate halvings once they begin.
    pub lr_halving_period: usize,
    /// First epoch (1-based) whose learning rate is halved.
    pub lr_halving_start_epoch: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            subepochs_per_epoch: 20,
            samples_per_subepoch: 1000,
            batch_size: 5,
            initial_lr: 0.001,
            momentum: 0.6,
            lr_halving_period: 5,
            lr_halving_start_epoch: 10,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-6,
            patch_size: 27,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("subepochs_per_epoch", self.subepochs_per_epoch),
            ("samples_per_subepoch", self.samples_per_subepoch),
            ("batch_size", self.batch_size),
            ("lr_halving_period", self.lr_halving_period),
            ("lr_halving_start_epoch", self.lr_halving_start_epoch),
            ("patch_size", self.patch_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        // A zero learning rate is legal (it makes an epoch a no-op, which is
        // useful for determinism checks); a negative one is not.
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("initial_lr must be finite and >= 0, got {}", self.initial_lr)));
        }
        RmspropHyper::from_config(self).validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubepochRecord {
    pub epoch: usize,
    pub subepoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Per-epoch validation summary (only when a validation set is supplied).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    /// Mean Dice over foreground classes and subjects; absent when no class
    /// was present in any reference.
    pub mean_dsc: Option<f64>,
    pub subjects: usize,
}

/// Callbacks the loop fires as it goes. The epoch-end hook may fail (e.g.
/// checkpoint I/O), which aborts training with that error.
pub trait TrainObserver<T: Scalar> {
    fn on_subepoch(&mut self, _record: &SubepochRecord) {}
    fn on_validation(&mut self, _record: &ValidationRecord) {}
    fn on_warning(&mut self, _warning: &SampleWarning) {}
    fn on_epoch_end(&mut self, _epoch: usize, _net: &NetworkGraph<T>, _state: &OptimizerState<T>) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing (the default for library callers).
pub struct NullObserver;

impl<T: Scalar> TrainObserver<T> for NullObserver {}

/// Policy choices for patch sampling that are not implied by the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingOptions {
    pub policy: SamplingPolicy,
    pub mask: MaskSource,
}

/// Everything `train` produced besides the updated network and state.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<SubepochRecord>,
    pub validations: Vec<ValidationRecord>,
    pub warnings: Vec<SampleWarning>,
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for the (epoch, subepoch, batch) random stream named by
/// `salt`. Position-keyed (not sequential), so resuming from a checkpoint
/// replays exactly the streams a straight run would have used.
fn derive_seed(master: u64, salt: u64, parts: [u64; 3]) -> u64 {
    let mut h = mix(master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for p in parts {
        h = mix(h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15));
    }
    h
}

const SALT_SAMPLER: u64 = 1;
const SALT_DROPOUT: u64 = 2;

/// Run the training loop from `state.epoch + 1` through `config.epochs`.
///
/// The network and optimizer state are updated in place; per-epoch the
/// observer gets a chance to persist both. Determinism: with a fixed config
/// seed and single-threaded execution the full log and final parameters are
/// reproducible bit for bit (multi-threaded runs are too, because every
/// parallel reduction in the engine is order-fixed).
pub fn train<T: Scalar>(
    net: &mut NetworkGraph<T>,
    state: &mut OptimizerState<T>,
    subjects: &[TrainingSubject<T>],
    validation: &[TrainingSubject<T>],
    config: &TrainConfig,
    sampling: SamplingOptions,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if subjects.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one subject".into()));
    }
    let spec = net.spec();
    if config.patch_size < spec.min_input_edge() {
        return Err(Error::InvalidConfig(format!(
            "patch size {} is below the network's minimum input edge {}",
            config.patch_size,
            spec.min_input_edge()
        )));
    }
    let core = config.patch_size - 2 * spec.margin();
    let sampler_config = SamplerConfig {
        policy: sampling.policy,
        mask: sampling.mask,
        patch_size: config.patch_size,
        core_size: core,
        num_classes: spec.num_classes,
    };
    let n_streams = spec.input_streams();
    // Seed is irrelevant here; every subepoch reseeds before drawing.
    let mut sampler = Sampler::new(subjects, sampler_config, 0)?;
    if sampler.num_modalities() != spec.num_modalities {
        return Err(Error::InvalidConfig(format!(
            "subjects carry {} modalities but the network expects {}",
            sampler.num_modalities(),
            spec.num_modalities
        )));
    }
    let hyper = RmspropHyper::from_config(config);
    let mut outcome = TrainOutcome::default();

    for epoch in state.epoch + 1..=config.epochs {
        let lr = lr_at_epoch(config, epoch);
        for subepoch in 1..=config.subepochs_per_epoch {
            let started = Instant::now();
            sampler.reseed(derive_seed(config.seed, SALT_SAMPLER, [epoch as u64, subepoch as u64, 0]));
            let mut remaining = config.samples_per_subepoch;
            let mut batch_index = 0u64;
            let mut loss_sum = 0.0f64;
            while remaining > 0 {
                let take = remaining.min(config.batch_size);
                let batch = sampler.sample(take)?;
                for w in &batch.warnings {
                    observer.on_warning(w);
                    outcome.warnings.push(w.clone());
                }
                let inputs = assemble_streams(&batch, n_streams);
                let dropout_seed =
                    derive_seed(config.seed, SALT_DROPOUT, [epoch as u64, subepoch as u64, batch_index]);
                let (loss, grads) = net.backward(&inputs, &batch.labels, Phase::Train, dropout_seed)?;
                let loss = loss.as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss became non-finite at epoch {epoch} subepoch {subepoch} batch {batch_index}"
                    )));
                }
                rmsprop_step(state, net, &grads, &hyper, lr)?;
                loss_sum += loss * take as f64;
                remaining -= take;
                batch_index += 1;
            }
            let record = SubepochRecord {
                epoch,
                subepoch,
                mean_loss: loss_sum / config.samples_per_subepoch as f64,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            observer.on_subepoch(&record);
            outcome.records.push(record);
        }
        state.epoch = epoch;
        state.lr = lr;

        if !validation.is_empty() {
            let record = validate_epoch(net, validation, epoch)?;
            observer.on_validation(&record);
            outcome.validations.push(record);
        }
        observer.on_epoch_end(epoch, net, state)?;
    }
    Ok(outcome)
}

/// Turn a sampled batch (one tensor per modality) into per-stream network
/// inputs. Every fusion mode feeds each modality to its own stream except
/// early fusion, which concatenates all modalities into stream 1.
fn assemble_streams<T: Scalar>(batch: &SampledBatch<T>, n_streams: usize) -> Vec<crate::tensor::VolumeTensor<T>> {
    if n_streams == 1 && batch.inputs.len() > 1 {
        let refs: Vec<&crate::tensor::VolumeTensor<T>> = batch.inputs.iter().collect();
        vec![crate::tensor::concat_channels(&refs).expect("sampled modalities share a shape")]
    } else {
        batch.inputs.clone()
    }
}

/// Segment every validation subject and average foreground Dice.
fn validate_epoch<T: Scalar>(
    net: &NetworkGraph<T>,
    validation: &[TrainingSubject<T>],
    epoch: usize,
) -> Result<ValidationRecord> {
    let mut sum = 0.0;
    let mut defined = 0usize;
    for subject in validation {
        let seg = crate::infer::segment_volume(net, &subject.modalities)?;
        for class in 1..net.spec().num_classes as u8 {
            let in_ref = subject.labels.data.iter().any(|&v| v == class);
            let in_auto = seg.labels.data.iter().any(|&v| v == class);
            if !in_ref && !in_auto {
                continue;
            }
            let reference = crate::metrics::BinaryMask::from_labels(&subject.labels, class);
            let automatic = crate::metrics::BinaryMask::from_labels(&seg.labels, class);
            sum += crate::metrics::dsc(&reference, &automatic)?;
            defined += 1;
        }
    }
    Ok(ValidationRecord {
        epoch,
        mean_dsc: if defined == 0 { None } else { Some(sum / defined as f64) },
        subjects: validation.len(),
    })
}
