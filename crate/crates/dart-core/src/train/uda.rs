//! Step 1: pretrain the non-robust teacher. Labeled source batches drive a
//! cross-entropy term; paired unlabeled target batches drive the
//! domain-classification loss, whose encoder gradient arrives through the
//! gradient-reversal coupling so one backward pass realizes the minimax.

use crate::data::{paired_epoch_batches, TrainView};
use crate::hashing::fnv1a64;
use crate::model::{Model, ModelGrads, Provenance, Sgd, SgdConfig};
use crate::tensor::{cross_entropy, softmax};
use crate::train::{domain_loss, fraction_correct, grl_warmup, TrainError, TrainResult};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherVariant {
    /// Marginal alignment: the discriminator reads raw features.
    Dann,
    /// Conditional alignment: the discriminator reads feature-probability
    /// outer products.
    Cdan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub grl_lambda: f64,
    pub variant: TeacherVariant,
    pub seed: u64,
    /// When set, the frozen teacher is written here as a checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            optimizer: SgdConfig::default(),
            grl_lambda: 1.0,
            variant: TeacherVariant::Dann,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl Step1Config {
    /// Stable fingerprint of the settings, recorded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step1EpochStats {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_da: f64,
    pub source_accuracy: f64,
    /// Reporting only; filled by the caller's eval hook, never by training.
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Step1Trace {
    pub epochs: Vec<Step1EpochStats>,
}

/// Trains the teacher on `view` and returns it frozen. `eval_hook`, when
/// given, is called after each epoch to produce the trace's eval-only clean
/// target accuracy; it receives the model read-only.
pub fn train_step1(
    view: TrainView<'_>,
    mut model: Model,
    cfg: &Step1Config,
    eval_hook: Option<&dyn Fn(&Model) -> f64>,
) -> TrainResult<(Model, Step1Trace)> {
    if model.is_frozen() {
        return Err(TrainError::Contract {
            reason: "train_step1 needs an unfrozen model".into(),
        });
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(TrainError::Contract {
            reason: "epochs and batch_size must be at least 1".into(),
        });
    }
    if model.input_dim() != view.source_features().cols() {
        return Err(TrainError::Contract {
            reason: format!(
                "model expects input dim {}, dataset has {}",
                model.input_dim(),
                view.source_features().cols()
            ),
        });
    }
    if model.class_count() != view.class_count() {
        return Err(TrainError::Contract {
            reason: format!(
                "model has {} classes, dataset has {}",
                model.class_count(),
                view.class_count()
            ),
        });
    }
    let expect_conditional = cfg.variant == TeacherVariant::Cdan;
    if model.conditional() != expect_conditional {
        return Err(TrainError::Contract {
            reason: format!(
                "config variant {:?} does not match the model (conditional={})",
                cfg.variant,
                model.conditional()
            ),
        });
    }

    let mut opt = Sgd::new(cfg.optimizer);
    let mut trace = Step1Trace::default();
    let n_source = view.source_features().rows();
    let n_target = view.target_features().rows();

    for epoch in 0..cfg.epochs {
        let batches =
            paired_epoch_batches(n_source, n_target, cfg.batch_size, cfg.seed, epoch as u64);
        let lambda = cfg.grl_lambda * grl_warmup(epoch, cfg.epochs);
        let mut cls_sum = 0.0;
        let mut da_sum = 0.0;
        for (batch_idx, (src_idx, tgt_idx)) in batches.iter().enumerate() {
            let xs = view.source_features().select_rows(src_idx);
            let ys: Vec<usize> = src_idx.iter().map(|&i| view.source_labels()[i]).collect();
            let xt = view.target_features().select_rows(tgt_idx);

            let (fs, enc_cache_s) = model.encoder().forward_cached(&xs)?;
            let (logits_s, cls_cache) = model.classifier().forward_cached(&fs)?;
            let (l_cls, ce_grad) = cross_entropy(&logits_s, &ys)?;

            let (ft, enc_cache_t) = model.encoder().forward_cached(&xt)?;
            let probs_s = softmax(&logits_s)?;
            let probs_t = softmax(&model.classifier().forward(&ft)?)?;

            let parts = domain_loss(&model, &fs, &probs_s, &ft, &probs_t, lambda)?;
            if !l_cls.is_finite() || !parts.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    stage: "step1",
                    epoch,
                    batch: batch_idx,
                    learning_rate: cfg.optimizer.learning_rate,
                });
            }

            let (grad_fs_ce, cls_grads) = model.classifier().backward(&ce_grad, &cls_cache)?;
            let grad_fs = grad_fs_ce.add(&parts.grad_source_features)?;
            let (_, enc_grads_s) = model.encoder().backward(&grad_fs, &enc_cache_s)?;
            let (_, enc_grads_t) = model
                .encoder()
                .backward(&parts.grad_target_features, &enc_cache_t)?;

            let mut grads = ModelGrads::zeros_like(&model);
            grads.encoder.add_assign(&enc_grads_s)?;
            grads.encoder.add_assign(&enc_grads_t)?;
            grads.classifier.add_assign(&cls_grads)?;
            grads.discriminator.add_assign(&parts.disc_grads)?;
            model.apply_update(&grads, &mut opt)?;

            cls_sum += l_cls;
            da_sum += parts.loss;
        }

        let pred = model.predict(view.source_features())?;
        let source_accuracy = fraction_correct(&pred.pseudo_labels, view.source_labels());
        trace.epochs.push(Step1EpochStats {
            epoch,
            l_cls: cls_sum / batches.len() as f64,
            l_da: da_sum / batches.len() as f64,
            source_accuracy,
            target_accuracy: eval_hook.map(|hook| hook(&model)),
        });
    }

    model.freeze();
    if let Some(path) = &cfg.checkpoint {
        let provenance = Provenance {
            config_hash: cfg.fingerprint(),
            seed: cfg.seed,
            step: "pretrain".into(),
            toolkit_version: crate::TOOLKIT_VERSION.into(),
        };
        model.save_checkpoint(path, &provenance)?;
    }
    Ok((model, trace))
}
