//! Step 2: robustify a student cloned from the frozen teacher, without ever
//! touching source data. The student learns from the teacher's clean-sample
//! behavior twice over: an entropy-weighted KL pulls its adversarial
//! predictions toward the teacher's clean ones, and a feature MSE plus a
//! second KL keep its clean behavior anchored. The entangled AT and Trades
//! baselines live here too, for comparison runs.

use crate::attack::{perturb, AttackConfig};
use crate::data::{epoch_batches, paired_epoch_batches, TargetView, TrainView};
use crate::hashing::derive_seed;
use crate::model::{Model, ModelGrads, Sgd, SgdConfig};
use crate::tensor::{cross_entropy, kl_divergence, mse, softmax, Tensor};
use crate::train::{domain_loss, grl_warmup, TrainError, TrainResult};
use serde::{Deserialize, Serialize};

/// Which model the training-time attack differentiates through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    /// Attack the model being trained (standard adversarial training).
    Student,
    /// Attack the frozen teacher; training-time adversarials become static.
    Teacher,
}

/// When pseudo-labels are recomputed. The teacher is frozen, so both
/// settings produce identical labels; `PerEpoch` exists to prove that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelPolicy {
    Once,
    PerEpoch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Distillation temperature for both KL terms.
    pub temperature: f64,
    /// Training-time attack; its seed field is re-derived per batch.
    pub attack: AttackConfig,
    pub attack_target: AttackTarget,
    pub pseudo_labels: PseudoLabelPolicy,
    /// Scale on the clean feature MSE term.
    pub mse_weight: f64,
    /// Domain-alignment strength for the AT and Trades baselines; unused by
    /// the distillation path, which never sees source data.
    pub grl_lambda: f64,
    pub seed: u64,
}

impl Default for Step2Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: SgdConfig::default(),
            temperature: 2.0,
            attack: AttackConfig::ifgsm(0.1, 0.05, 10),
            attack_target: AttackTarget::Student,
            pseudo_labels: PseudoLabelPolicy::Once,
            mse_weight: 1.0,
            grl_lambda: 1.0,
            seed: 0,
        }
    }
}

impl Step2Config {
    /// Stable fingerprint of the settings, recorded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data serializes");
        format!("{:016x}", crate::hashing::fnv1a64(json.as_bytes()))
    }

    fn validate(&self) -> TrainResult<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Contract {
                reason: "epochs and batch_size must be at least 1".into(),
            });
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::Contract {
                reason: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        if !(self.mse_weight >= 0.0) {
            return Err(TrainError::Contract {
                reason: format!("mse_weight must be nonnegative, got {}", self.mse_weight),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step2EpochStats {
    pub epoch: usize,
    /// Entropy-weighted KL from teacher-on-clean to student-on-adversarial.
    pub l_adv_kl: f64,
    /// Weighted clean feature MSE.
    pub l_clean_mse: f64,
    /// Entropy-weighted KL from teacher-on-clean to student-on-clean.
    pub l_clean_kl: f64,
    pub target_clean_accuracy: Option<f64>,
    pub target_adv_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Step2Trace {
    pub epochs: Vec<Step2EpochStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineEpochStats {
    pub epoch: usize,
    pub l_ce_clean: f64,
    pub l_ce_adv: f64,
    pub l_da_clean: f64,
    /// Zero for Trades, which aligns clean pairs only.
    pub l_da_adv: f64,
    /// Zero for AT, which has no consistency term.
    pub l_kl: f64,
    pub target_clean_accuracy: Option<f64>,
    pub target_adv_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub epochs: Vec<BaselineEpochStats>,
}

/// Per-epoch eval hook for Step 2 runners: returns eval-only
/// (clean accuracy, adversarial accuracy) on the target domain.
pub type EvalHook<'a> = &'a dyn Fn(&Model) -> (f64, f64);

/// Teacher argmax labels and normalized prediction entropies on clean
/// target samples. The teacher must be frozen.
pub fn compute_pseudo_labels(
    teacher: &Model,
    target_features: &Tensor,
) -> TrainResult<(Vec<usize>, Tensor)> {
    if !teacher.is_frozen() {
        return Err(TrainError::Contract {
            reason: "pseudo-labels come from a frozen teacher".into(),
        });
    }
    let pred = teacher.predict(target_features)?;
    Ok((pred.pseudo_labels, pred.entropy))
}

/// Distillation weights `1 - H`, clamped into [0, 1] against rounding.
pub fn weights_from_entropy(entropy: &Tensor) -> Tensor {
    entropy.map(|h| (1.0 - h).clamp(0.0, 1.0))
}

/// Losses and gradients of one distillation batch; no update is applied.
#[derive(Debug)]
pub struct DartBatchOutput {
    pub l_adv_kl: f64,
    pub l_clean_mse: f64,
    pub l_clean_kl: f64,
    pub grads: ModelGrads,
}

/// One batch of the distillation objective. `labels` and `weights` are the
/// batch rows of the pseudo-labels and entropy weights; `attack_seed`
/// seeds any randomized attack start.
#[allow(clippy::too_many_arguments)]
pub fn dart_batch(
    teacher: &Model,
    student: &Model,
    clean: &Tensor,
    labels: &[usize],
    weights: &Tensor,
    cfg: &Step2Config,
    bounds: &[(f64, f64)],
    attack_seed: u64,
) -> TrainResult<DartBatchOutput> {
    if teacher.feature_dim() != student.feature_dim() {
        return Err(TrainError::Contract {
            reason: format!(
                "teacher feature dim {} differs from student {}",
                teacher.feature_dim(),
                student.feature_dim()
            ),
        });
    }
    let teacher_pred = teacher.predict(clean)?;

    let mut attack = cfg.attack;
    attack.seed = attack_seed;
    let attacked: &Model = match cfg.attack_target {
        AttackTarget::Student => student,
        AttackTarget::Teacher => teacher,
    };
    let adv = perturb(attacked, clean, labels, &attack, bounds)?;

    // Adversarial branch: student chases the teacher's clean predictions.
    let (f_adv, enc_cache_adv) = student.encoder().forward_cached(&adv)?;
    let (logits_adv, cls_cache_adv) = student.classifier().forward_cached(&f_adv)?;
    let (l_adv_kl, g_adv_logits) =
        kl_divergence(&teacher_pred.logits, &logits_adv, cfg.temperature, weights)?;
    let (g_f_adv, cls_grads_adv) = student.classifier().backward(&g_adv_logits, &cls_cache_adv)?;
    let (_, enc_grads_adv) = student.encoder().backward(&g_f_adv, &enc_cache_adv)?;

    // Clean branch: features anchored by MSE, predictions by a second KL.
    let (f_clean, enc_cache_clean) = student.encoder().forward_cached(clean)?;
    let (logits_clean, cls_cache_clean) = student.classifier().forward_cached(&f_clean)?;
    let (raw_mse, g_mse_raw) = mse(&teacher_pred.features, &f_clean)?;
    let l_clean_mse = cfg.mse_weight * raw_mse;
    let g_mse = g_mse_raw.scale(cfg.mse_weight);
    let (l_clean_kl, g_clean_logits) =
        kl_divergence(&teacher_pred.logits, &logits_clean, cfg.temperature, weights)?;
    let (g_f_kl, cls_grads_clean) = student
        .classifier()
        .backward(&g_clean_logits, &cls_cache_clean)?;
    let g_f_clean = g_f_kl.add(&g_mse)?;
    let (_, enc_grads_clean) = student.encoder().backward(&g_f_clean, &enc_cache_clean)?;

    let mut grads = ModelGrads::zeros_like(student);
    grads.encoder.add_assign(&enc_grads_adv)?;
    grads.encoder.add_assign(&enc_grads_clean)?;
    grads.classifier.add_assign(&cls_grads_adv)?;
    grads.classifier.add_assign(&cls_grads_clean)?;

    Ok(DartBatchOutput {
        l_adv_kl,
        l_clean_mse,
        l_clean_kl,
        grads,
    })
}

/// One distillation epoch over the target view; returns the epoch-mean loss
/// components. `labels` and `weights` cover the full target set.
pub fn dart_epoch(
    teacher: &Model,
    student: &mut Model,
    view: TargetView<'_>,
    cfg: &Step2Config,
    opt: &mut Sgd,
    epoch: usize,
    labels: &[usize],
    weights: &Tensor,
) -> TrainResult<(f64, f64, f64)> {
    let n = view.target_features().rows();
    let batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch as u64);
    let mut sums = (0.0, 0.0, 0.0);
    for (batch_idx, idx) in batches.iter().enumerate() {
        let clean = view.target_features().select_rows(idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch_weights = weights.select_rows(idx);
        let attack_seed = derive_seed(cfg.seed, "step2-attack", (epoch * 1_000_000 + batch_idx) as u64);
        let out = dart_batch(
            teacher,
            student,
            &clean,
            &batch_labels,
            &batch_weights,
            cfg,
            view.feature_bounds(),
            attack_seed,
        )?;
        if ![out.l_adv_kl, out.l_clean_mse, out.l_clean_kl]
            .iter()
            .all(|l| l.is_finite())
        {
            return Err(TrainError::NonFinite {
                stage: "step2-dart",
                epoch,
                batch: batch_idx,
                learning_rate: cfg.optimizer.learning_rate,
            });
        }
        student.apply_update(&out.grads, opt)?;
        sums.0 += out.l_adv_kl;
        sums.1 += out.l_clean_mse;
        sums.2 += out.l_clean_kl;
    }
    let k = batches.len() as f64;
    Ok((sums.0 / k, sums.1 / k, sums.2 / k))
}

/// Full distillation run: clones a student from the frozen teacher and
/// trains it on target data alone.
pub fn run_dart(
    teacher: &Model,
    view: TargetView<'_>,
    cfg: &Step2Config,
    eval_hook: Option<EvalHook<'_>>,
) -> TrainResult<(Model, Step2Trace)> {
    cfg.validate()?;
    teacher.verify_frozen().map_err(|e| TrainError::Contract {
        reason: format!("run_dart needs a frozen teacher: {e}"),
    })?;
    let mut student = teacher.clone_into_student();
    let mut opt = Sgd::new(cfg.optimizer);
    let mut trace = Step2Trace::default();

    let (mut labels, mut entropy) = compute_pseudo_labels(teacher, view.target_features())?;
    let mut weights = weights_from_entropy(&entropy);
    for epoch in 0..cfg.epochs {
        if cfg.pseudo_labels == PseudoLabelPolicy::PerEpoch && epoch > 0 {
            (labels, entropy) = compute_pseudo_labels(teacher, view.target_features())?;
            weights = weights_from_entropy(&entropy);
        }
        let (l_adv_kl, l_clean_mse, l_clean_kl) = dart_epoch(
            teacher,
            &mut student,
            view,
            cfg,
            &mut opt,
            epoch,
            &labels,
            &weights,
        )?;
        let acc = eval_hook.map(|hook| hook(&student));
        trace.epochs.push(Step2EpochStats {
            epoch,
            l_adv_kl,
            l_clean_mse,
            l_clean_kl,
            target_clean_accuracy: acc.map(|a| a.0),
            target_adv_accuracy: acc.map(|a| a.1),
        });
    }
    Ok((student, trace))
}

struct BaselineBatchLosses {
    ce_clean: f64,
    ce_adv: f64,
    da_clean: f64,
    da_adv: f64,
    kl: f64,
}

fn baseline_batch(
    model: &Model,
    xs: &Tensor,
    ys: &[usize],
    xt: &Tensor,
    cfg: &Step2Config,
    lambda: f64,
    bounds: &[(f64, f64)],
    attack_seed: u64,
    with_adv_alignment: bool,
) -> TrainResult<(BaselineBatchLosses, ModelGrads)> {
    let mut attack = cfg.attack;
    attack.seed = derive_seed(attack_seed, "source", 0);
    let xs_adv = perturb(model, xs, ys, &attack, bounds)?;
    let yt = model.predict(xt)?.pseudo_labels;
    attack.seed = derive_seed(attack_seed, "target", 0);
    let xt_adv = perturb(model, xt, &yt, &attack, bounds)?;

    let mut grads = ModelGrads::zeros_like(model);

    // Clean source: supervised CE plus its half of the clean alignment.
    let (fs, ec_s) = model.encoder().forward_cached(xs)?;
    let (lg_s, cc_s) = model.classifier().forward_cached(&fs)?;
    let (ce_clean, g_ce) = cross_entropy(&lg_s, ys)?;
    let ps = softmax(&lg_s)?;

    // Adversarial source: supervised CE on the perturbed batch.
    let (fs_a, ec_sa) = model.encoder().forward_cached(&xs_adv)?;
    let (lg_sa, cc_sa) = model.classifier().forward_cached(&fs_a)?;
    let (ce_adv, g_ce_a) = cross_entropy(&lg_sa, ys)?;
    let ps_a = softmax(&lg_sa)?;

    // Clean and adversarial target forward passes.
    let (ft, ec_t) = model.encoder().forward_cached(xt)?;
    let pt = softmax(&model.classifier().forward(&ft)?)?;
    let (ft_a, ec_ta) = model.encoder().forward_cached(&xt_adv)?;
    let (lg_ta, cc_ta) = model.classifier().forward_cached(&ft_a)?;
    let pt_a = softmax(&lg_ta)?;

    let parts_clean = domain_loss(model, &fs, &ps, &ft, &pt, lambda)?;
    grads.discriminator.add_assign(&parts_clean.disc_grads)?;

    let (da_adv, kl, g_ft_a) = if with_adv_alignment {
        let parts_adv = domain_loss(model, &fs_a, &ps_a, &ft_a, &pt_a, lambda)?;
        grads.discriminator.add_assign(&parts_adv.disc_grads)?;

        let (g_fs_a, cls_g) = model.classifier().backward(&g_ce_a, &cc_sa)?;
        grads.classifier.add_assign(&cls_g)?;
        let g_fs_a = g_fs_a.add(&parts_adv.grad_source_features)?;
        let (_, enc_g) = model.encoder().backward(&g_fs_a, &ec_sa)?;
        grads.encoder.add_assign(&enc_g)?;

        (parts_adv.loss, 0.0, parts_adv.grad_target_features)
    } else {
        // Trades: consistency KL from clean-target predictions (held
        // constant) to adversarial-target predictions, unit temperature,
        // uniform weights.
        let lg_t = model.classifier().forward(&ft)?;
        let ones = Tensor::filled(xt.rows(), 1, 1.0);
        let (kl, g_kl) = kl_divergence(&lg_t, &lg_ta, 1.0, &ones)?;

        let (g_fs_a, cls_g) = model.classifier().backward(&g_ce_a, &cc_sa)?;
        grads.classifier.add_assign(&cls_g)?;
        let (_, enc_g) = model.encoder().backward(&g_fs_a, &ec_sa)?;
        grads.encoder.add_assign(&enc_g)?;

        let (g_ft_a, cls_g_kl) = model.classifier().backward(&g_kl, &cc_ta)?;
        grads.classifier.add_assign(&cls_g_kl)?;
        (0.0, kl, g_ft_a)
    };

    // Clean source CE + clean alignment into the encoder.
    let (g_fs, cls_g) = model.classifier().backward(&g_ce, &cc_s)?;
    grads.classifier.add_assign(&cls_g)?;
    let g_fs = g_fs.add(&parts_clean.grad_source_features)?;
    let (_, enc_g) = model.encoder().backward(&g_fs, &ec_s)?;
    grads.encoder.add_assign(&enc_g)?;

    // Clean target alignment into the encoder.
    let (_, enc_g) = model
        .encoder()
        .backward(&parts_clean.grad_target_features, &ec_t)?;
    grads.encoder.add_assign(&enc_g)?;

    // Adversarial target gradient (alignment for AT, consistency for Trades).
    let (_, enc_g) = model.encoder().backward(&g_ft_a, &ec_ta)?;
    grads.encoder.add_assign(&enc_g)?;

    Ok((
        BaselineBatchLosses {
            ce_clean,
            ce_adv,
            da_clean: parts_clean.loss,
            da_adv,
            kl,
        },
        grads,
    ))
}

fn baseline_epoch(
    model: &mut Model,
    view: TrainView<'_>,
    cfg: &Step2Config,
    opt: &mut Sgd,
    epoch: usize,
    with_adv_alignment: bool,
    stage: &'static str,
) -> TrainResult<BaselineEpochStats> {
    let n_s = view.source_features().rows();
    let n_t = view.target_features().rows();
    let batches = paired_epoch_batches(n_s, n_t, cfg.batch_size, cfg.seed, epoch as u64);
    let lambda = cfg.grl_lambda * grl_warmup(epoch, cfg.epochs);
    let mut sums = BaselineBatchLosses {
        ce_clean: 0.0,
        ce_adv: 0.0,
        da_clean: 0.0,
        da_adv: 0.0,
        kl: 0.0,
    };
    for (batch_idx, (src_idx, tgt_idx)) in batches.iter().enumerate() {
        let xs = view.source_features().select_rows(src_idx);
        let ys: Vec<usize> = src_idx.iter().map(|&i| view.source_labels()[i]).collect();
        let xt = view.target_features().select_rows(tgt_idx);
        let attack_seed = derive_seed(cfg.seed, stage, (epoch * 1_000_000 + batch_idx) as u64);
        let (losses, grads) = baseline_batch(
            model,
            &xs,
            &ys,
            &xt,
            cfg,
            lambda,
            view.feature_bounds(),
            attack_seed,
            with_adv_alignment,
        )?;
        if ![losses.ce_clean, losses.ce_adv, losses.da_clean, losses.da_adv, losses.kl]
            .iter()
            .all(|l| l.is_finite())
        {
            return Err(TrainError::NonFinite {
                stage,
                epoch,
                batch: batch_idx,
                learning_rate: cfg.optimizer.learning_rate,
            });
        }
        model.apply_update(&grads, opt)?;
        sums.ce_clean += losses.ce_clean;
        sums.ce_adv += losses.ce_adv;
        sums.da_clean += losses.da_clean;
        sums.da_adv += losses.da_adv;
        sums.kl += losses.kl;
    }
    let k = batches.len() as f64;
    Ok(BaselineEpochStats {
        epoch,
        l_ce_clean: sums.ce_clean / k,
        l_ce_adv: sums.ce_adv / k,
        l_da_clean: sums.da_clean / k,
        l_da_adv: sums.da_adv / k,
        l_kl: sums.kl / k,
        target_clean_accuracy: None,
        target_adv_accuracy: None,
    })
}

/// One epoch of the entangled adversarial-training baseline: supervised CE
/// on clean and adversarial source, domain alignment on the clean pair and
/// on the adversarial pair, all through one shared discriminator.
pub fn at_epoch(
    model: &mut Model,
    view: TrainView<'_>,
    cfg: &Step2Config,
    opt: &mut Sgd,
    epoch: usize,
) -> TrainResult<BaselineEpochStats> {
    baseline_epoch(model, view, cfg, opt, epoch, true, "step2-at")
}

/// One epoch of the Trades-style baseline: supervised CE on clean and
/// adversarial source, a clean-to-adversarial consistency KL on target, and
/// clean-pair domain alignment.
pub fn trades_epoch(
    model: &mut Model,
    view: TrainView<'_>,
    cfg: &Step2Config,
    opt: &mut Sgd,
    epoch: usize,
) -> TrainResult<BaselineEpochStats> {
    baseline_epoch(model, view, cfg, opt, epoch, false, "step2-trades")
}

fn run_baseline(
    init: &Model,
    view: TrainView<'_>,
    cfg: &Step2Config,
    eval_hook: Option<EvalHook<'_>>,
    with_adv_alignment: bool,
) -> TrainResult<(Model, BaselineTrace)> {
    cfg.validate()?;
    if init.is_frozen() {
        return Err(TrainError::Contract {
            reason: "baselines train a single fresh model; a frozen start suggests a teacher \
                     was passed by mistake"
                .into(),
        });
    }
    let mut model = init.clone_into_student();
    let mut opt = Sgd::new(cfg.optimizer);
    let mut trace = BaselineTrace::default();
    for epoch in 0..cfg.epochs {
        let stage = if with_adv_alignment {
            "step2-at"
        } else {
            "step2-trades"
        };
        let mut stats = baseline_epoch(&mut model, view, cfg, &mut opt, epoch, with_adv_alignment, stage)?;
        if let Some(hook) = eval_hook {
            let (clean, adv) = hook(&model);
            stats.target_clean_accuracy = Some(clean);
            stats.target_adv_accuracy = Some(adv);
        }
        trace.epochs.push(stats);
    }
    Ok((model, trace))
}

/// Full AT-baseline run: one fresh model trained jointly on supervised,
/// adversarial, and alignment losses from scratch. No teacher is involved.
pub fn run_at(
    init: &Model,
    view: TrainView<'_>,
    cfg: &Step2Config,
    eval_hook: Option<EvalHook<'_>>,
) -> TrainResult<(Model, BaselineTrace)> {
    run_baseline(init, view, cfg, eval_hook, true)
}

/// Full Trades-baseline run: one fresh model trained jointly from scratch,
/// with the smoothness penalty replacing adversarial alignment.
pub fn run_trades(
    init: &Model,
    view: TrainView<'_>,
    cfg: &Step2Config,
    eval_hook: Option<EvalHook<'_>>,
) -> TrainResult<(Model, BaselineTrace)> {
    run_baseline(init, view, cfg, eval_hook, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons_rotate;
    use crate::model::{Layer, Mlp, ModelConfig};
    use crate::train::uda::{train_step1, Step1Config};

    fn fresh_model(ds: &crate::data::DomainDataset, seed: u64) -> Model {
        Model::new(&ModelConfig {
            input_dim: ds.feature_dim(),
            class_count: 2,
            hidden: vec![16, 8],
            disc_hidden: 8,
            conditional: false,
            seed,
        })
        .unwrap()
    }

    fn quick_teacher(seed: u64) -> (crate::data::DomainDataset, Model) {
        let ds = two_moons_rotate(64, 64, 0.1, 30.0, seed).unwrap();
        let model = fresh_model(&ds, seed);
        let cfg = Step1Config {
            epochs: 5,
            batch_size: 32,
            seed,
            ..Default::default()
        };
        let (teacher, _) = train_step1(ds.train_view(), model, &cfg, None).unwrap();
        (ds, teacher)
    }

    fn quick_cfg(seed: u64) -> Step2Config {
        Step2Config {
            epochs: 3,
            batch_size: 32,
            attack: AttackConfig::ifgsm(0.1, 0.05, 3),
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn pseudo_labels_match_recomputation_and_need_frozen_teacher() {
        let (ds, teacher) = quick_teacher(1);
        let (labels, entropy) = compute_pseudo_labels(&teacher, ds.target_features()).unwrap();
        let pred = teacher.predict(ds.target_features()).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let row = pred.probs.row(i);
            let manual = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(l, manual);
        }
        assert_eq!(entropy.shape(), (ds.n_target(), 1));

        let unfrozen = teacher.clone_into_student();
        assert!(matches!(
            compute_pseudo_labels(&unfrozen, ds.target_features()).unwrap_err(),
            TrainError::Contract { .. }
        ));
    }

    #[test]
    fn uniform_teacher_zeroes_all_distillation_weights() {
        // Classifier with zero weights emits identical logits, so entropy
        // is maximal everywhere.
        let encoder = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(1, 2),
        }]);
        let classifier = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::zeros(2, 2),
            bias: Tensor::zeros(1, 2),
        }]);
        let disc = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::zeros(2, 1),
            bias: Tensor::zeros(1, 1),
        }]);
        let mut teacher = Model::from_parts(encoder, classifier, disc, false, 2, 2);
        teacher.freeze();
        let x = Tensor::from_rows(&[[0.5, -0.25], [1.0, 2.0]]).unwrap();
        let (_, entropy) = compute_pseudo_labels(&teacher, &x).unwrap();
        let weights = weights_from_entropy(&entropy);
        assert!(weights.max_abs() <= 1e-12);
    }

    #[test]
    fn clone_and_zero_epsilon_is_an_exact_fixed_point() {
        let (ds, teacher) = quick_teacher(2);
        let student = teacher.clone_into_student();
        let mut cfg = quick_cfg(2);
        cfg.attack.epsilon = 0.0;
        let (labels, entropy) = compute_pseudo_labels(&teacher, ds.target_features()).unwrap();
        let weights = weights_from_entropy(&entropy);
        let out = dart_batch(
            &teacher,
            &student,
            ds.target_features(),
            &labels,
            &weights,
            &cfg,
            ds.feature_bounds(),
            7,
        )
        .unwrap();
        assert!(out.l_adv_kl.abs() <= 1e-10);
        assert!(out.l_clean_mse.abs() <= 1e-10);
        assert!(out.l_clean_kl.abs() <= 1e-10);
        assert!(out.grads.max_abs() <= 1e-10);
    }

    #[test]
    fn teacher_untouched_and_student_learns() {
        let (ds, teacher) = quick_teacher(3);
        let checksum = teacher.param_checksum();
        let cfg = quick_cfg(3);
        let (student, trace) = run_dart(&teacher, ds.target_view(), &cfg, None).unwrap();
        assert_eq!(teacher.param_checksum(), checksum);
        teacher.verify_frozen().unwrap();
        assert_ne!(student.param_checksum(), checksum);
        assert_eq!(trace.epochs.len(), 3);
        for row in &trace.epochs {
            assert!(row.l_adv_kl >= -1e-12);
            assert!(row.l_clean_mse >= -1e-12);
            assert!(row.l_clean_kl >= -1e-12);
        }
    }

    #[test]
    fn run_dart_rejects_unfrozen_teacher() {
        let (ds, teacher) = quick_teacher(4);
        let unfrozen = teacher.clone_into_student();
        assert!(matches!(
            run_dart(&unfrozen, ds.target_view(), &quick_cfg(4), None).unwrap_err(),
            TrainError::Contract { .. }
        ));
    }

    #[test]
    fn pseudo_label_policies_agree_exactly() {
        let (ds, teacher) = quick_teacher(5);
        let mut cfg = quick_cfg(5);
        cfg.pseudo_labels = PseudoLabelPolicy::Once;
        let (a, _) = run_dart(&teacher, ds.target_view(), &cfg, None).unwrap();
        cfg.pseudo_labels = PseudoLabelPolicy::PerEpoch;
        let (b, _) = run_dart(&teacher, ds.target_view(), &cfg, None).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
    }

    #[test]
    fn dart_runs_are_deterministic_and_attack_target_matters() {
        let (ds, teacher) = quick_teacher(6);
        let mut cfg = quick_cfg(6);
        cfg.epochs = 8;
        cfg.optimizer.learning_rate = 0.1;
        let (a, _) = run_dart(&teacher, ds.target_view(), &cfg, None).unwrap();
        let (b, _) = run_dart(&teacher, ds.target_view(), &cfg, None).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());

        // Once the student has drifted, attacking it no longer produces the
        // teacher's static adversarials.
        let (labels, entropy) = compute_pseudo_labels(&teacher, ds.target_features()).unwrap();
        let weights = weights_from_entropy(&entropy);
        let mut on_student = cfg.clone();
        on_student.attack_target = AttackTarget::Student;
        let mut on_teacher = cfg.clone();
        on_teacher.attack_target = AttackTarget::Teacher;
        let gs = dart_batch(
            &teacher, &a, ds.target_features(), &labels, &weights,
            &on_student, ds.feature_bounds(), 5,
        )
        .unwrap();
        let gt = dart_batch(
            &teacher, &a, ds.target_features(), &labels, &weights,
            &on_teacher, ds.feature_bounds(), 5,
        )
        .unwrap();
        assert!(gs.l_adv_kl != gt.l_adv_kl || gs.grads.max_abs() != gt.grads.max_abs());
    }

    #[test]
    fn mse_weight_zero_drops_the_term() {
        let (ds, teacher) = quick_teacher(7);
        // Drift the student off the clone point first so the MSE gradient
        // is nonzero where it exists.
        let mut cfg = quick_cfg(7);
        cfg.epochs = 1;
        let (student, _) = run_dart(&teacher, ds.target_view(), &cfg, None).unwrap();

        let (labels, entropy) = compute_pseudo_labels(&teacher, ds.target_features()).unwrap();
        let weights = weights_from_entropy(&entropy);
        let mut with = quick_cfg(7);
        with.mse_weight = 1.0;
        let mut without = quick_cfg(7);
        without.mse_weight = 0.0;
        let out_with = dart_batch(
            &teacher,
            &student,
            ds.target_features(),
            &labels,
            &weights,
            &with,
            ds.feature_bounds(),
            3,
        )
        .unwrap();
        let out_without = dart_batch(
            &teacher,
            &student,
            ds.target_features(),
            &labels,
            &weights,
            &without,
            ds.feature_bounds(),
            3,
        )
        .unwrap();
        assert_eq!(out_without.l_clean_mse, 0.0);
        assert!(out_with.l_clean_mse > 0.0);
        assert_eq!(out_with.l_adv_kl, out_without.l_adv_kl);
        // Encoder gradients differ once the MSE term is present.
        let mut diff: f64 = 0.0;
        for (a, b) in out_with.grads.encoder.0.iter().zip(&out_without.grads.encoder.0) {
            if let (Some((wa, _)), Some((wb, _))) = (a, b) {
                for (x, y) in wa.data().iter().zip(wb.data()) {
                    diff = diff.max((x - y).abs());
                }
            }
        }
        assert!(diff > 0.0);
    }

    #[test]
    fn at_with_zero_epsilon_doubles_cleanly() {
        let (ds, teacher) = quick_teacher(8);
        let mut cfg = quick_cfg(8);
        cfg.attack.epsilon = 0.0;
        cfg.epochs = 1;
        let mut model = teacher.clone_into_student();
        let mut opt = Sgd::new(cfg.optimizer);
        let stats = at_epoch(&mut model, ds.train_view(), &cfg, &mut opt, 0).unwrap();
        // Adversarial batches equal clean batches bit for bit, so the
        // paired losses coincide exactly.
        assert_eq!(stats.l_ce_clean, stats.l_ce_adv);
        assert_eq!(stats.l_da_clean, stats.l_da_adv);
        assert_eq!(stats.l_kl, 0.0);
    }

    #[test]
    fn trades_zero_epsilon_kills_the_kl_exactly() {
        let (ds, teacher) = quick_teacher(9);
        let mut cfg = quick_cfg(9);
        cfg.attack.epsilon = 0.0;
        cfg.epochs = 1;
        let mut model = teacher.clone_into_student();
        let mut opt = Sgd::new(cfg.optimizer);
        let stats = trades_epoch(&mut model, ds.train_view(), &cfg, &mut opt, 0).unwrap();
        assert_eq!(stats.l_kl, 0.0);
        assert_eq!(stats.l_da_adv, 0.0);
    }

    #[test]
    fn trades_kl_is_nonnegative_over_a_run() {
        let ds = two_moons_rotate(64, 64, 0.1, 30.0, 10).unwrap();
        let init = fresh_model(&ds, 10);
        let cfg = quick_cfg(10);
        let (_, trace) = run_trades(&init, ds.train_view(), &cfg, None).unwrap();
        for row in &trace.epochs {
            assert!(row.l_kl >= -1e-12);
            assert!(row.l_da_adv == 0.0);
        }
    }

    #[test]
    fn baseline_runs_are_deterministic() {
        let ds = two_moons_rotate(64, 64, 0.1, 30.0, 11).unwrap();
        let init = fresh_model(&ds, 11);
        let cfg = quick_cfg(11);
        let (a, _) = run_at(&init, ds.train_view(), &cfg, None).unwrap();
        let (b, _) = run_at(&init, ds.train_view(), &cfg, None).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        let (c, _) = run_trades(&init, ds.train_view(), &cfg, None).unwrap();
        assert_ne!(a.param_checksum(), c.param_checksum());
    }

    #[test]
    fn baselines_reject_frozen_inits() {
        let (ds, teacher) = quick_teacher(12);
        assert!(matches!(
            run_at(&teacher, ds.train_view(), &quick_cfg(12), None).unwrap_err(),
            TrainError::Contract { .. }
        ));
        assert!(matches!(
            run_trades(&teacher, ds.train_view(), &quick_cfg(12), None).unwrap_err(),
            TrainError::Contract { .. }
        ));
    }
}
