//! Evaluation and bound auditing. Accuracy and every bound term reduce to
//! empirical 0-1 disagreement rates between label vectors, so the audit
//! arithmetic is exposed on plain label slices first and wrapped for models
//! second. The two audits check one proposition-level and one theorem-level
//! risk decomposition, including the latter's two intermediate triangle
//! inequalities.

use crate::attack::{perturb, AttackConfig, AttackError};
use crate::data::{DataError, DomainDataset};
use crate::model::{Model, ModelError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AUDIT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("evaluation input invalid: {reason}")]
    Invalid { reason: String },
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Fraction of positions where the two labelings differ.
pub fn disagreement(a: &[usize], b: &[usize]) -> EvalResult<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Invalid {
            reason: format!(
                "disagreement needs equal nonempty label vectors, got {} and {}",
                a.len(),
                b.len()
            ),
        });
    }
    let differ = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(differ as f64 / a.len() as f64)
}

/// Fraction of positions where the two labelings agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> EvalResult<f64> {
    Ok(1.0 - disagreement(pred, truth)?)
}

/// Adversarial accuracy under one attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEvalRow {
    pub attack: AttackConfig,
    pub adv_accuracy: f64,
}

/// Clean and per-attack adversarial accuracy on the evaluation target set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackEvalRow>,
}

/// Audit of the proposition-level decomposition: the summed adversarial and
/// clean errors are bounded by the robust disagreement plus twice the clean
/// error. Exact on empirical rates, up to [`AUDIT_TOLERANCE`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Audit {
    /// Adversarial error against the truth.
    pub adv_error: f64,
    /// Clean error against the truth.
    pub clean_error: f64,
    /// Disagreement between adversarial and clean predictions.
    pub robust_disagreement: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub holds: bool,
}

/// Audits `adv_error + clean_error <= robust_disagreement + 2*clean_error`
/// from plain prediction vectors.
pub fn audit_prop1_labels(
    adv_pred: &[usize],
    clean_pred: &[usize],
    truth: &[usize],
) -> EvalResult<Prop1Audit> {
    let adv_error = disagreement(adv_pred, truth)?;
    let clean_error = disagreement(clean_pred, truth)?;
    let robust_disagreement = disagreement(adv_pred, clean_pred)?;
    let lhs = adv_error + clean_error;
    let rhs = robust_disagreement + 2.0 * clean_error;
    Ok(Prop1Audit {
        adv_error,
        clean_error,
        robust_disagreement,
        lhs,
        rhs,
        gap: rhs - lhs,
        holds: lhs <= rhs + AUDIT_TOLERANCE,
    })
}

/// Audit of the theorem-level decomposition against a reference classifier:
/// the same LHS is bounded by an attack-defense term (adversarial
/// disagreement with the reference), a benign-maintenance term (clean
/// disagreement with the reference), and twice the reference's own error.
/// The two intermediate triangle inequalities are audited separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thm1Audit {
    pub adv_error: f64,
    pub clean_error: f64,
    /// Disagreement between the model's adversarial predictions and the
    /// reference's clean predictions.
    pub attack_defense: f64,
    /// Disagreement between the model's and the reference's clean
    /// predictions.
    pub benign_maintenance: f64,
    /// The reference classifier's own clean error.
    pub ideal_error: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub holds: bool,
    /// `adv_error <= attack_defense + ideal_error`.
    pub ineq6_gap: f64,
    pub ineq6_holds: bool,
    /// `clean_error <= benign_maintenance + ideal_error`.
    pub ineq7_gap: f64,
    pub ineq7_holds: bool,
}

/// Runs the theorem-level audit from plain prediction vectors;
/// `reference_clean` plays the ideal-classifier role.
pub fn audit_thm1_labels(
    adv_pred: &[usize],
    clean_pred: &[usize],
    reference_clean: &[usize],
    truth: &[usize],
) -> EvalResult<Thm1Audit> {
    let adv_error = disagreement(adv_pred, truth)?;
    let clean_error = disagreement(clean_pred, truth)?;
    let attack_defense = disagreement(adv_pred, reference_clean)?;
    let benign_maintenance = disagreement(clean_pred, reference_clean)?;
    let ideal_error = disagreement(reference_clean, truth)?;
    let lhs = adv_error + clean_error;
    let rhs = attack_defense + benign_maintenance + 2.0 * ideal_error;
    let ineq6_gap = (attack_defense + ideal_error) - adv_error;
    let ineq7_gap = (benign_maintenance + ideal_error) - clean_error;
    Ok(Thm1Audit {
        adv_error,
        clean_error,
        attack_defense,
        benign_maintenance,
        ideal_error,
        lhs,
        rhs,
        gap: rhs - lhs,
        holds: lhs <= rhs + AUDIT_TOLERANCE,
        ineq6_gap,
        ineq6_holds: ineq6_gap >= -AUDIT_TOLERANCE,
        ineq7_gap,
        ineq7_holds: ineq7_gap >= -AUDIT_TOLERANCE,
    })
}

/// Clean argmax predictions on the evaluation target set.
pub fn clean_predictions(model: &Model, dataset: &DomainDataset) -> EvalResult<Vec<usize>> {
    Ok(model.predict(dataset.target_features())?.pseudo_labels)
}

/// Predictions on adversarial target samples generated with ground-truth
/// labels against the evaluated model itself.
pub fn adversarial_predictions(
    model: &Model,
    dataset: &DomainDataset,
    attack: &AttackConfig,
) -> EvalResult<Vec<usize>> {
    let truth = dataset.eval_labels()?;
    let adv = perturb(
        model,
        dataset.target_features(),
        truth,
        attack,
        dataset.feature_bounds(),
    )?;
    Ok(model.predict(&adv)?.pseudo_labels)
}

/// Clean accuracy plus adversarial accuracy per attack. Never mutates the
/// model; deterministic given the attack seeds.
pub fn evaluate(
    model: &Model,
    dataset: &DomainDataset,
    attacks: &[AttackConfig],
) -> EvalResult<RiskReport> {
    let truth = dataset.eval_labels()?;
    let clean = clean_predictions(model, dataset)?;
    let clean_accuracy = accuracy(&clean, truth)?;
    let mut rows = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let adv_pred = adversarial_predictions(model, dataset, attack)?;
        rows.push(AttackEvalRow {
            attack: *attack,
            adv_accuracy: accuracy(&adv_pred, truth)?,
        });
    }
    Ok(RiskReport {
        clean_accuracy,
        attacks: rows,
    })
}

/// Proposition-level audit of `model` under one attack.
pub fn audit_prop1(
    model: &Model,
    dataset: &DomainDataset,
    attack: &AttackConfig,
) -> EvalResult<Prop1Audit> {
    let truth = dataset.eval_labels()?;
    let clean = clean_predictions(model, dataset)?;
    let adv = adversarial_predictions(model, dataset, attack)?;
    audit_prop1_labels(&adv, &clean, truth)
}

/// Theorem-level audit of `model` against a frozen reference under one
/// attack.
pub fn audit_thm1(
    model: &Model,
    reference: &Model,
    dataset: &DomainDataset,
    attack: &AttackConfig,
) -> EvalResult<Thm1Audit> {
    let truth = dataset.eval_labels()?;
    let clean = clean_predictions(model, dataset)?;
    let adv = adversarial_predictions(model, dataset, attack)?;
    let reference_clean = clean_predictions(reference, dataset)?;
    audit_thm1_labels(&adv, &clean, &reference_clean, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_moons_rotate;
    use crate::model::{Layer, Mlp, ModelConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disagreement_hand_cases() {
        assert_eq!(disagreement(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(disagreement(&[0, 1, 2], &[1, 1, 2]).unwrap(), 1.0 / 3.0);
        assert_eq!(disagreement(&[0, 0], &[1, 1]).unwrap(), 1.0);
        assert!(disagreement(&[0], &[0, 1]).is_err());
        assert!(disagreement(&[], &[]).is_err());
    }

    #[test]
    fn prop1_three_sample_hand_case() {
        let truth = [0, 1, 1];
        let clean = [0, 1, 0];
        let adv = [1, 1, 0];
        let audit = audit_prop1_labels(&adv, &clean, &truth).unwrap();
        assert!((audit.adv_error - 2.0 / 3.0).abs() <= 1e-15);
        assert!((audit.clean_error - 1.0 / 3.0).abs() <= 1e-15);
        assert!((audit.robust_disagreement - 1.0 / 3.0).abs() <= 1e-15);
        assert!((audit.lhs - 1.0).abs() <= 1e-15);
        assert!((audit.rhs - 1.0).abs() <= 1e-15);
        assert!(audit.holds);
    }

    #[test]
    fn prop1_is_tight_for_a_perfectly_robust_model() {
        let truth = [0, 1, 0, 1, 1];
        let clean = [0, 1, 1, 1, 0];
        let audit = audit_prop1_labels(&clean, &clean, &truth).unwrap();
        assert_eq!(audit.robust_disagreement, 0.0);
        assert!(audit.gap.abs() <= 1e-15);
        assert!(audit.holds);
    }

    #[test]
    fn thm1_four_sample_hand_case() {
        let truth = [0, 1, 0, 1];
        let clean = [0, 1, 1, 1];
        let adv = [1, 1, 1, 1];
        let reference = [0, 1, 0, 0];
        let audit = audit_thm1_labels(&adv, &clean, &reference, &truth).unwrap();
        assert!((audit.lhs - 0.75).abs() <= 1e-15);
        assert!((audit.attack_defense - 0.75).abs() <= 1e-15);
        assert!((audit.benign_maintenance - 0.5).abs() <= 1e-15);
        assert!((audit.ideal_error - 0.25).abs() <= 1e-15);
        assert!((audit.rhs - 1.75).abs() <= 1e-15);
        assert!(audit.holds && audit.ineq6_holds && audit.ineq7_holds);
        assert!((audit.ineq6_gap - 0.5).abs() <= 1e-15);
        assert!((audit.ineq7_gap - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn thm1_reduces_to_reference_error_when_model_is_the_reference() {
        let truth = [0, 1, 0, 1, 0, 1];
        let pred = [0, 1, 1, 1, 0, 0];
        let audit = audit_thm1_labels(&pred, &pred, &pred, &truth).unwrap();
        assert_eq!(audit.attack_defense, 0.0);
        assert_eq!(audit.benign_maintenance, 0.0);
        assert!(audit.gap.abs() <= 1e-15);
        assert!(audit.holds);
    }

    #[test]
    fn audits_hold_on_random_label_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.gen_range(1..60);
            let c = rng.gen_range(2..5);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
                (0..n).map(|_| rng.gen_range(0..c)).collect()
            };
            let truth = draw(&mut rng);
            let clean = draw(&mut rng);
            let adv = draw(&mut rng);
            let reference = draw(&mut rng);
            let p = audit_prop1_labels(&adv, &clean, &truth).unwrap();
            assert!(p.holds, "prop1 violated: {p:?}");
            let t = audit_thm1_labels(&adv, &clean, &reference, &truth).unwrap();
            assert!(t.holds && t.ineq6_holds && t.ineq7_holds, "thm1 violated: {t:?}");
        }
    }

    fn constant_model(input_dim: usize) -> Model {
        // Zero classifier: every logit row is identical, argmax is class 0.
        let encoder = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::zeros(input_dim, 2),
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
        Model::from_parts(encoder, classifier, disc, false, 2, input_dim)
    }

    #[test]
    fn constant_model_scores_one_over_c_on_balanced_data() {
        let ds = two_moons_rotate(40, 40, 0.1, 30.0, 3).unwrap();
        let report = evaluate(&constant_model(ds.feature_dim()), &ds, &[]).unwrap();
        assert!((report.clean_accuracy - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn zero_epsilon_attack_equals_clean_accuracy() {
        let ds = two_moons_rotate(32, 32, 0.1, 30.0, 5).unwrap();
        let model = Model::new(&ModelConfig::new(ds.feature_dim(), 2)).unwrap();
        let report = evaluate(&model, &ds, &[AttackConfig::ifgsm(0.0, 0.05, 10)]).unwrap();
        assert_eq!(report.attacks[0].adv_accuracy, report.clean_accuracy);
    }

    #[test]
    fn evaluation_is_deterministic_and_pure() {
        let ds = two_moons_rotate(32, 32, 0.1, 30.0, 7).unwrap();
        let model = Model::new(&ModelConfig::new(ds.feature_dim(), 2)).unwrap();
        let before = model.param_checksum();
        let attacks = [AttackConfig::pgd(0.1, 0.05, 10, 3)];
        let a = evaluate(&model, &ds, &attacks).unwrap();
        let b = evaluate(&model, &ds, &attacks).unwrap();
        assert_eq!(model.param_checksum(), before);
        assert_eq!(a.clean_accuracy, b.clean_accuracy);
        assert_eq!(a.attacks[0].adv_accuracy, b.attacks[0].adv_accuracy);
    }

    #[test]
    fn missing_eval_labels_is_an_error() {
        let feats = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let ds = crate::data::DomainDataset::new(feats.clone(), vec![0, 1], feats, None, 2).unwrap();
        let model = Model::new(&ModelConfig::new(2, 2)).unwrap();
        assert!(matches!(
            evaluate(&model, &ds, &[]).unwrap_err(),
            EvalError::Data(DataError::NoEvalLabels)
        ));
    }

    #[test]
    fn model_level_audits_hold_on_an_untrained_model() {
        let ds = two_moons_rotate(40, 40, 0.15, 30.0, 9).unwrap();
        let model = Model::new(&ModelConfig::new(ds.feature_dim(), 2)).unwrap();
        let attack = AttackConfig::ifgsm(0.1, 0.05, 5);
        let p = audit_prop1(&model, &ds, &attack).unwrap();
        assert!(p.holds);
        let mut reference = Model::new(&ModelConfig::new(ds.feature_dim(), 2)).unwrap();
        reference.freeze();
        let t = audit_thm1(&model, &reference, &ds, &attack).unwrap();
        assert!(t.holds && t.ineq6_holds && t.ineq7_holds);
    }
}
