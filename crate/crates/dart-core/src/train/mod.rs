//! Training stack: Step 1 pretrains a domain-adversarial teacher on
//! labeled source plus unlabeled target data; Step 2 robustifies a student
//! cloned from the frozen teacher, or runs the entangled AT/Trades
//! baselines for comparison. This module holds the pieces both steps share.

pub mod robust;
pub mod uda;

use crate::attack::AttackError;
use crate::data::DataError;
use crate::model::{MlpGrads, Model, ModelError};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{stage}: non-finite loss at epoch {epoch}, batch {batch} (lr {learning_rate}); lower the learning rate or check the data scale")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("training contract violated: {reason}")]
    Contract { reason: String },
}

pub type TrainResult<T> = Result<T, TrainError>;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The domain-classification loss split into the pieces each optimizer
/// role needs: plain gradients for the discriminator (which minimizes), and
/// reversal-scaled gradients for the encoder features (which maximize).
#[derive(Debug)]
pub struct DomainLossParts {
    pub loss: f64,
    pub disc_grads: MlpGrads,
    /// Gradient on the source features, already scaled by `-grl_lambda`.
    pub grad_source_features: Tensor,
    /// Gradient on the target features, already scaled by `-grl_lambda`.
    pub grad_target_features: Tensor,
}

/// Mean binary logistic domain loss: source rows are domain 1, target rows
/// domain 0, each side contributing half. Conditional models route the
/// feature/probability outer product into the discriminator; the
/// probability side is a constant there.
pub fn domain_loss(
    model: &Model,
    source_features: &Tensor,
    source_probs: &Tensor,
    target_features: &Tensor,
    target_probs: &Tensor,
    grl_lambda: f64,
) -> TrainResult<DomainLossParts> {
    let ds = model.discriminator_input(source_features, source_probs)?;
    let dt = model.discriminator_input(target_features, target_probs)?;
    let (zs, cache_s) = model.discriminator().forward_cached(&ds)?;
    let (zt, cache_t) = model.discriminator().forward_cached(&dt)?;
    if zs.cols() != 1 || zt.cols() != 1 {
        return Err(TrainError::Contract {
            reason: format!(
                "discriminator must emit one logit per row, got widths {} and {}",
                zs.cols(),
                zt.cols()
            ),
        });
    }
    let ns = zs.rows() as f64;
    let nt = zt.rows() as f64;

    let mut loss = 0.0;
    let mut up_s = Tensor::zeros(zs.rows(), 1);
    for i in 0..zs.rows() {
        let z = zs.get(i, 0);
        loss += 0.5 * softplus(-z) / ns;
        up_s.set(i, 0, 0.5 * (sigmoid(z) - 1.0) / ns);
    }
    let mut up_t = Tensor::zeros(zt.rows(), 1);
    for i in 0..zt.rows() {
        let z = zt.get(i, 0);
        loss += 0.5 * softplus(z) / nt;
        up_t.set(i, 0, 0.5 * sigmoid(z) / nt);
    }

    let (grad_ds, grads_s) = model.discriminator().backward(&up_s, &cache_s)?;
    let (grad_dt, grads_t) = model.discriminator().backward(&up_t, &cache_t)?;
    let mut disc_grads = grads_s;
    disc_grads.add_assign(&grads_t)?;

    let grad_source_features = model
        .discriminator_input_backward(&grad_ds, source_probs)?
        .scale(-grl_lambda);
    let grad_target_features = model
        .discriminator_input_backward(&grad_dt, target_probs)?
        .scale(-grl_lambda);

    Ok(DomainLossParts {
        loss,
        disc_grads,
        grad_source_features,
        grad_target_features,
    })
}

/// Fraction of predictions equal to the labels.
pub(crate) fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Standard warm-up factor for the alignment strength, `2/(1+e^(-10p)) - 1`
/// over training progress `p`. Aligning features before the classifier has
/// shaped them locks in arbitrary matchings, so the reversal ramps from 0
/// to the configured strength.
pub(crate) fn grl_warmup(epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return 1.0;
    }
    let p = epoch as f64 / (epochs - 1) as f64;
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, Mlp, Model, ModelConfig};
    use crate::tensor::Tensor;

    fn probe_model() -> Model {
        Model::new(&ModelConfig {
            input_dim: 2,
            class_count: 2,
            hidden: vec![5, 3],
            disc_hidden: 4,
            conditional: false,
            seed: 21,
        })
        .unwrap()
    }

    #[test]
    fn zero_discriminator_gives_ln2() {
        // Hand-built bundle whose discriminator emits logit 0 everywhere.
        let encoder = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(1, 2),
        }]);
        let classifier = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(1, 2),
        }]);
        let discriminator = Mlp::from_layers(vec![Layer::Affine {
            weight: Tensor::zeros(2, 1),
            bias: Tensor::zeros(1, 1),
        }]);
        let model = Model::from_parts(encoder, classifier, discriminator, false, 2, 2);
        let fs = Tensor::from_rows(&[[0.3, 0.4], [1.0, -1.0]]).unwrap();
        let ft = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        let ps = Tensor::filled(2, 2, 0.5);
        let pt = Tensor::filled(1, 2, 0.5);
        let parts = domain_loss(&model, &fs, &ps, &ft, &pt, 1.0).unwrap();
        assert!((parts.loss - std::f64::consts::LN_2).abs() <= 1e-15);
    }

    #[test]
    fn lambda_zero_starves_encoder_but_feeds_discriminator() {
        let model = probe_model();
        let fs = Tensor::from_rows(&[[0.3, 0.4, -0.2], [1.0, -1.0, 0.5]]).unwrap();
        let ft = Tensor::from_rows(&[[0.5, 0.5, 0.1]]).unwrap();
        let ps = Tensor::filled(2, 2, 0.5);
        let pt = Tensor::filled(1, 2, 0.5);
        let parts = domain_loss(&model, &fs, &ps, &ft, &pt, 0.0).unwrap();
        assert_eq!(parts.grad_source_features.max_abs(), 0.0);
        assert_eq!(parts.grad_target_features.max_abs(), 0.0);
        assert!(parts.disc_grads.max_abs() > 0.0);
    }

    #[test]
    fn encoder_gradient_is_reversed_and_matches_finite_differences() {
        let model = probe_model();
        let fs = Tensor::from_rows(&[[0.3, 0.4, -0.2], [1.0, -1.0, 0.5]]).unwrap();
        let ft = Tensor::from_rows(&[[0.5, 0.5, 0.1]]).unwrap();
        let ps = Tensor::filled(2, 2, 0.5);
        let pt = Tensor::filled(1, 2, 0.5);
        let lambda = 0.7;
        let parts = domain_loss(&model, &fs, &ps, &ft, &pt, lambda).unwrap();

        // Numeric gradient of the (lambda-free) loss value itself.
        let h = 1e-6;
        for idx in 0..fs.data().len() {
            let mut plus = fs.clone();
            plus.data_mut()[idx] += h;
            let mut minus = fs.clone();
            minus.data_mut()[idx] -= h;
            let lp = domain_loss(&model, &plus, &ps, &ft, &pt, lambda).unwrap().loss;
            let lm = domain_loss(&model, &minus, &ps, &ft, &pt, lambda).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = parts.grad_source_features.data()[idx];
            assert!(
                (analytic + lambda * numeric).abs() <= 1e-6 * numeric.abs().max(1.0),
                "idx {idx}: reversed {analytic} vs -lambda*numeric {}",
                -lambda * numeric
            );
        }

        // Flipping lambda flips the feature gradient exactly.
        let flipped = domain_loss(&model, &fs, &ps, &ft, &pt, -lambda).unwrap();
        for (a, b) in parts
            .grad_source_features
            .data()
            .iter()
            .zip(flipped.grad_source_features.data())
        {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn conditional_domain_loss_runs_and_feeds_features() {
        let model = Model::new(&ModelConfig {
            input_dim: 2,
            class_count: 3,
            hidden: vec![4],
            disc_hidden: 4,
            conditional: true,
            seed: 3,
        })
        .unwrap();
        let x = Tensor::from_rows(&[[0.2, -0.4], [0.6, 0.1]]).unwrap();
        let pred_s = model.predict(&x).unwrap();
        let xt = Tensor::from_rows(&[[0.9, 0.3]]).unwrap();
        let pred_t = model.predict(&xt).unwrap();
        let parts = domain_loss(
            &model,
            &pred_s.features,
            &pred_s.probs,
            &pred_t.features,
            &pred_t.probs,
            1.0,
        )
        .unwrap();
        assert!(parts.loss.is_finite());
        assert_eq!(parts.grad_source_features.shape(), pred_s.features.shape());
        assert!(parts.grad_source_features.max_abs() > 0.0);
    }
}
