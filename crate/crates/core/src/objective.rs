//! Softmax-over-cosine probabilities, cross-entropy, gradient reversal and the
//! per-pass loss and gradient with respect to the context rows.

use nalgebra::allocator::Allocator;
use nalgebra::{DMatrix, DVector, DefaultAllocator, Dim, Matrix, OMatrix, Storage};
use serde::{Deserialize, Serialize};

use crate::encoder::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::prompt::{assemble_prompt, PassKind, PromptContext, TokenTable};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;
/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    pub lambda: f64,
}

impl ObjectiveConfig {
    pub fn new(temperature: f64, lambda: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self { temperature, lambda })
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            lambda: 1.0,
        }
    }
}

fn check_unit(what: impl FnOnce() -> String, v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE || !norm.is_finite() {
        return Err(Error::NotUnitNorm { what: what(), norm });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of cosine similarities divided by the temperature.
pub fn class_probs(text_feats: &[DVector<f64>], image_feat: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if text_feats.is_empty() {
        return Err(Error::invalid("class_probs needs at least one text feature"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_unit(|| "image feature".into(), image_feat)?;
    for (k, t) in text_feats.iter().enumerate() {
        if t.len() != image_feat.len() {
            return Err(Error::invalid(format!(
                "text feature {k} has width {}, image feature has {}",
                t.len(),
                image_feat.len()
            )));
        }
        check_unit(|| format!("text feature {k}"), t.as_slice())?;
    }
    let logits: Vec<f64> = text_feats
        .iter()
        .map(|t| dot(t.as_slice(), image_feat) / temperature)
        .collect();
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn predict(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::invalid("cannot predict from an empty probability vector"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(argmax(probs))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllOutput {
    pub loss: f64,
    /// Gradient with respect to the logits: `probs - onehot(label)`.
    pub grad: Vec<f64>,
    /// Set when the label probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

pub fn nll_and_grad(probs: &[f64], label: usize) -> Result<NllOutput> {
    if label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let p = probs[label];
    let clamped = p < PROB_FLOOR;
    let loss = -p.max(PROB_FLOOR).ln();
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    Ok(NllOutput { loss, grad, clamped })
}

/// Backward rule of the gradient reversal layer: scale by `-lambda`.
///
/// The layer is the identity in the forward direction, so there is no forward
/// function; domain-pass gradients are passed through this before they are
/// folded into an update.
pub fn grl_backward<R, C, S>(grad: &Matrix<f64, R, C, S>, lambda: f64) -> OMatrix<f64, R, C>
where
    R: Dim,
    C: Dim,
    S: Storage<f64, R, C>,
    DefaultAllocator: Allocator<R, C>,
{
    grad.map(|g| -(lambda * g))
}

/// `l_cls - lambda * l_dom`, reported for monitoring.
pub fn combined_loss(class_loss: f64, domain_loss: f64, lambda: f64) -> f64 {
    class_loss - lambda * domain_loss
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassResult {
    pub loss: f64,
    /// Raw gradient of the pass loss w.r.t. the M context rows: no mask, no reversal.
    pub grad_context: DMatrix<f64>,
    pub clamp_events: usize,
}

/// One labelled feature fed to a pass. `label` is a global class or domain id.
#[derive(Clone, Copy, Debug)]
pub struct PassExample<'a> {
    pub feature: &'a [f64],
    pub label: usize,
}

/// Loss and context gradient of one pass for a single image feature, with the
/// softmax taken over every class (or every domain) in the token table.
#[allow(clippy::too_many_arguments)]
pub fn pass_loss_and_grad(
    context: &PromptContext,
    tokens: &TokenTable,
    encoder: &FrozenTextEncoder,
    image_feat: &[f64],
    label: usize,
    pass: PassKind,
    temperature: f64,
) -> Result<PassResult> {
    let candidates: Vec<usize> = (0..tokens.count(pass)).collect();
    batch_pass(
        context,
        tokens,
        encoder,
        &[PassExample {
            feature: image_feat,
            label,
        }],
        pass,
        &candidates,
        temperature,
    )
}

/// Mean loss and mean context gradient of one pass over a batch.
///
/// `candidates` lists the token ids competing in the softmax (for the domain
/// pass, the source domains). Every example label must be one of them.
pub fn batch_pass(
    context: &PromptContext,
    tokens: &TokenTable,
    encoder: &FrozenTextEncoder,
    batch: &[PassExample<'_>],
    pass: PassKind,
    candidates: &[usize],
    temperature: f64,
) -> Result<PassResult> {
    if batch.is_empty() {
        return Err(Error::invalid("pass needs at least one example"));
    }
    if candidates.len() < 2 {
        return Err(Error::invalid("pass needs at least two candidate tokens"));
    }
    if tokens.d() != context.d() {
        return Err(Error::invalid(format!(
            "token width {} does not match context width {}",
            tokens.d(),
            context.d()
        )));
    }
    let n_tokens = tokens.count(pass);
    if let Some(bad) = candidates.iter().find(|c| **c >= n_tokens) {
        return Err(Error::invalid(format!("candidate token {bad} out of range")));
    }

    let mut prompts = Vec::with_capacity(candidates.len());
    let mut forwards = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let seq = assemble_prompt(context, &tokens.token(pass, c))?;
        forwards.push(encoder.forward(&seq)?);
        prompts.push(seq);
    }
    let text_feats: Vec<DVector<f64>> = forwards.iter().map(|f| f.feature.clone()).collect();

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut clamp_events = 0;
    let mut feature_grads = vec![DVector::zeros(encoder.dim()); candidates.len()];
    for ex in batch {
        let position = candidates
            .iter()
            .position(|c| *c == ex.label)
            .ok_or_else(|| Error::invalid(format!("label {} is not a candidate", ex.label)))?;
        let probs = class_probs(&text_feats, ex.feature, temperature)?;
        let nll = nll_and_grad(&probs, position)?;
        loss += nll.loss;
        clamp_events += usize::from(nll.clamped);
        // logit_k = g_k . x / tau
        for (fg, dl) in feature_grads.iter_mut().zip(&nll.grad) {
            let coef = dl / temperature * scale;
            for (slot, x) in fg.iter_mut().zip(ex.feature) {
                *slot += coef * x;
            }
        }
    }

    let m = context.m();
    let mut grad_context = DMatrix::zeros(m, context.d());
    for ((seq, fwd), fg) in prompts.iter().zip(&forwards).zip(&feature_grads) {
        let g = encoder.backward(seq, fwd, fg)?;
        grad_context += g.rows(0, m);
    }
    Ok(PassResult {
        loss: loss * scale,
        grad_context,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Layout;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> DVector<f64> {
        let d = DVector::from_row_slice(v);
        let n = d.norm();
        d / n
    }

    #[test]
    fn identical_features_give_uniform_probs() {
        let t = unit(&[0.3, -0.2, 0.9]);
        let feats = vec![t.clone(); 5];
        let probs = class_probs(&feats, unit(&[1.0, 2.0, 3.0]).as_slice(), 0.07).unwrap();
        assert!(probs.iter().all(|p| *p == 1.0 / 5.0));
    }

    #[test]
    fn two_class_closed_form() {
        let feats = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let x = [1.0, 0.0];
        let p = class_probs(&feats, &x, 1.0).unwrap();
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        let p = class_probs(&feats, &x, 0.07).unwrap();
        assert!((1.0 - p[0] - 6.248745604287009e-07).abs() < 1e-15);
    }

    #[test]
    fn non_unit_inputs_are_rejected() {
        let feats = vec![unit(&[1.0, 0.0]), DVector::from_row_slice(&[0.0, 2.0])];
        assert!(matches!(
            class_probs(&feats, &[1.0, 0.0], 1.0),
            Err(Error::NotUnitNorm { .. })
        ));
        let feats = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        assert!(matches!(
            class_probs(&feats, &[1.0, 1.0], 1.0),
            Err(Error::NotUnitNorm { .. })
        ));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.7, 0.2]).unwrap(), 1);
        assert_eq!(predict(&[0.25; 4]).unwrap(), 0);
        assert_eq!(predict(&[0.5, 0.5]).unwrap(), 0);
        assert!(predict(&[]).is_err());
        assert!(predict(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn nll_examples() {
        let out = nll_and_grad(&[1.0 / 7.0; 7], 3).unwrap();
        assert!((out.loss - 1.9459101490553132).abs() < 1e-12);

        let out = nll_and_grad(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));

        let p1 = 0.7310585786300049;
        let out = nll_and_grad(&[p1, 1.0 - p1], 0).unwrap();
        assert!((out.loss - 0.3132616875182228).abs() < 1e-12);
        assert!((out.grad[0] + 0.2689414213699951).abs() < 1e-12);
        assert!((out.grad[1] - 0.2689414213699951).abs() < 1e-12);
        assert!(!out.clamped);

        assert!(nll_and_grad(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn nll_clamps_tiny_probabilities() {
        let out = nll_and_grad(&[1.0, 0.0], 1).unwrap();
        assert!(out.clamped);
        assert!(out.loss.is_finite());
        assert!((out.loss - 300.0 * std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn grl_examples() {
        let g = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        assert_eq!(grl_backward(&g, 1.0).as_slice(), &[-1.0, 2.0, -3.0]);
        assert!(grl_backward(&g, 0.0).iter().all(|v| *v == 0.0));
        let one = DVector::from_row_slice(&[2.0]);
        assert_eq!(grl_backward(&one, 0.5)[0], -1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(1.0, 0.5, 2.0), 0.0);
        assert_eq!(combined_loss(0.8, 123.0, 0.0), 0.8);
        assert_eq!(combined_loss(0.6931, 0.6931, 1.0), 0.0);
    }

    #[test]
    fn objective_config_validation() {
        assert!(ObjectiveConfig::new(0.0, 1.0).is_err());
        assert!(ObjectiveConfig::new(0.07, -0.1).is_err());
        assert!(ObjectiveConfig::new(0.07, 0.0).is_ok());
    }

    fn fixture() -> (PromptContext, TokenTable, FrozenTextEncoder) {
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}_{i}")).collect::<Vec<_>>();
        let ctx = PromptContext::new(4, 8, Layout::Scp, 1).unwrap();
        let tokens = TokenTable::generate(&names("class", 3), &names("domain", 3), 8, 2).unwrap();
        let enc = FrozenTextEncoder::new(5, 8, 8, 3).unwrap();
        (ctx, tokens, enc)
    }

    #[test]
    fn pass_is_pure_and_reversal_with_zero_lambda_vanishes() {
        let (ctx, tokens, enc) = fixture();
        let x = unit(&[0.1, 0.4, -0.3, 0.2, 0.9, -0.5, 0.05, 0.3]);
        let a = pass_loss_and_grad(&ctx, &tokens, &enc, x.as_slice(), 1, PassKind::DomainPass, 0.07).unwrap();
        let b = pass_loss_and_grad(&ctx, &tokens, &enc, x.as_slice(), 1, PassKind::DomainPass, 0.07).unwrap();
        assert_eq!(a, b);
        assert!(grl_backward(&a.grad_context, 0.0).iter().all(|v| *v == 0.0));
        assert!(a.loss > 0.0 && a.grad_context.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn batch_pass_rejects_bad_inputs() {
        let (ctx, tokens, enc) = fixture();
        let x = unit(&[1.0; 8]);
        let ex = PassExample { feature: x.as_slice(), label: 2 };
        assert!(batch_pass(&ctx, &tokens, &enc, &[], PassKind::ClassPass, &[0, 1], 0.07).is_err());
        assert!(batch_pass(&ctx, &tokens, &enc, &[ex], PassKind::ClassPass, &[0, 1], 0.07).is_err());
        assert!(batch_pass(&ctx, &tokens, &enc, &[ex], PassKind::ClassPass, &[0, 5], 0.07).is_err());
        assert!(batch_pass(&ctx, &tokens, &enc, &[ex], PassKind::ClassPass, &[0, 2], 0.07).is_ok());
    }

    proptest! {
        #[test]
        fn probs_sum_to_one_and_are_shift_invariant(
            sims in prop::collection::vec(-1.0f64..1.0, 2..10),
            shift in -5.0f64..5.0,
            tau in 0.05f64..2.0,
        ) {
            let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn predict_is_invariant_under_positive_scaling(
            sims in prop::collection::vec(-1.0f64..1.0, 2..10),
            scale in 0.1f64..20.0,
        ) {
            let a = predict(&softmax(&sims)).unwrap();
            let scaled: Vec<f64> = sims.iter().map(|s| s * scale).collect();
            prop_assert_eq!(a, predict(&softmax(&scaled)).unwrap());
        }
    }
}
