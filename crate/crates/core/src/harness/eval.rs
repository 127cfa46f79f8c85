use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::FeatureStore;
use crate::encoder::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::objective::{class_probs, predict};
use crate::prompt::{assemble_prompt, PassKind, PromptContext, TokenTable};
use crate::trainer::{unit, TrainedRun};

/// An exact fraction together with its real value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub value: f64,
}

impl Accuracy {
    pub fn new(correct: usize, total: usize) -> Self {
        let value = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Self { correct, total, value }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_domain: String,
    pub accuracy: Accuracy,
    pub per_class: Vec<Accuracy>,
    pub n_test: usize,
}

/// Class-pass predictor. It only ever sees image features, never domain ids.
pub struct ClassPredictor {
    text_feats: Vec<DVector<f64>>,
    temperature: f64,
}

impl ClassPredictor {
    pub fn new(
        context: &PromptContext,
        tokens: &TokenTable,
        encoder: &FrozenTextEncoder,
        temperature: f64,
    ) -> Result<Self> {
        Self::for_pass(
            context,
            tokens,
            encoder,
            PassKind::ClassPass,
            &(0..tokens.count(PassKind::ClassPass)).collect::<Vec<_>>(),
            temperature,
        )
    }

    fn for_pass(
        context: &PromptContext,
        tokens: &TokenTable,
        encoder: &FrozenTextEncoder,
        pass: PassKind,
        candidates: &[usize],
        temperature: f64,
    ) -> Result<Self> {
        let text_feats = candidates
            .iter()
            .map(|&c| encoder.encode(&assemble_prompt(context, &tokens.token(pass, c))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            text_feats,
            temperature,
        })
    }

    /// Index into the candidate list with the highest probability.
    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        if feature.len() != self.text_feats[0].len() {
            return Err(Error::invalid(format!(
                "feature width {} does not match text feature width {}",
                feature.len(),
                self.text_feats[0].len()
            )));
        }
        predict(&class_probs(&self.text_feats, &unit(feature), self.temperature)?)
    }
}

fn check_widths(run: &TrainedRun, store: &FeatureStore, tokens: &TokenTable, encoder: &FrozenTextEncoder) -> Result<()> {
    let ctx = &run.final_context;
    if store.dim() != encoder.dim() || tokens.d() != ctx.d() || encoder.d() != ctx.d() || encoder.input_len() != ctx.m() + 1 {
        return Err(Error::invalid(format!(
            "width mismatch: store D = {}, encoder {}x{} -> {}, context {}x{}, tokens d = {}",
            store.dim(),
            encoder.input_len(),
            encoder.d(),
            encoder.dim(),
            ctx.m(),
            ctx.d(),
            tokens.d()
        )));
    }
    Ok(())
}

/// Target-domain accuracy using the class pass only.
pub fn evaluate(
    run: &TrainedRun,
    test: &FeatureStore,
    tokens: &TokenTable,
    encoder: &FrozenTextEncoder,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test store"));
    }
    check_widths(run, test, tokens, encoder)?;
    let predictor = ClassPredictor::new(&run.final_context, tokens, encoder, run.config.temperature)?;
    let k = tokens.count(PassKind::ClassPass);
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for r in test.records() {
        let predicted = predictor.predict(&r.feature)?;
        totals[r.class_id] += 1;
        hits[r.class_id] += usize::from(predicted == r.class_id);
    }
    // Domain ids are used only to name the split.
    let target_domain = test
        .present_domains()
        .iter()
        .map(|p| test.domain_names()[*p].as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(EvalReport {
        target_domain,
        accuracy: Accuracy::new(hits.iter().sum(), test.len()),
        per_class: hits.iter().zip(&totals).map(|(h, t)| Accuracy::new(*h, *t)).collect(),
        n_test: test.len(),
    })
}

/// Accuracy of predicting the source domain with domain prompts. Lower means a
/// more domain-invariant context.
pub fn domain_probe(
    run: &TrainedRun,
    train_store: &FeatureStore,
    tokens: &TokenTable,
    encoder: &FrozenTextEncoder,
) -> Result<Accuracy> {
    let domains = train_store.present_domains();
    if domains.len() < 2 {
        return Err(Error::invalid(format!(
            "domain probe needs at least 2 domains, found {}",
            domains.len()
        )));
    }
    check_widths(run, train_store, tokens, encoder)?;
    let predictor = ClassPredictor::for_pass(
        &run.final_context,
        tokens,
        encoder,
        PassKind::DomainPass,
        &domains,
        run.config.temperature,
    )?;
    let mut correct = 0;
    for r in train_store.records() {
        let predicted = domains[predictor.predict(&r.feature)?];
        correct += usize::from(predicted == r.domain_id);
    }
    Ok(Accuracy::new(correct, train_store.len()))
}

/// Correctly rounded sum (Shewchuk's algorithm), independent of input order.
pub fn fsum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &v in values {
        let mut x = v;
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    // Round the partials (non-overlapping, increasing magnitude) to one value.
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Half-way case: make the rounding honour the remaining partials.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Arithmetic mean of per-domain accuracies (fractions or percents alike).
///
/// Use [`two_decimals`] to print the result the way results tables do.
pub fn summarize(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty list"));
    }
    Ok(fsum(values) / values.len() as f64)
}

/// Two-decimal display that truncates rather than rounds, after first rounding to
/// three decimals to absorb binary representation error. 82.275 prints as 82.27.
pub fn two_decimals(value: f64) -> String {
    let mut s = format!("{value:.3}");
    s.pop();
    if s == "-0.00" {
        s.remove(0);
    }
    s
}
