//! Test-only reference implementations, kept independent of the crate's
//! forward and backward code paths.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Sub};

use dicoop::data::{FeatureRecord, FeatureStore, SynthConfig};
use dicoop::encoder::FrozenTextEncoder;
use dicoop::prompt::{PassKind, TokenTable};

/// Forward-mode dual number: value plus one directional derivative.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: f64,
    pub e: f64,
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Dual { v, e: 0.0 }
    }

    pub fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        Dual { v: r, e: self.e / (2.0 * r) }
    }

    pub fn exp(self) -> Self {
        let x = self.v.exp();
        Dual { v: x, e: self.e * x }
    }

    pub fn ln(self) -> Self {
        Dual { v: self.v.ln(), e: self.e / self.v }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, e: self.e + o.e }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, e: self.e - o.e }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, e: self.e * o.v + self.v * o.e }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual { v: self.v / o.v, e: (self.e * o.v - self.v * o.e) / (o.v * o.v) }
    }
}

fn text_feature(context: &[Vec<Dual>], token: &[f64], enc: &FrozenTextEncoder) -> Vec<Dual> {
    let w = enc.positional_weights();
    let d = token.len();
    let mut pooled = vec![Dual::constant(0.0); d];
    for (m, row) in context.iter().enumerate() {
        for j in 0..d {
            pooled[j] = pooled[j] + Dual::constant(w[m]) * row[j];
        }
    }
    let last = context.len();
    for j in 0..d {
        pooled[j] = pooled[j] + Dual::constant(w[last] * token[j]);
    }
    let gated: Vec<Dual> = (0..d).map(|j| Dual::constant(token[j]) * pooled[j]).collect();
    let p = enc.projection();
    let b = enc.bias();
    let z: Vec<Dual> = (0..p.nrows())
        .map(|i| {
            let mut acc = Dual::constant(b[i]);
            for j in 0..d {
                acc = acc + Dual::constant(p[(i, j)]) * gated[j];
            }
            acc
        })
        .collect();
    let norm = z.iter().fold(Dual::constant(0.0), |s, x| s + *x * *x).sqrt();
    z.into_iter().map(|x| x / norm).collect()
}

/// Mean negative log-likelihood of one pass over `examples` (feature, label),
/// with the softmax restricted to `candidates`.
pub fn pass_loss(
    context: &[Vec<Dual>],
    tokens: &TokenTable,
    enc: &FrozenTextEncoder,
    pass: PassKind,
    candidates: &[usize],
    examples: &[(&[f64], usize)],
    temperature: f64,
) -> Dual {
    let feats: Vec<Vec<Dual>> = candidates
        .iter()
        .map(|c| text_feature(context, &tokens.token(pass, *c), enc))
        .collect();
    let mut total = Dual::constant(0.0);
    for (x, label) in examples {
        let logits: Vec<Dual> = feats
            .iter()
            .map(|g| {
                let dot = g.iter().zip(x.iter()).fold(Dual::constant(0.0), |s, (gi, xi)| s + *gi * Dual::constant(*xi));
                dot / Dual::constant(temperature)
            })
            .collect();
        let shift = logits.iter().map(|l| l.v).fold(f64::NEG_INFINITY, f64::max);
        let denom = logits
            .iter()
            .fold(Dual::constant(0.0), |s, l| s + (*l - Dual::constant(shift)).exp());
        let pos = candidates.iter().position(|c| c == label).expect("label is a candidate");
        total = total + denom.ln() - (logits[pos] - Dual::constant(shift));
    }
    total / Dual::constant(examples.len() as f64)
}

/// Gradient of `class_loss - lambda * domain_loss` over a batch, one forward
/// sweep per context entry.
#[allow(clippy::too_many_arguments)]
pub fn combined_gradient(
    values: &nalgebra::DMatrix<f64>,
    tokens: &TokenTable,
    enc: &FrozenTextEncoder,
    batch: &[&FeatureRecord],
    domain_candidates: &[usize],
    temperature: f64,
    lambda: f64,
) -> nalgebra::DMatrix<f64> {
    let (m, d) = values.shape();
    let class_candidates: Vec<usize> = (0..tokens.count(PassKind::ClassPass)).collect();
    let class_ex: Vec<(&[f64], usize)> = batch.iter().map(|r| (r.feature.as_slice(), r.class_id)).collect();
    let domain_ex: Vec<(&[f64], usize)> = batch.iter().map(|r| (r.feature.as_slice(), r.domain_id)).collect();
    let mut grad = nalgebra::DMatrix::zeros(m, d);
    for i in 0..m {
        for j in 0..d {
            let ctx: Vec<Vec<Dual>> = (0..m)
                .map(|r| {
                    (0..d)
                        .map(|c| Dual {
                            v: values[(r, c)],
                            e: if (r, c) == (i, j) { 1.0 } else { 0.0 },
                        })
                        .collect()
                })
                .collect();
            let lc = pass_loss(&ctx, tokens, enc, PassKind::ClassPass, &class_candidates, &class_ex, temperature);
            let ld = pass_loss(&ctx, tokens, enc, PassKind::DomainPass, domain_candidates, &domain_ex, temperature);
            grad[(i, j)] = (lc - Dual::constant(lambda) * ld).e;
        }
    }
    grad
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// Records outside `holdout`, re-normalized in 64-bit, in store order.
pub fn source_records(store: &FeatureStore, holdout: usize) -> Vec<FeatureRecord> {
    store
        .records()
        .iter()
        .filter(|r| r.domain_id != holdout)
        .map(|r| FeatureRecord {
            feature: unit(&r.feature),
            class_id: r.class_id,
            domain_id: r.domain_id,
        })
        .collect()
}

pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        classes: 3,
        domains: 3,
        shots_per_cell: 4,
        dim: 8,
        seed,
        ..SynthConfig::default()
    }
}

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}
