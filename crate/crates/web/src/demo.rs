//! The demo's operations as plain Rust, so they run and test natively.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use dicoop::data::{domain_centroid_probe, leave_one_domain_out, sample_few_shot, synth_generate, SynthConfig};
use dicoop::error::{Error, Result};
use dicoop::harness::{domain_probe, evaluate};
use dicoop::prompt::{update_mask, Layout, PassKind};
use dicoop::trainer::{lambda_at, train_with, Schedule, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    pub domain_id: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FeatureMap {
    pub points: Vec<Point>,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    /// Share of variance captured by the two plotted axes.
    pub explained: f64,
    pub centroid_probe: f64,
}

/// Synthetic features projected onto their two leading principal axes.
pub fn feature_map(alpha: f64, sigma: f64, seed: u64) -> Result<FeatureMap> {
    let store = synth_generate(&SynthConfig {
        shots_per_cell: 8,
        alpha,
        sigma,
        seed,
        ..SynthConfig::default()
    })?;
    let (n, dim) = (store.len(), store.dim());
    let mut x = DMatrix::from_fn(n, dim, |i, j| store.records()[i].feature[j]);
    for j in 0..dim {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("projection failed"))?;
    // Singular values are not sorted by nalgebra.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let top: f64 = order[..2].iter().map(|i| svd.singular_values[*i].powi(2)).sum();
    let axes = [v_t.row(order[0]).transpose(), v_t.row(order[1]).transpose()];
    let points = store
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let row = x.row(i).transpose();
            Point {
                x: row.dot(&axes[0]),
                y: row.dot(&axes[1]),
                class_id: r.class_id,
                domain_id: r.domain_id,
            }
        })
        .collect();
    Ok(FeatureMap {
        points,
        classes: store.class_names().to_vec(),
        domains: store.domain_names().to_vec(),
        explained: if total > 0.0 { top / total } else { 0.0 },
        centroid_probe: domain_centroid_probe(&store),
    })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct TrainRequest {
    pub layout: Layout,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub holdout: String,
    pub alpha: f64,
}

impl Default for TrainRequest {
    fn default() -> Self {
        Self {
            layout: Layout::Dfp,
            lambda: 1.0,
            epochs: 100,
            seed: 0,
            holdout: "domain_0".into(),
            alpha: 0.8,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub class_loss: Vec<f64>,
    pub domain_loss: Vec<f64>,
    pub target_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub domain_probe: f64,
    pub clamp_events: usize,
}

/// 16-shot training on the default synthetic benchmark with one held-out domain.
pub fn train_demo(req: &TrainRequest) -> Result<TrainSummary> {
    if req.epochs == 0 || req.epochs > 1000 {
        return Err(Error::invalid("epochs must be between 1 and 1000"));
    }
    let store = synth_generate(&SynthConfig {
        alpha: req.alpha,
        seed: req.seed,
        ..SynthConfig::default()
    })?
    .to_f32_precision();
    let (train_split, test) = leave_one_domain_out(&store, &req.holdout)?;
    let sources = sample_few_shot(&train_split, 16, req.seed)?;
    let cfg = TrainConfig {
        layout: req.layout,
        lambda_max: req.lambda,
        epochs: req.epochs,
        seed: req.seed,
        holdout_domain: req.holdout.clone(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let (encoder, tokens) = cfg.frozen_model(&store)?;
    let run = train_with(&cfg, &sources, &encoder, &tokens, |_| Ok(()))?;
    let eval = evaluate(&run, &test, &tokens, &encoder)?;
    let probe = domain_probe(&run, &sources, &tokens, &encoder)?;
    Ok(TrainSummary {
        class_loss: run.history.iter().map(|h| h.class_loss).collect(),
        domain_loss: run.history.iter().map(|h| h.domain_loss).collect(),
        target_accuracy: eval.accuracy.value,
        per_class_accuracy: eval.per_class.iter().map(|a| a.value).collect(),
        domain_probe: probe.value,
        clamp_events: run.history.iter().map(|h| h.clamp_events).sum(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LayoutView {
    pub class_rows: Vec<bool>,
    pub domain_rows: Vec<bool>,
    /// (training progress, lambda) pairs.
    pub lambda_curve: Vec<(f64, f64)>,
}

pub fn layout_view(layout: Layout, m: usize, schedule: Schedule, lambda_max: f64, samples: usize) -> Result<LayoutView> {
    if samples < 2 {
        return Err(Error::invalid("need at least 2 schedule samples"));
    }
    let lambda_curve = (0..samples)
        .map(|i| {
            let p = i as f64 / (samples - 1) as f64;
            lambda_at(schedule, lambda_max, p).map(|l| (p, l))
        })
        .collect::<Result<_>>()?;
    Ok(LayoutView {
        class_rows: update_mask(layout, PassKind::ClassPass, m)?,
        domain_rows: update_mask(layout, PassKind::DomainPass, m)?,
        lambda_curve,
    })
}
