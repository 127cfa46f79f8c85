mod common;

use dicoop::data::{synth_generate, FeatureRecord, FeatureStore, SynthConfig};
use dicoop::encoder::FrozenTextEncoder;
use dicoop::error::Error;
use dicoop::objective::{batch_pass, PassExample};
use dicoop::prompt::{Layout, PassKind, PromptContext, TokenTable};
use dicoop::rng::KeyedStream;
use dicoop::trainer::{train, train_with, Schedule, TrainConfig};
use nalgebra::DMatrix;

fn fixture(seed: u64) -> (FeatureStore, TokenTable, FrozenTextEncoder, Vec<FeatureRecord>) {
    let store = synth_generate(&common::small_synth(seed)).unwrap();
    let tokens = TokenTable::generate(store.class_names(), store.domain_names(), 8, seed).unwrap();
    let enc = FrozenTextEncoder::new(5, 8, 8, seed).unwrap();
    let records = common::source_records(&store, 0);
    (store, tokens, enc, records)
}

fn random_context(seed: u64, layout: Layout) -> PromptContext {
    let mut s = KeyedStream::new(seed, "test-context", 0);
    PromptContext::from_values(DMatrix::from_fn(4, 8, |_, _| 0.3 * s.normal()), layout).unwrap()
}

#[test]
fn zero_lambda_step_is_the_class_pass_alone() {
    for layout in Layout::ALL {
        let (_, tokens, enc, records) = fixture(1);
        let ctx = random_context(1, layout);
        let batch: Vec<&FeatureRecord> = records.iter().take(7).collect();
        let step = dicoop::trainer::train_step(&ctx, &batch, &tokens, &enc, &[1, 2], 0.07, 0.0, 0.05).unwrap();

        let examples: Vec<PassExample<'_>> = batch
            .iter()
            .map(|r| PassExample {
                feature: &r.feature,
                label: r.class_id,
            })
            .collect();
        let g = batch_pass(&ctx, &tokens, &enc, &examples, PassKind::ClassPass, &[0, 1, 2], 0.07)
            .unwrap()
            .grad_context;
        let mask = ctx.mask(PassKind::ClassPass);
        let mut expected = ctx.values().clone();
        for i in 0..4 {
            if mask[i] {
                for j in 0..8 {
                    expected[(i, j)] -= 0.05 * g[(i, j)];
                }
            }
        }
        let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(step.context.values()), bits(&expected), "{layout}");
        if layout == Layout::Dfp {
            for i in 0..2 {
                assert_eq!(step.context.values().row(i), ctx.values().row(i));
            }
        }
    }
}

#[test]
fn shared_single_record_step_follows_the_combined_gradient() {
    let (_, tokens, enc, records) = fixture(2);
    let ctx = random_context(2, Layout::Scp);
    let batch = [&records[5]];
    let step = dicoop::trainer::train_step(&ctx, &batch, &tokens, &enc, &[1, 2], 0.3, 1.0, 0.05).unwrap();
    let grad = common::combined_gradient(ctx.values(), &tokens, &enc, &batch, &[1, 2], 0.3, 1.0);
    let delta = step.context.values() - ctx.values();
    assert!((delta + grad * 0.05).amax() <= 1e-12);
    assert!((&step.class_delta + &step.domain_delta - (step.context.values() - ctx.values())).amax() <= 1e-15);
}

#[test]
fn split_masks_partition_every_update() {
    for layout in [Layout::Dfp, Layout::Cfp] {
        let (_, tokens, enc, records) = fixture(3);
        let ctx = random_context(3, layout);
        let batch: Vec<&FeatureRecord> = records.iter().collect();
        let step = dicoop::trainer::train_step(&ctx, &batch, &tokens, &enc, &[1, 2], 0.07, 1.0, 0.05).unwrap();
        let class_mask = ctx.mask(PassKind::ClassPass);
        for i in 0..4 {
            let (own, other) = if class_mask[i] {
                (&step.class_delta, &step.domain_delta)
            } else {
                (&step.domain_delta, &step.class_delta)
            };
            assert!(other.row(i).iter().all(|v| *v == 0.0), "{layout} row {i}");
            for j in 0..8 {
                assert_eq!(step.context.values()[(i, j)], ctx.values()[(i, j)] + own[(i, j)]);
            }
        }
    }
}

fn tiny_config(layout: Layout, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        layout,
        m: 4,
        d: 8,
        dim: 8,
        lambda_max: lambda,
        epochs: 30,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (store, ..) = fixture(4);
    let cfg = TrainConfig {
        schedule: Schedule::DannRamp,
        ..tiny_config(Layout::Cfp, 1.0, 4)
    };
    let a = train(&cfg, &store).unwrap();
    let b = train(&cfg, &store).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.history.len(), cfg.epochs);
    assert!(a
        .history
        .iter()
        .all(|h| h.class_loss.is_finite() && h.domain_loss.is_finite() && h.combined_loss.is_finite()));
    assert_eq!(a.history[0].lambda, 0.0);
    assert!(a.history.windows(2).all(|w| w[0].lambda < w[1].lambda));
}

#[test]
fn encoder_and_tokens_stay_frozen() {
    let (store, tokens, enc, _) = fixture(5);
    let (enc_before, tokens_before) = (enc.clone(), tokens.clone());
    let cfg = tiny_config(Layout::Dfp, 1.0, 5);
    let run = train_with(&cfg, &store, &enc, &tokens, |_| Ok(())).unwrap();
    assert_eq!(enc, enc_before);
    assert_eq!(tokens, tokens_before);
    assert_ne!(run.final_context, PromptContext::new(4, 8, Layout::Dfp, 5).unwrap());
}

#[test]
fn one_source_domain_is_a_setup_error() {
    let store = synth_generate(&SynthConfig {
        domains: 2,
        ..common::small_synth(6)
    })
    .unwrap();
    let err = train(&tiny_config(Layout::Dfp, 1.0, 6), &store).unwrap_err();
    assert!(matches!(err, Error::Setup(_)), "{err}");
}

#[test]
fn class_loss_falls_without_the_adversary() {
    let store = synth_generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig {
        lambda_max: 0.0,
        ..TrainConfig::default()
    };
    let run = train(&cfg, &store).unwrap();
    let tenth = cfg.epochs / 10;
    let mean = |h: &[dicoop::trainer::EpochRecord]| h.iter().map(|r| r.class_loss).sum::<f64>() / h.len() as f64;
    let first = mean(&run.history[..tenth]);
    let last = mean(&run.history[cfg.epochs - tenth..]);
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn reversal_does_not_lower_the_domain_loss() {
    let mut holds = 0;
    for seed in 0..10 {
        let store = synth_generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let final_domain_loss = |lambda: f64| {
            let cfg = TrainConfig {
                lambda_max: lambda,
                seed,
                ..TrainConfig::default()
            };
            train(&cfg, &store).unwrap().history.last().unwrap().domain_loss
        };
        holds += usize::from(final_domain_loss(1.0) >= final_domain_loss(0.0));
    }
    assert!(holds >= 8, "held in {holds}/10 seeds");
}
