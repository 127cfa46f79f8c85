//! Central finite-difference checks of the analytic gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::encoder::FrozenTextEncoder;
use crate::error::{Error, Result};
use crate::objective::{class_probs, pass_loss_and_grad, predict};
use crate::prompt::{assemble_prompt, Layout, PassKind, PromptContext, TokenTable};
use crate::rng::KeyedStream;

/// A check fails when any relative error exceeds this.
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    EncoderVjp,
    PassLoss,
}

/// Test fixture: perturbs one analytic gradient entry before comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub suite: Suite,
    pub case: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub eps: f64,
    pub encoder_cases: usize,
    pub pass_cases: usize,
    pub fault: Option<Fault>,
}

impl GradcheckOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            eps: 1e-6,
            encoder_cases: 100,
            pass_cases: 50,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryError {
    pub case: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub max_rel_error: f64,
    pub worst: Option<EntryError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub threshold: f64,
    pub suites: Vec<SuiteReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Central differences of a scalar function at every entry of `point`.
pub fn central_difference<F>(mut f: F, point: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DMatrix<f64>) -> Result<f64>,
{
    let mut probe = point.clone();
    let mut out = DMatrix::zeros(point.nrows(), point.ncols());
    for i in 0..point.nrows() {
        for j in 0..point.ncols() {
            let x = point[(i, j)];
            probe[(i, j)] = x + eps;
            let up = f(&probe)?;
            probe[(i, j)] = x - eps;
            let down = f(&probe)?;
            probe[(i, j)] = x;
            out[(i, j)] = (up - down) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Largest entry error scaled by the largest gradient magnitude of the case.
fn compare(case: usize, analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> EntryError {
    let scale = analytic.amax().max(numeric.amax()).max(f64::MIN_POSITIVE);
    let mut worst = EntryError {
        case,
        row: 0,
        col: 0,
        analytic: analytic[(0, 0)],
        numeric: numeric[(0, 0)],
        rel_error: -1.0,
    };
    for i in 0..analytic.nrows() {
        for j in 0..analytic.ncols() {
            let rel = (analytic[(i, j)] - numeric[(i, j)]).abs() / scale;
            if rel > worst.rel_error {
                worst = EntryError {
                    case,
                    row: i,
                    col: j,
                    analytic: analytic[(i, j)],
                    numeric: numeric[(i, j)],
                    rel_error: rel,
                };
            }
        }
    }
    worst
}

fn gaussian_matrix(stream: &mut KeyedStream, rows: usize, cols: usize, std_dev: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = std_dev * stream.normal();
        }
    }
    m
}

fn inject(fault: Option<Fault>, suite: Suite, case: usize, grad: &mut DMatrix<f64>) {
    if let Some(f) = fault.filter(|f| f.suite == suite && f.case == case) {
        if f.row < grad.nrows() && f.col < grad.ncols() {
            grad[(f.row, f.col)] += f.delta;
        }
    }
}

fn encoder_case(opts: &GradcheckOptions, case: usize) -> Result<EntryError> {
    let mut s = KeyedStream::new(opts.seed, "gradcheck-encoder", case as u64);
    let input_len = 2 + s.below(5);
    let d = 2 + s.below(7);
    let dim = if s.uniform() < 0.5 { d } else { 2 + s.below(7) };
    let enc = FrozenTextEncoder::new(input_len, d, dim, s.next_u64())?;
    let seq = gaussian_matrix(&mut s, input_len, d, 1.0);
    let upstream = DVector::from_vec(s.normal_vec(dim, 1.0));

    let mut analytic = enc.encode_vjp(&seq, &upstream)?;
    inject(opts.fault, Suite::EncoderVjp, case, &mut analytic);
    let numeric = central_difference(|x| Ok(upstream.dot(&enc.encode(x)?)), &seq, opts.eps)?;
    Ok(compare(case, &analytic, &numeric))
}

fn pass_case(opts: &GradcheckOptions, case: usize) -> Result<EntryError> {
    let mut s = KeyedStream::new(opts.seed, "gradcheck-pass", case as u64);
    let m = 2 * (1 + s.below(3));
    let d = 3 + s.below(6);
    let dim = if s.uniform() < 0.5 { d } else { 3 + s.below(6) };
    let n_classes = 2 + s.below(3);
    let n_domains = 2 + s.below(2);
    let pass = if s.uniform() < 0.5 {
        PassKind::ClassPass
    } else {
        PassKind::DomainPass
    };
    let temperature = [0.07, 0.3, 1.0][s.below(3)];
    let layout = Layout::ALL[s.below(3)];

    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}_{i}")).collect::<Vec<_>>();
    let tokens = TokenTable::generate(&names("class", n_classes), &names("domain", n_domains), d, s.next_u64())?;
    let enc = FrozenTextEncoder::new(m + 1, d, dim, s.next_u64())?;
    let values = gaussian_matrix(&mut s, m, d, 0.5);
    let context = PromptContext::from_values(values.clone(), layout)?;
    let mut image: Vec<f64> = s.normal_vec(dim, 1.0);
    let norm = image.iter().map(|x| x * x).sum::<f64>().sqrt();
    image.iter_mut().for_each(|x| *x /= norm);
    // The label is never the current prediction. A saturated softmax at the label
    // leaves gradients below what central differences can resolve.
    let feats = (0..tokens.count(pass))
        .map(|k| enc.encode(&assemble_prompt(&context, &tokens.token(pass, k))?))
        .collect::<Result<Vec<_>>>()?;
    let predicted = predict(&class_probs(&feats, &image, temperature)?)?;
    let label = (predicted + 1 + s.below(tokens.count(pass) - 1)) % tokens.count(pass);

    let mut analytic = pass_loss_and_grad(&context, &tokens, &enc, &image, label, pass, temperature)?.grad_context;
    inject(opts.fault, Suite::PassLoss, case, &mut analytic);
    let numeric = central_difference(
        |v| {
            let ctx = PromptContext::from_values(v.clone(), layout)?;
            Ok(pass_loss_and_grad(&ctx, &tokens, &enc, &image, label, pass, temperature)?.loss)
        },
        &values,
        opts.eps,
    )?;
    Ok(compare(case, &analytic, &numeric))
}

fn run_suite(
    opts: &GradcheckOptions,
    suite: Suite,
    cases: usize,
    check: fn(&GradcheckOptions, usize) -> Result<EntryError>,
) -> Result<SuiteReport> {
    let mut worst: Option<EntryError> = None;
    for case in 0..cases {
        let e = check(opts, case)?;
        if worst.as_ref().is_none_or(|w| e.rel_error > w.rel_error) {
            worst = Some(e);
        }
    }
    Ok(SuiteReport {
        suite,
        cases,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
    })
}

/// Runs the encoder-VJP and pass-loss suites. `passed` is false when any
/// relative error exceeds [`GRADCHECK_THRESHOLD`].
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.eps > 0.0) || !opts.eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {}", opts.eps)));
    }
    let suites = vec![
        run_suite(opts, Suite::EncoderVjp, opts.encoder_cases, encoder_case)?,
        run_suite(opts, Suite::PassLoss, opts.pass_cases, pass_case)?,
    ];
    let max_rel_error = suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed: opts.seed,
        eps: opts.eps,
        threshold: GRADCHECK_THRESHOLD,
        passed: max_rel_error <= GRADCHECK_THRESHOLD,
        max_rel_error,
        suites,
    })
}
