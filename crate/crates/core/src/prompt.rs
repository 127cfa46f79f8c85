//! Learnable context vectors, prompt layouts and prompt assembly.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, KeyedStream};

/// Standard deviation of the Gaussian used to initialize context vectors.
pub const CONTEXT_INIT_STD: f64 = 0.02;

/// How the context tokens are shared between the class and domain objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Shared context: every token is trained by both passes.
    Scp,
    /// Domain-first: first half domain tokens, second half class tokens.
    Dfp,
    /// Class-first: first half class tokens, second half domain tokens.
    Cfp,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Scp, Layout::Dfp, Layout::Cfp];

    pub fn is_split(self) -> bool {
        !matches!(self, Layout::Scp)
    }

    pub fn check_token_count(self, m: usize) -> Result<()> {
        if self.is_split() && !m.is_multiple_of(2) {
            return Err(Error::OddSplit { layout: self, m });
        }
        Ok(())
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Scp => "scp",
            Layout::Dfp => "dfp",
            Layout::Cfp => "cfp",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scp" => Ok(Layout::Scp),
            "dfp" => Ok(Layout::Dfp),
            "cfp" => Ok(Layout::Cfp),
            other => Err(Error::invalid(format!(
                "unknown layout {other:?} (expected scp, dfp or cfp)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PassKind {
    ClassPass,
    DomainPass,
}

/// Which context rows a pass may update. `true` marks a trainable row.
///
/// The split is fixed at exactly half of the tokens.
pub fn update_mask(layout: Layout, pass: PassKind, m: usize) -> Result<Vec<bool>> {
    layout.check_token_count(m)?;
    let half = m / 2;
    let first_half = |i: usize| i < half;
    let mask = match (layout, pass) {
        (Layout::Scp, _) => vec![true; m],
        (Layout::Dfp, PassKind::DomainPass) | (Layout::Cfp, PassKind::ClassPass) => {
            (0..m).map(first_half).collect()
        }
        (Layout::Dfp, PassKind::ClassPass) | (Layout::Cfp, PassKind::DomainPass) => {
            (0..m).map(|i| !first_half(i)).collect()
        }
    };
    Ok(mask)
}

/// The M x d matrix of learnable context vectors plus its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContextRepr", into = "ContextRepr")]
pub struct PromptContext {
    values: DMatrix<f64>,
    layout: Layout,
}

impl PromptContext {
    pub fn new(m: usize, d: usize, layout: Layout, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!("context needs m >= 2 tokens, got {m}")));
        }
        if d == 0 {
            return Err(Error::invalid("embedding width d must be positive"));
        }
        layout.check_token_count(m)?;
        let mut stream = KeyedStream::new(seed, purpose::CONTEXT_INIT, 0);
        // Row-major fill; nalgebra storage is column-major.
        let mut values = DMatrix::zeros(m, d);
        for i in 0..m {
            for j in 0..d {
                values[(i, j)] = CONTEXT_INIT_STD * stream.normal();
            }
        }
        Ok(Self { values, layout })
    }

    pub fn from_values(values: DMatrix<f64>, layout: Layout) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() == 0 {
            return Err(Error::invalid(format!(
                "context must be at least 2 x 1, got {} x {}",
                values.nrows(),
                values.ncols()
            )));
        }
        layout.check_token_count(values.nrows())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("context entries must be finite"));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn mask(&self, pass: PassKind) -> Vec<bool> {
        update_mask(self.layout, pass, self.m()).expect("token count validated at construction")
    }
}

/// Concatenates the context rows with one class or domain token row.
pub fn assemble_prompt(context: &PromptContext, token: &[f64]) -> Result<DMatrix<f64>> {
    let (m, d) = (context.m(), context.d());
    if token.len() != d {
        return Err(Error::invalid(format!(
            "token width {} does not match context width {d}",
            token.len()
        )));
    }
    let mut seq = context.values.clone().insert_row(m, 0.0);
    seq.set_row(m, &RowDVector::from_row_slice(token));
    Ok(seq)
}

#[derive(Serialize, Deserialize)]
struct ContextRepr {
    layout: Layout,
    m: usize,
    d: usize,
    /// Row-major entries.
    values: Vec<f64>,
}

impl TryFrom<ContextRepr> for PromptContext {
    type Error = Error;

    fn try_from(r: ContextRepr) -> Result<Self> {
        if r.values.len() != r.m * r.d {
            return Err(Error::invalid(format!(
                "context has {} values, expected {} x {}",
                r.values.len(),
                r.m,
                r.d
            )));
        }
        PromptContext::from_values(DMatrix::from_row_slice(r.m, r.d, &r.values), r.layout)
    }
}

impl From<PromptContext> for ContextRepr {
    fn from(c: PromptContext) -> Self {
        let (m, d) = (c.m(), c.d());
        let values = (0..m)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| c.values[(i, j)])
            .collect();
        ContextRepr {
            layout: c.layout,
            m,
            d,
            values,
        }
    }
}

/// Frozen embeddings for class names and domain names, one row per name.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTable {
    class_embeddings: DMatrix<f64>,
    domain_embeddings: DMatrix<f64>,
    class_names: Vec<String>,
    domain_names: Vec<String>,
}

impl TokenTable {
    pub fn new(
        class_embeddings: DMatrix<f64>,
        domain_embeddings: DMatrix<f64>,
        class_names: Vec<String>,
        domain_names: Vec<String>,
    ) -> Result<Self> {
        if class_names.len() < 2 || domain_names.len() < 2 {
            return Err(Error::invalid(format!(
                "token table needs at least 2 classes and 2 domains, got {} and {}",
                class_names.len(),
                domain_names.len()
            )));
        }
        if class_embeddings.nrows() != class_names.len()
            || domain_embeddings.nrows() != domain_names.len()
        {
            return Err(Error::invalid("one embedding row is required per name"));
        }
        if class_embeddings.ncols() != domain_embeddings.ncols() || class_embeddings.ncols() == 0 {
            return Err(Error::invalid("class and domain embeddings must share a positive width"));
        }
        for (kind, names) in [("class", &class_names), ("domain", &domain_names)] {
            let unique: HashSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::invalid(format!("{kind} names must be unique")));
            }
        }
        if class_embeddings
            .iter()
            .chain(domain_embeddings.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("token embeddings must be finite"));
        }
        Ok(Self {
            class_embeddings,
            domain_embeddings,
            class_names,
            domain_names,
        })
    }

    /// Seeded standard-normal embeddings. Each row has its own random stream, so
    /// a name keeps its embedding when other names are added.
    pub fn generate(
        class_names: &[String],
        domain_names: &[String],
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("embedding width d must be positive"));
        }
        let rows = |label: &str, n: usize| {
            let mut mat = DMatrix::zeros(n, d);
            for i in 0..n {
                let mut stream = KeyedStream::new(seed, label, i as u64);
                for j in 0..d {
                    mat[(i, j)] = stream.normal();
                }
            }
            mat
        };
        Self::new(
            rows(purpose::CLASS_TOKENS, class_names.len()),
            rows(purpose::DOMAIN_TOKENS, domain_names.len()),
            class_names.to_vec(),
            domain_names.to_vec(),
        )
    }

    pub fn d(&self) -> usize {
        self.class_embeddings.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn class_embeddings(&self) -> &DMatrix<f64> {
        &self.class_embeddings
    }

    pub fn domain_embeddings(&self) -> &DMatrix<f64> {
        &self.domain_embeddings
    }

    /// Embedding row of class `k` or domain `p`, depending on the pass.
    pub fn token(&self, pass: PassKind, index: usize) -> Vec<f64> {
        let table = match pass {
            PassKind::ClassPass => &self.class_embeddings,
            PassKind::DomainPass => &self.domain_embeddings,
        };
        table.row(index).iter().copied().collect()
    }

    pub fn count(&self, pass: PassKind) -> usize {
        match pass {
            PassKind::ClassPass => self.class_names.len(),
            PassKind::DomainPass => self.domain_names.len(),
        }
    }
}
