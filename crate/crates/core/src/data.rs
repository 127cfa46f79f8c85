//! Feature records, the synthetic multi-domain generator, the DCF1 feature
//! file format, leave-one-domain-out splitting and few-shot sampling.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng::{purpose, KeyedStream};

pub const MAGIC: [u8; 4] = *b"DCF1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
/// File name used when a data directory is given instead of a file.
pub const DEFAULT_FEATURE_FILE: &str = "features.dcf";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub feature: Vec<f64>,
    pub class_id: usize,
    pub domain_id: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    Export,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    records: Vec<FeatureRecord>,
    class_names: Vec<String>,
    domain_names: Vec<String>,
    dim: usize,
    source: DataSource,
}

impl FeatureStore {
    pub fn new(
        records: Vec<FeatureRecord>,
        class_names: Vec<String>,
        domain_names: Vec<String>,
        dim: usize,
        source: DataSource,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature width must be positive"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.feature.len() != dim {
                return Err(Error::invalid(format!(
                    "record {i} has width {}, store width is {dim}",
                    r.feature.len()
                )));
            }
            if r.class_id >= class_names.len() || r.domain_id >= domain_names.len() {
                return Err(Error::invalid(format!("record {i} has an id without a name")));
            }
            let norm = r.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("record {i} is not unit norm ({norm})")));
            }
        }
        Ok(Self {
            records,
            class_names,
            domain_names,
            dim,
            source,
        })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> DataSource {
        self.source
    }

    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.domain_names.iter().position(|n| n == name)
    }

    /// Domain ids that have at least one record, ascending.
    pub fn present_domains(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.records.iter().map(|r| r.domain_id).collect();
        set.into_iter().collect()
    }

    pub fn cell_count(&self, class_id: usize, domain_id: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.class_id == class_id && r.domain_id == domain_id)
            .count()
    }

    fn with_records(&self, records: Vec<FeatureRecord>) -> Self {
        Self {
            records,
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            dim: self.dim,
            source: self.source,
        }
    }

    /// The store as it reads back from a feature file: every coordinate rounded
    /// to 32-bit and widened again.
    pub fn to_f32_precision(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| FeatureRecord {
                feature: r.feature.iter().map(|x| *x as f32 as f64).collect(),
                ..r.clone()
            })
            .collect();
        self.with_records(records)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    pub shots_per_cell: usize,
    pub dim: usize,
    /// Domain-shift strength.
    pub alpha: f64,
    /// Noise scale.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 7,
            domains: 4,
            shots_per_cell: 16,
            dim: 64,
            alpha: 0.8,
            sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.domains < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes and 2 domains"));
        }
        if self.shots_per_cell == 0 || self.dim == 0 {
            return Err(Error::invalid("shots_per_cell and dim must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::invalid("alpha and sigma must be non-negative"));
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Setup(format!("cannot normalize a vector of norm {norm}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

fn unit_gaussian(seed: u64, label: &str, index: u64, dim: usize) -> Result<Vec<f64>> {
    let mut v = KeyedStream::new(seed, label, index).normal_vec(dim, 1.0);
    normalize(&mut v)?;
    Ok(v)
}

/// Each record is `normalize(c_k + alpha * s_p + sigma * eps)` with class
/// prototypes `c_k` and domain shifts `s_p` uniform on the unit sphere.
pub fn synth_generate(cfg: &SynthConfig) -> Result<FeatureStore> {
    cfg.validate()?;
    let prototypes = (0..cfg.classes)
        .map(|k| unit_gaussian(cfg.seed, purpose::SYNTH_PROTOTYPES, k as u64, cfg.dim))
        .collect::<Result<Vec<_>>>()?;
    let shifts = (0..cfg.domains)
        .map(|p| unit_gaussian(cfg.seed, purpose::SYNTH_SHIFTS, p as u64, cfg.dim))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(cfg.classes * cfg.domains * cfg.shots_per_cell);
    for (k, proto) in prototypes.iter().enumerate() {
        for (p, shift) in shifts.iter().enumerate() {
            for _ in 0..cfg.shots_per_cell {
                let mut noise =
                    KeyedStream::new(cfg.seed, purpose::SYNTH_NOISE, records.len() as u64);
                let mut feature: Vec<f64> = proto
                    .iter()
                    .zip(shift)
                    .map(|(c, s)| c + cfg.alpha * s + cfg.sigma * noise.normal())
                    .collect();
                normalize(&mut feature)?;
                records.push(FeatureRecord {
                    feature,
                    class_id: k,
                    domain_id: p,
                });
            }
        }
    }
    FeatureStore::new(
        records,
        (0..cfg.classes).map(|k| format!("class_{k}")).collect(),
        (0..cfg.domains).map(|p| format!("domain_{p}")).collect(),
        cfg.dim,
        DataSource::Synth,
    )
}

/// Two-fold nearest-centroid domain classifier accuracy, a diagnostic for how
/// much domain signal the features carry. Records alternate between folds;
/// centroids fit on one fold classify the other.
pub fn domain_centroid_probe(store: &FeatureStore) -> f64 {
    let n_dom = store.domain_names.len();
    let mut sums = vec![vec![vec![0.0; store.dim]; n_dom]; 2];
    let mut counts = vec![vec![0usize; n_dom]; 2];
    for (i, r) in store.records.iter().enumerate() {
        counts[i % 2][r.domain_id] += 1;
        for (s, x) in sums[i % 2][r.domain_id].iter_mut().zip(&r.feature) {
            *s += x;
        }
    }
    let mut correct = 0;
    for (i, r) in store.records.iter().enumerate() {
        let fit = 1 - i % 2;
        let mut best = (f64::INFINITY, usize::MAX);
        for p in 0..n_dom {
            let n = counts[fit][p];
            if n == 0 {
                continue;
            }
            let dist: f64 = sums[fit][p]
                .iter()
                .zip(&r.feature)
                .map(|(s, x)| (s / n as f64 - x).powi(2))
                .sum();
            if dist < best.0 {
                best = (dist, p);
            }
        }
        correct += usize::from(best.1 == r.domain_id);
    }
    correct as f64 / store.records.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// DCF1 files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_root: Option<String>,
}

/// `features.dcf` -> `features.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Accepts either a feature file or a directory holding [`DEFAULT_FEATURE_FILE`].
pub fn resolve_feature_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DEFAULT_FEATURE_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn encode_features(store: &FeatureStore) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + store.len() * (8 + 4 * store.dim));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(store.dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(store.len(), "count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(store.class_names.len(), "class count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(store.domain_names.len(), "domain count")?.to_le_bytes());
    for r in &store.records {
        out.extend_from_slice(&(r.class_id as u32).to_le_bytes());
        out.extend_from_slice(&(r.domain_id as u32).to_le_bytes());
        for x in &r.feature {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn store_manifest(store: &FeatureStore) -> Manifest {
    Manifest {
        version: FORMAT_VERSION,
        dim: store.dim,
        count: store.len(),
        classes: store.class_names.clone(),
        domains: store.domain_names.clone(),
        source: store.source,
        model: None,
        dataset_root: None,
    }
}

/// Writes the binary file and its sidecar manifest.
pub fn write_features(store: &FeatureStore, path: &Path) -> Result<()> {
    let bytes = encode_features(store)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let manifest_file = manifest_path(path);
    let json = serde_json::to_string_pretty(&store_manifest(store)).map_err(|e| Error::Json {
        context: manifest_file.display().to_string(),
        source: e,
    })?;
    fs::write(&manifest_file, json + "\n").map_err(|e| Error::io(&manifest_file, e))
}

pub fn read_features(path: &Path) -> Result<FeatureStore> {
    let path = resolve_feature_path(path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest_file = manifest_path(&path);
    let text = fs::read_to_string(&manifest_file).map_err(|e| Error::io(&manifest_file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: manifest_file.display().to_string(),
        source: e,
    })?;
    decode_features(&bytes, &manifest)
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Parses a DCF1 payload. Every structural check runs before any record is
/// materialized.
pub fn decode_features(bytes: &[u8], manifest: &Manifest) -> Result<FeatureStore> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(FormatError::BadMagic { found }.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        }
        .into());
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version }.into());
    }
    if manifest.version != FORMAT_VERSION {
        return Err(FormatError::Manifest(format!("manifest version {}", manifest.version)).into());
    }
    let dim = u32_at(bytes, 8);
    let count = u32_at(bytes, 12) as usize;
    let n_classes = u32_at(bytes, 16);
    let n_domains = u32_at(bytes, 20);
    if dim as usize != manifest.dim || dim == 0 {
        return Err(FormatError::DimMismatch {
            header: dim,
            manifest: manifest.dim,
        }
        .into());
    }
    let record_len = 8 + 4 * dim as usize;
    let expected = count
        .checked_mul(record_len)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::CountMismatch {
            field: "payload records",
            header: count,
            found: (bytes.len() - HEADER_LEN) / record_len,
        }
        .into());
    }
    let checks = [
        ("count", count, manifest.count),
        ("classes", n_classes as usize, manifest.classes.len()),
        ("domains", n_domains as usize, manifest.domains.len()),
    ];
    for (field, header, found) in checks {
        if header != found {
            return Err(FormatError::CountMismatch { field, header, found }.into());
        }
    }
    for i in 0..count {
        let base = HEADER_LEN + i * record_len;
        for (field, offset, limit) in [("class_id", 0, n_classes), ("domain_id", 4, n_domains)] {
            let value = u32_at(bytes, base + offset);
            if value >= limit {
                return Err(FormatError::IdOutOfRange {
                    record: i,
                    field,
                    value,
                    limit,
                }
                .into());
            }
        }
    }

    let records = (0..count)
        .map(|i| {
            let base = HEADER_LEN + i * record_len;
            let feature = (0..dim as usize)
                .map(|j| {
                    let at = base + 8 + 4 * j;
                    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as f64
                })
                .collect();
            FeatureRecord {
                feature,
                class_id: u32_at(bytes, base) as usize,
                domain_id: u32_at(bytes, base + 4) as usize,
            }
        })
        .collect();
    FeatureStore::new(
        records,
        manifest.classes.clone(),
        manifest.domains.clone(),
        dim as usize,
        manifest.source,
    )
    .map_err(|e| FormatError::Manifest(e.to_string()).into())
}

// ---------------------------------------------------------------------------
// Splits

/// Returns `(train, test)`: the test store holds exactly the named domain.
/// Both keep the full name lists so ids stay globally consistent.
pub fn leave_one_domain_out(store: &FeatureStore, holdout: &str) -> Result<(FeatureStore, FeatureStore)> {
    let held = store.domain_id(holdout).ok_or_else(|| {
        Error::invalid(format!(
            "unknown holdout domain {holdout:?}; known domains: {}",
            store.domain_names.join(", ")
        ))
    })?;
    let (test, train): (Vec<_>, Vec<_>) = store
        .records
        .iter()
        .cloned()
        .partition(|r| r.domain_id == held);
    Ok((store.with_records(train), store.with_records(test)))
}

/// Draws exactly `n` records per (class, domain) cell without replacement.
///
/// Cells range over all classes and over the domains that have records, so a
/// training split with its holdout removed is sampled only on source domains.
/// Selected records keep their original order.
pub fn sample_few_shot(store: &FeatureStore, n: usize, seed: u64) -> Result<FeatureStore> {
    if n == 0 {
        return Err(Error::invalid("few-shot count must be positive"));
    }
    let n_dom = store.domain_names.len();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); store.class_names.len() * n_dom];
    for (i, r) in store.records.iter().enumerate() {
        cells[r.class_id * n_dom + r.domain_id].push(i);
    }
    let mut chosen = Vec::new();
    for domain in store.present_domains() {
        for class in 0..store.class_names.len() {
            let cell_index = class * n_dom + domain;
            let members = &mut cells[cell_index];
            if members.len() < n {
                return Err(Error::InsufficientData {
                    class: store.class_names[class].clone(),
                    domain: store.domain_names[domain].clone(),
                    available: members.len(),
                    requested: n,
                });
            }
            let mut stream = KeyedStream::new(seed, purpose::FEW_SHOT, cell_index as u64);
            // Partial Fisher-Yates: the first n slots end up a uniform sample.
            for i in 0..n {
                let j = i + stream.below(members.len() - i);
                members.swap(i, j);
            }
            chosen.extend_from_slice(&members[..n]);
        }
    }
    chosen.sort_unstable();
    Ok(store.with_records(chosen.into_iter().map(|i| store.records[i].clone()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            classes: 3,
            domains: 3,
            shots_per_cell: 4,
            dim: 8,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_store_counts() {
        let store = synth_generate(&SynthConfig::default()).unwrap();
        assert_eq!(store.len(), 448);
        for k in 0..7 {
            for p in 0..4 {
                assert_eq!(store.cell_count(k, p), 16);
            }
        }
        assert_eq!(store.class_names()[6], "class_6");
        assert_eq!(store.domain_names()[3], "domain_3");
        for r in store.records() {
            let norm = r.feature.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = synth_generate(&small_cfg(5)).unwrap();
        let b = synth_generate(&small_cfg(5)).unwrap();
        assert_eq!(encode_features(&a).unwrap(), encode_features(&b).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(&small_cfg(6)).unwrap());
    }

    #[test]
    fn invalid_synth_config() {
        for cfg in [
            SynthConfig { classes: 1, ..small_cfg(0) },
            SynthConfig { domains: 1, ..small_cfg(0) },
            SynthConfig { shots_per_cell: 0, ..small_cfg(0) },
            SynthConfig { alpha: -0.1, ..small_cfg(0) },
            SynthConfig { sigma: f64::NAN, ..small_cfg(0) },
        ] {
            assert!(synth_generate(&cfg).is_err());
        }
    }

    #[test]
    fn split_partitions_store() {
        let store = synth_generate(&SynthConfig::default()).unwrap();
        let (train, test) = leave_one_domain_out(&store, "domain_2").unwrap();
        assert_eq!(train.len() + test.len(), store.len());
        assert!(test.records().iter().all(|r| r.domain_id == 2));
        assert_eq!(train.present_domains(), vec![0, 1, 3]);
        assert_eq!(train.domain_names(), store.domain_names());
        assert_eq!(test.domain_names(), store.domain_names());
        assert!(matches!(
            leave_one_domain_out(&store, "nonexistent"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn few_shot_counts() {
        let store = synth_generate(&SynthConfig::default()).unwrap();
        let (train, _) = leave_one_domain_out(&store, "domain_0").unwrap();
        let few = sample_few_shot(&train, 16, 1).unwrap();
        assert_eq!(few.len(), 336);
        let few = sample_few_shot(&train, 3, 1).unwrap();
        assert_eq!(few.len(), 7 * 3 * 3);
        for k in 0..7 {
            for p in 1..4 {
                assert_eq!(few.cell_count(k, p), 3);
            }
        }
        assert_eq!(few, sample_few_shot(&train, 3, 1).unwrap());
        assert_ne!(few, sample_few_shot(&train, 3, 2).unwrap());
    }

    #[test]
    fn few_shot_identity_and_shortage() {
        let store = synth_generate(&SynthConfig { shots_per_cell: 1, ..small_cfg(2) }).unwrap();
        assert_eq!(sample_few_shot(&store, 1, 9).unwrap(), store);
        let store = synth_generate(&SynthConfig::default()).unwrap();
        match sample_few_shot(&store, 17, 0) {
            Err(Error::InsufficientData {
                available: 16,
                requested: 17,
                ..
            }) => {}
            other => panic!("expected insufficient data, got {other:?}"),
        }
    }

    #[test]
    fn few_shot_samples_without_replacement() {
        let store = synth_generate(&small_cfg(3)).unwrap();
        let few = sample_few_shot(&store, 4, 0).unwrap();
        assert_eq!(few, store);
        let few = sample_few_shot(&store, 2, 0).unwrap();
        for (a, b) in few.records().iter().zip(few.records().iter().skip(1)) {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn manifest_path_replaces_extension() {
        assert_eq!(
            manifest_path(Path::new("out/features.dcf")),
            PathBuf::from("out/features.manifest.json")
        );
    }
}
