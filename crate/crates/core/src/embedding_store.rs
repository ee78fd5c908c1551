//! Labeled example representations, the BPEM file format, synthetic data and
//! k-shot subsampling.
//!
//! A BPEM file is `"BPEM" | version u32 = 1 | M u64 | D u64 | M*D f32`, all
//! little-endian and row-major. Labels, relation names and optional token
//! records live in a JSON sidecar next to it (`<stem>.meta.json`), which
//! keeps the binary payload memory-mappable.
//!
//! Vectors are held as `f64` in memory but are always f32-representable:
//! [`EmbeddingSet::new`] rounds every entry through `f32`, so saving and
//! loading is bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

pub const MAGIC: &[u8; 4] = b"BPEM";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 8;

/// Tokenized example with half-open subject and object spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub tokens: Vec<String>,
    pub subject: [usize; 2],
    pub object: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Array2<f64>,
    labels: Vec<usize>,
    relation_names: Vec<String>,
    tokens: Option<Vec<TokenRecord>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    labels: Vec<usize>,
    relation_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<TokenRecord>>,
}

impl EmbeddingSet {
    /// Validates the set invariants and rounds vectors to f32 precision.
    pub fn new(
        vectors: Array2<f64>,
        labels: Vec<usize>,
        relation_names: Vec<String>,
        tokens: Option<Vec<TokenRecord>>,
    ) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::Inconsistent("dimension must be positive".into()));
        }
        if labels.len() != vectors.nrows() {
            return Err(Error::Inconsistent(format!(
                "{} labels for {} rows",
                labels.len(),
                vectors.nrows()
            )));
        }
        if let Some(tokens) = &tokens {
            if tokens.len() != labels.len() {
                return Err(Error::Inconsistent(format!(
                    "{} token records for {} rows",
                    tokens.len(),
                    labels.len()
                )));
            }
        }
        check_finite(&vectors)?;
        check_labels(&labels, relation_names.len())?;
        let vectors = vectors.mapv(|v| v as f32 as f64);
        Ok(Self {
            vectors,
            labels,
            relation_names,
            tokens,
        })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn tokens(&self) -> Option<&[TokenRecord]> {
        self.tokens.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_relations(&self) -> usize {
        self.relation_names.len()
    }

    /// Row indices grouped by class, each group in ascending row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_relations()];
        for (row, &label) in self.labels.iter().enumerate() {
            groups[label].push(row);
        }
        groups
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            vectors: self.vectors.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            relation_names: self.relation_names.clone(),
            tokens: self
                .tokens
                .as_ref()
                .map(|t| rows.iter().map(|&r| t[r].clone()).collect()),
        }
    }

    /// Same labels and metadata with replaced vectors (e.g. transported particles).
    pub fn with_vectors(&self, vectors: Array2<f64>) -> Result<EmbeddingSet> {
        EmbeddingSet::new(
            vectors,
            self.labels.clone(),
            self.relation_names.clone(),
            self.tokens.clone(),
        )
    }

    /// Word tokens of every example, when present.
    pub fn token_stream(&self) -> Option<impl Iterator<Item = &str>> {
        self.tokens.as_ref().map(|records| {
            records
                .iter()
                .flat_map(|r| r.tokens.iter().map(String::as_str))
        })
    }
}

fn check_finite(vectors: &Array2<f64>) -> Result<()> {
    for ((row, col), v) in vectors.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], n_relations: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= n_relations) {
        Some(row) => Err(Error::LabelOutOfRange {
            row,
            label: labels[row],
            n_relations,
        }),
        None => Ok(()),
    }
}

/// `data.bpem` -> `data.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn save_embedding_set(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_finite(&set.vectors)?;
    write_matrix(&set.vectors, path)?;

    let sidecar = Sidecar {
        labels: set.labels.clone(),
        relation_names: set.relation_names.clone(),
        tokens: set.tokens.clone(),
    };
    let meta_path = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|source| Error::Metadata {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

fn write_matrix(matrix: &Array2<f64>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(matrix.nrows() as u64).to_le_bytes())?;
    write(&(matrix.ncols() as u64).to_le_bytes())?;
    for v in matrix.iter() {
        write(&(*v as f32).to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::MagicMismatch { found });
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u64_at(8);
    let cols = u64_at(16);
    let payload = (bytes.len() as u64) - HEADER_LEN;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Inconsistent(format!("header shape {rows}x{cols} overflows")))?;
    if payload < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload,
        });
    }
    if payload > expected {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after payload",
            payload - expected
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), values)
        .map_err(|e| Error::Inconsistent(e.to_string()))
}

pub fn load_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let vectors = read_matrix(path)?;
    check_finite(&vectors)?;

    let meta_path = sidecar_path(path);
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&raw).map_err(|source| Error::Metadata {
        path: meta_path.clone(),
        source,
    })?;
    EmbeddingSet::new(
        vectors,
        sidecar.labels,
        sidecar.relation_names,
        sidecar.tokens,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub within_class_stddev: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 19,
            per_class: 100,
            dim: 16,
            class_separation: 3.0,
            within_class_stddev: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
        }
        if self.per_class < 1 {
            return Err(Error::InvalidConfig("per_class must be at least 1".into()));
        }
        if self.dim < 1 {
            return Err(Error::InvalidConfig("dim must be at least 1".into()));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::InvalidConfig(
                "class_separation must be finite and non-negative".into(),
            ));
        }
        if !(self.within_class_stddev > 0.0) || !self.within_class_stddev.is_finite() {
            return Err(Error::InvalidConfig(
                "within_class_stddev must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn synthetic_relation_name(class: usize) -> String {
    format!("relation_{class:02}")
}

/// Planted class centers for a synthetic config.
///
/// Class `c` sits on axis `(c / 2) % dim` with sign `(-1)^c`, on shell
/// `c / (2 * dim)` of radius `sep * (1 + 1.5 * shell)`, then moves by a
/// seeded jitter of norm at most `0.2 * sep`. Any two centers end up at least
/// `sep` apart.
pub fn synthetic_centers(config: &SynthConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    Ok(planted_centers(config, &mut rng))
}

fn planted_centers(config: &SynthConfig, rng: &mut impl Rng) -> Array2<f64> {
    let dim = config.dim;
    let sep = config.class_separation;
    let mut centers = Array2::zeros((config.n_classes, dim));
    for (class, mut center) in centers.outer_iter_mut().enumerate() {
        let axis = (class / 2) % dim;
        let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
        let shell = class / (2 * dim);
        center[axis] = sign * sep * (1.0 + 1.5 * shell as f64);

        let direction: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = direction.dot(&direction).sqrt();
        let radius = 0.2 * sep * rng.random::<f64>();
        if norm > 0.0 {
            center.scaled_add(radius / norm, &direction);
        }
    }
    centers
}

/// Isotropic Gaussian classes around [`synthetic_centers`], class-major row order.
pub fn generate_synthetic_set(config: &SynthConfig) -> Result<EmbeddingSet> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let centers = planted_centers(config, &mut rng);

    let rows = config.n_classes * config.per_class;
    let mut vectors = Array2::zeros((rows, config.dim));
    let mut labels = Vec::with_capacity(rows);
    for (row, mut v) in vectors.outer_iter_mut().enumerate() {
        let class = row / config.per_class;
        for (x, c) in v.iter_mut().zip(centers.row(class)) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = c + config.within_class_stddev * noise;
        }
        labels.push(class);
    }
    let names = (0..config.n_classes).map(synthetic_relation_name).collect();
    EmbeddingSet::new(vectors, labels, names, None)
}

/// Up to `k` rows per class, drawn uniformly without replacement.
///
/// Classes with fewer than `k` members contribute all of them. Output rows
/// keep their original relative order.
pub fn kshot_sample(set: &EmbeddingSet, k: usize, seed: u64) -> EmbeddingSet {
    let mut rng = rng_from_seed(seed);
    let mut chosen = Vec::new();
    for members in set.class_indices() {
        if members.len() <= k {
            chosen.extend_from_slice(&members);
        } else {
            chosen.extend(
                rand::seq::index::sample(&mut rng, members.len(), k)
                    .into_iter()
                    .map(|i| members[i]),
            );
        }
    }
    chosen.sort_unstable();
    set.select(&chosen)
}

/// Like [`kshot_sample`], also returning the rows that were not picked.
pub fn kshot_with_rest(set: &EmbeddingSet, k: usize, seed: u64) -> (EmbeddingSet, EmbeddingSet) {
    let mut rng = rng_from_seed(seed);
    let mut picked = vec![false; set.len()];
    for members in set.class_indices() {
        if members.len() <= k {
            members.iter().for_each(|&r| picked[r] = true);
        } else {
            for i in rand::seq::index::sample(&mut rng, members.len(), k) {
                picked[members[i]] = true;
            }
        }
    }
    let (chosen, rest): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&r| picked[r]);
    (set.select(&chosen), set.select(&rest))
}

/// Stratified split: `floor(n_c * fraction)` rows of every class go to the
/// held-out part, the rest to the pool. Returns `(pool, held_out)`.
pub fn stratified_split(
    set: &EmbeddingSet,
    fraction: f64,
    seed: u64,
) -> Result<(EmbeddingSet, EmbeddingSet)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut pool = Vec::new();
    let mut held = Vec::new();
    for members in set.class_indices() {
        let n_held = (members.len() as f64 * fraction).floor() as usize;
        let picked = rand::seq::index::sample(&mut rng, members.len(), n_held).into_vec();
        let mut is_held = vec![false; members.len()];
        for i in picked {
            is_held[i] = true;
        }
        for (i, &row) in members.iter().enumerate() {
            if is_held[i] {
                held.push(row);
            } else {
                pool.push(row);
            }
        }
    }
    pool.sort_unstable();
    held.sort_unstable();
    Ok((set.select(&pool), set.select(&held)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_set() -> EmbeddingSet {
        EmbeddingSet::new(
            array![[0.1, 0.2], [1.0, -3.5], [2.25, 7.0]],
            vec![0, 1, 1],
            vec!["a".into(), "b".into()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bpem");
        let set = small_set();
        save_embedding_set(&set, &path).unwrap();
        assert!(dir.path().join("set.meta.json").exists());
        assert_eq!(load_embedding_set(&path).unwrap(), set);
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bpem");
        let set = EmbeddingSet::new(Array2::zeros((0, 5)), vec![], vec!["x".into()], None).unwrap();
        save_embedding_set(&set, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), HEADER_LEN);
        let back = load_embedding_set(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 5);
        assert_eq!(back.relation_names(), ["x"]);
    }

    #[test]
    fn tokens_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.bpem");
        let record = TokenRecord {
            tokens: vec!["the".into(), "launcher".into(), "system".into()],
            subject: [1, 2],
            object: [2, 3],
        };
        let set = EmbeddingSet::new(array![[1.0]], vec![0], vec!["r".into()], Some(vec![record]))
            .unwrap();
        save_embedding_set(&set, &path).unwrap();
        assert_eq!(load_embedding_set(&path).unwrap(), set);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bpem");
        let set = EmbeddingSet::new(
            Array2::ones((10, 3)),
            vec![0; 10],
            vec!["only".into()],
            None,
        )
        .unwrap();
        save_embedding_set(&set, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3 * 4]).unwrap();
        assert!(matches!(
            load_embedding_set(&path),
            Err(Error::TruncatedPayload {
                expected: 120,
                found: 108
            })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bpem");
        save_embedding_set(&small_set(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_embedding_set(&path),
            Err(Error::MagicMismatch { found }) if &found == b"XPEM"
        ));
    }

    #[test]
    fn label_out_of_range_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.bpem");
        let names: Vec<String> = (0..19).map(synthetic_relation_name).collect();
        let set =
            EmbeddingSet::new(Array2::zeros((2, 2)), vec![0, 18], names.clone(), None).unwrap();
        save_embedding_set(&set, &path).unwrap();
        let meta = serde_json::json!({ "labels": [0, 19], "relation_names": names });
        fs::write(sidecar_path(&path), meta.to_string()).unwrap();
        assert!(matches!(
            load_embedding_set(&path),
            Err(Error::LabelOutOfRange {
                row: 1,
                label: 19,
                n_relations: 19
            })
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.bpem");
        save_embedding_set(&small_set(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let at = HEADER_LEN as usize + 4 * 3;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_embedding_set(&path),
            Err(Error::NonFiniteValue { row: 1, col: 1 })
        ));
    }

    #[test]
    fn nan_is_rejected_before_write() {
        let mut set = small_set();
        set.vectors[[0, 1]] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("never.bpem");
        assert!(matches!(
            save_embedding_set(&set, &path),
            Err(Error::NonFiniteValue { row: 0, col: 1 })
        ));
        assert!(!path.exists());
    }

    #[test]
    fn constructor_enforces_invariants() {
        assert!(matches!(
            EmbeddingSet::new(array![[f64::INFINITY]], vec![0], vec!["a".into()], None),
            Err(Error::NonFiniteValue { .. })
        ));
        assert!(matches!(
            EmbeddingSet::new(array![[1.0]], vec![1], vec!["a".into()], None),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            EmbeddingSet::new(array![[1.0]], vec![], vec!["a".into()], None),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn synthetic_class_means_near_planted_centers() {
        let config = SynthConfig {
            n_classes: 2,
            per_class: 100,
            dim: 2,
            class_separation: 10.0,
            within_class_stddev: 1.0,
            seed: 7,
        };
        let set = generate_synthetic_set(&config).unwrap();
        let centers = synthetic_centers(&config).unwrap();
        for (class, members) in set.class_indices().iter().enumerate() {
            let mean = set
                .vectors()
                .select(Axis(0), members)
                .mean_axis(Axis(0))
                .unwrap();
            for (m, c) in mean.iter().zip(centers.row(class)) {
                assert!((m - c).abs() < 0.4, "class {class}: mean {m} vs center {c}");
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_counts_rows() {
        let config = SynthConfig {
            n_classes: 5,
            per_class: 1,
            dim: 3,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate_synthetic_set(&config).unwrap();
        let b = generate_synthetic_set(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn synthetic_centers_respect_separation() {
        for (n_classes, dim) in [(19, 16), (7, 1), (40, 3)] {
            let config = SynthConfig {
                n_classes,
                dim,
                class_separation: 3.0,
                seed: 5,
                ..SynthConfig::default()
            };
            let centers = synthetic_centers(&config).unwrap();
            for i in 0..n_classes {
                for j in i + 1..n_classes {
                    let d = &centers.row(i) - &centers.row(j);
                    assert!(d.dot(&d).sqrt() >= 3.0, "classes {i},{j} too close");
                }
            }
        }
    }

    #[test]
    fn synth_config_validation() {
        let bad = SynthConfig {
            within_class_stddev: -1.0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            n_classes: 1,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kshot_counts() {
        let config = SynthConfig {
            n_classes: 19,
            per_class: 20,
            dim: 4,
            seed: 3,
            ..SynthConfig::default()
        };
        let set = generate_synthetic_set(&config).unwrap();
        assert_eq!(kshot_sample(&set, 16, 1).len(), 304);
        let empty = kshot_sample(&set, 0, 1);
        assert!(empty.is_empty());
        assert_eq!(empty.relation_names(), set.relation_names());
        assert_eq!(kshot_sample(&set, 5, 9), kshot_sample(&set, 5, 9));
    }

    #[test]
    fn kshot_keeps_small_classes_whole() {
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1];
        let vectors = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let set = EmbeddingSet::new(vectors, labels, vec!["a".into(), "b".into()], None).unwrap();
        let sampled = kshot_sample(&set, 5, 42);
        let groups = sampled.class_indices();
        assert_eq!(groups[0].len(), 3);
        assert_eq!(groups[1].len(), 5);
        // the three class-0 rows are exactly the original ones
        let class0: Vec<f64> = groups[0].iter().map(|&r| sampled.row(r)[0]).collect();
        assert_eq!(class0, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn kshot_rest_is_the_complement() {
        let set = generate_synthetic_set(&SynthConfig {
            n_classes: 4,
            per_class: 9,
            dim: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let (picked, rest) = kshot_with_rest(&set, 3, 12);
        assert_eq!(picked, kshot_sample(&set, 3, 12));
        assert_eq!(picked.len() + rest.len(), set.len());
        for g in rest.class_indices() {
            assert_eq!(g.len(), 6);
        }
    }

    #[test]
    fn stratified_split_partitions_rows() {
        let set = generate_synthetic_set(&SynthConfig {
            n_classes: 3,
            per_class: 10,
            dim: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let (pool, held) = stratified_split(&set, 0.3, 4).unwrap();
        assert_eq!(pool.len(), 21);
        assert_eq!(held.len(), 9);
        for g in held.class_indices() {
            assert_eq!(g.len(), 3);
        }
    }
}
