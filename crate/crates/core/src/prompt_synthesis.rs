//! Label and type prompt embeddings, and the prompt template.
//!
//! A label prompt is the frequency-weighted average of the word embeddings
//! of the words its relation label splits into. A type prompt is a latent
//! sample drawn uniformly from the transported particle set; subject and
//! object slots get independent draws.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{load_embedding_set, save_embedding_set, EmbeddingSet};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

pub const ENTITY_START: &str = "[E]";
pub const ENTITY_END: &str = "[/E]";
pub const MASK: &str = "[MASK]";
pub const SUBJECT_TYPE: &str = "[SUB-TYPE]";
pub const OBJECT_TYPE: &str = "[OBJ-TYPE]";
const RESERVED: [&str; 5] = [ENTITY_START, ENTITY_END, MASK, SUBJECT_TYPE, OBJECT_TYPE];

/// Add-alpha smoothing constant for word frequencies.
pub const SMOOTHING: f64 = 1.0;
const TRIGRAM_BUCKETS: u64 = 1 << 20;

/// Splits a relation label into its semantic words.
///
/// A trailing `(e1,e2)` / `(e2,e1)` direction marker is dropped, then the rest
/// is split on `-`, `:` and `_`.
pub fn disassemble_label(label: &str) -> Result<Vec<String>> {
    let mut core = label.trim();
    for suffix in ["(e1,e2)", "(e2,e1)"] {
        if let Some(stripped) = core.strip_suffix(suffix) {
            core = stripped;
            break;
        }
    }
    let mut pieces = vec![core.to_string()];
    for sep in ['-', ':', '_'] {
        pieces = pieces
            .iter()
            .flat_map(|p| p.split(sep).map(str::to_string))
            .collect();
    }
    let words: Vec<String> = pieces
        .into_iter()
        .map(|w| w.trim().to_string())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::EmptyAfterSplit(label.to_string()));
    }
    Ok(words)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticWordSet {
    pub relation_index: usize,
    words: Vec<String>,
    probs: Vec<f64>,
}

impl SemanticWordSet {
    pub fn new(relation_index: usize, words: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "relation {relation_index} has no semantic words"
            )));
        }
        if words.len() != probs.len() {
            return Err(Error::DimensionMismatch {
                expected: words.len(),
                got: probs.len(),
            });
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "word probabilities for relation {relation_index} are not a distribution"
            )));
        }
        Ok(Self {
            relation_index,
            words,
            probs,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Word distributions from case-insensitive corpus counts with add-one
/// smoothing; uniform when there is no corpus.
pub fn estimate_word_distribution<'a, I>(
    word_sets: &[Vec<String>],
    corpus: Option<I>,
) -> Result<Vec<SemanticWordSet>>
where
    I: IntoIterator<Item = &'a str>,
{
    let counts: Option<HashMap<String, usize>> = corpus.map(|tokens| {
        let mut counts = HashMap::new();
        for t in tokens {
            *counts.entry(t.to_lowercase()).or_insert(0) += 1;
        }
        counts
    });
    word_sets
        .iter()
        .enumerate()
        .map(|(r, words)| {
            let weights: Vec<f64> = words
                .iter()
                .map(|w| match &counts {
                    Some(c) => c.get(&w.to_lowercase()).copied().unwrap_or(0) as f64 + SMOOTHING,
                    None => 1.0,
                })
                .collect();
            let total: f64 = weights.iter().sum();
            SemanticWordSet::new(
                r,
                words.clone(),
                weights.into_iter().map(|w| w / total).collect(),
            )
        })
        .collect()
}

/// Word-embedding layer. Words missing from the vocabulary resolve to the
/// mean of their hashed character-trigram embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable {
    vocabulary: HashMap<String, usize>,
    matrix: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    words: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl WordEmbeddingTable {
    pub fn new(words: Vec<String>, matrix: Array2<f64>) -> Result<Self> {
        if words.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch {
                expected: words.len(),
                got: matrix.nrows(),
            });
        }
        if matrix.ncols() == 0 {
            return Err(Error::InvalidConfig(
                "word embeddings need a positive dimension".into(),
            ));
        }
        if let Some(((row, col), _)) = matrix.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row, col });
        }
        let vocabulary = words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        Ok(Self { vocabulary, matrix })
    }

    /// A table with no stored words; every lookup goes through trigram hashing.
    pub fn hashed(dim: usize) -> Self {
        Self {
            vocabulary: HashMap::new(),
            matrix: Array2::zeros((0, dim.max(1))),
        }
    }

    /// Reads `{"words": [...], "vectors": [[...], ...]}`.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: TableFile = serde_json::from_slice(&raw).map_err(|source| Error::Metadata {
            path: path.to_path_buf(),
            source,
        })?;
        let matrix = crate::serde_matrix::from_rows(file.vectors).map_err(Error::Inconsistent)?;
        Self::new(file.words, matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn lookup(&self, word: &str) -> Option<ArrayView1<'_, f64>> {
        self.vocabulary
            .get(word)
            .or_else(|| self.vocabulary.get(&word.to_lowercase()))
            .map(|&i| self.matrix.row(i))
    }

    pub fn resolve(&self, word: &str) -> Result<Array1<f64>> {
        if let Some(row) = self.lookup(word) {
            return Ok(row.to_owned());
        }
        trigram_embedding(word, self.dim())
    }
}

/// Mean of the bucket embeddings of the lowercased, `<`/`>`-padded word's
/// character trigrams. Bucket vectors are N(0, 1/dim) draws seeded by the
/// bucket id, so the result depends only on the word and the dimension.
pub fn trigram_embedding(word: &str, dim: usize) -> Result<Array1<f64>> {
    let lowered = word.trim().to_lowercase();
    if lowered.is_empty() || dim == 0 {
        return Err(Error::UnresolvableWord(word.to_string()));
    }
    let chars: Vec<char> = format!("<{lowered}>").chars().collect();
    let mut acc = Array1::zeros(dim);
    let trigrams: Vec<String> = chars.windows(3).map(|w| w.iter().collect()).collect();
    let scale = 1.0 / (dim as f64).sqrt();
    for tri in &trigrams {
        let bucket = derive_seed(0, &format!("trigram:{tri}")) % TRIGRAM_BUCKETS;
        let mut rng = rng_from_seed(derive_seed(bucket, "trigram-bucket"));
        for v in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += scale * z;
        }
    }
    Ok(acc / trigrams.len() as f64)
}

/// `sum_i probs[i] * e(words[i])`.
pub fn init_label_prompt(ws: &SemanticWordSet, table: &WordEmbeddingTable) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(table.dim());
    for (word, &p) in ws.words.iter().zip(&ws.probs) {
        let e = table.resolve(word)?;
        out.scaled_add(p, &e);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::UnresolvableWord(ws.words.join(" ")));
    }
    Ok(out)
}

/// One particle row chosen uniformly at random.
pub fn sample_latent(particles: ArrayView2<f64>, rng: &mut impl Rng) -> Result<Array1<f64>> {
    if particles.nrows() == 0 {
        return Err(Error::EmptyParticleSet);
    }
    let i = rng.random_range(0..particles.nrows());
    Ok(particles.row(i).to_owned())
}

/// The type prompt embedding is the latent sample itself, as an owned copy.
pub fn init_type_prompt(omega: ArrayView1<f64>) -> Array1<f64> {
    omega.to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TypePromptInit {
    /// Uniform draws from the transported particles.
    #[default]
    Latent,
    /// Zero-mean isotropic Gaussian matching the particles' second moment.
    Random,
    /// No type prompts at all.
    Absent,
}

impl FromStr for TypePromptInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "random" => Ok(Self::Random),
            "absent" | "none" => Ok(Self::Absent),
            other => Err(Error::InvalidConfig(format!(
                "unknown type prompt init {other:?}"
            ))),
        }
    }
}

impl fmt::Display for TypePromptInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Latent => "latent",
            Self::Random => "random",
            Self::Absent => "absent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypePrompts {
    #[serde(with = "crate::serde_matrix::vector")]
    pub subject: Array1<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    pub object: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPack {
    pub relation_names: Vec<String>,
    /// One row per relation.
    #[serde(with = "crate::serde_matrix")]
    pub label_prompts: Array2<f64>,
    pub type_prompts: Option<TypePrompts>,
    /// Class index -> label-word id. Label words are virtual tokens, one per class.
    pub verbalizer: Vec<usize>,
    pub omega_seed: u64,
    pub type_init: TypePromptInit,
}

impl PromptPack {
    pub fn n_relations(&self) -> usize {
        self.label_prompts.nrows()
    }

    pub fn dim(&self) -> usize {
        self.label_prompts.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.n_relations();
        if self.relation_names.len() != r {
            return Err(Error::LabelSpaceMismatch(format!(
                "{} relation names for {r} label prompts",
                self.relation_names.len()
            )));
        }
        let mut seen = vec![false; r];
        if self.verbalizer.len() != r {
            return Err(Error::LabelSpaceMismatch("verbalizer is not total".into()));
        }
        for &w in &self.verbalizer {
            if w >= r || std::mem::replace(&mut seen[w], true) {
                return Err(Error::LabelSpaceMismatch(
                    "verbalizer is not a bijection".into(),
                ));
            }
        }
        if !self.label_prompts.iter().all(|x| x.is_finite()) {
            return Err(Error::Inconsistent("non-finite label prompt".into()));
        }
        if let Some(t) = &self.type_prompts {
            if t.subject.len() != self.dim() || t.object.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    got: t.subject.len().min(t.object.len()),
                });
            }
            if !t
                .subject
                .iter()
                .chain(t.object.iter())
                .all(|x| x.is_finite())
            {
                return Err(Error::Inconsistent("non-finite type prompt".into()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PackMeta {
    verbalizer: Vec<usize>,
    omega_seed: u64,
    type_init: TypePromptInit,
    n_relations: usize,
}

fn pack_meta_path(path: &Path) -> PathBuf {
    path.with_extension("pack.json")
}

/// Writes the embeddings as a BPEM file (label prompts, then subject and
/// object type prompts when present) plus `<stem>.pack.json`.
pub fn save_prompt_pack(pack: &PromptPack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    pack.validate()?;
    let mut rows: Vec<ArrayView1<f64>> = pack.label_prompts.outer_iter().collect();
    let mut names = pack.relation_names.clone();
    if let Some(t) = &pack.type_prompts {
        rows.push(t.subject.view());
        rows.push(t.object.view());
        names.push(SUBJECT_TYPE.into());
        names.push(OBJECT_TYPE.into());
    }
    let matrix =
        ndarray::stack(ndarray::Axis(0), &rows).map_err(|e| Error::Inconsistent(e.to_string()))?;
    let labels = (0..names.len()).collect();
    save_embedding_set(&EmbeddingSet::new(matrix, labels, names, None)?, path)?;

    let meta = PackMeta {
        verbalizer: pack.verbalizer.clone(),
        omega_seed: pack.omega_seed,
        type_init: pack.type_init,
        n_relations: pack.n_relations(),
    };
    let meta_path = pack_meta_path(path);
    let json = serde_json::to_vec_pretty(&meta).map_err(|source| Error::Metadata {
        path: meta_path.clone(),
        source,
    })?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_prompt_pack(path: impl AsRef<Path>) -> Result<PromptPack> {
    let path = path.as_ref();
    let set = load_embedding_set(path)?;
    let meta_path = pack_meta_path(path);
    let raw = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PackMeta = serde_json::from_slice(&raw).map_err(|source| Error::Metadata {
        path: meta_path.clone(),
        source,
    })?;
    let r = meta.n_relations;
    let has_types = set.len() == r + 2;
    if set.len() != r && !has_types {
        return Err(Error::Inconsistent(format!(
            "prompt pack has {} rows for {r} relations",
            set.len()
        )));
    }
    let v = set.vectors();
    let pack = PromptPack {
        relation_names: set.relation_names()[..r].to_vec(),
        label_prompts: v.slice(ndarray::s![..r, ..]).to_owned(),
        type_prompts: has_types.then(|| TypePrompts {
            subject: v.row(r).to_owned(),
            object: v.row(r + 1).to_owned(),
        }),
        verbalizer: meta.verbalizer,
        omega_seed: meta.omega_seed,
        type_init: meta.type_init,
    };
    pack.validate()?;
    Ok(pack)
}

/// Draws a subject and an object type prompt according to `init`; `None`
/// for [`TypePromptInit::Absent`].
///
/// The random arm uses a zero-mean isotropic Gaussian whose per-coordinate
/// scale is the root mean square entry of the particles, so both arms start
/// with the same second moment.
pub fn draw_type_prompts(
    init: TypePromptInit,
    particles: ArrayView2<f64>,
    rng: &mut impl Rng,
) -> Result<Option<TypePrompts>> {
    if init == TypePromptInit::Absent {
        return Ok(None);
    }
    if particles.nrows() == 0 {
        return Err(Error::EmptyParticleSet);
    }
    let dim = particles.ncols();
    let mut draw = || -> Result<Array1<f64>> {
        match init {
            TypePromptInit::Latent => Ok(init_type_prompt(sample_latent(particles, rng)?.view())),
            _ => {
                let mean_sq = particles.iter().map(|v| v * v).sum::<f64>() / particles.len() as f64;
                let scale = mean_sq.sqrt();
                Ok((0..dim)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect())
            }
        }
    };
    let subject = draw()?;
    let object = draw()?;
    Ok(Some(TypePrompts { subject, object }))
}

/// Builds the prompt pack for `relation_names` from a word table and the
/// transported particles. All randomness comes from `seed`.
///
/// Embeddings are rounded to f32 so the pack survives a BPEM round trip
/// unchanged.
pub fn synthesize_prompts<'a, I>(
    relation_names: &[String],
    corpus: Option<I>,
    table: &WordEmbeddingTable,
    particles: ArrayView2<f64>,
    type_init: TypePromptInit,
    seed: u64,
) -> Result<PromptPack>
where
    I: IntoIterator<Item = &'a str>,
{
    let dim = table.dim();
    if particles.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: particles.ncols(),
        });
    }
    let word_sets = relation_names
        .iter()
        .map(|name| disassemble_label(name))
        .collect::<Result<Vec<_>>>()?;
    let distributions = estimate_word_distribution(&word_sets, corpus)?;
    let mut label_prompts = Array2::zeros((relation_names.len(), dim));
    for (mut row, ws) in label_prompts.outer_iter_mut().zip(&distributions) {
        row.assign(&init_label_prompt(ws, table)?);
    }

    let mut rng = rng_from_seed(seed);
    let type_prompts = draw_type_prompts(type_init, particles, &mut rng)?;

    let quantize = |v: f64| v as f32 as f64;
    let pack = PromptPack {
        relation_names: relation_names.to_vec(),
        label_prompts: label_prompts.mapv(quantize),
        type_prompts: type_prompts.map(|t| TypePrompts {
            subject: t.subject.mapv(quantize),
            object: t.object.mapv(quantize),
        }),
        verbalizer: (0..relation_names.len()).collect(),
        omega_seed: seed,
        type_init,
    };
    pack.validate()?;
    Ok(pack)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub tokens: Vec<String>,
    pub mask_index: usize,
    pub subject_type_index: usize,
    pub object_type_index: usize,
}

/// Wraps both entities in `[E] .. [/E]` and appends
/// `[SUB-TYPE] subject [MASK] [OBJ-TYPE] object`. Spans are half-open.
pub fn build_template(
    tokens: &[String],
    subject: [usize; 2],
    object: [usize; 2],
) -> Result<PromptTemplate> {
    let n = tokens.len();
    for (name, [start, end]) in [("subject", subject), ("object", object)] {
        if start >= end || end > n {
            return Err(Error::InvalidSpan(format!(
                "{name} span [{start}, {end}) in {n} tokens"
            )));
        }
    }
    if subject[0] < object[1] && object[0] < subject[1] {
        return Err(Error::InvalidSpan(format!(
            "subject {subject:?} overlaps object {object:?}"
        )));
    }
    if let Some(t) = tokens.iter().find(|t| RESERVED.contains(&t.as_str())) {
        return Err(Error::ReservedToken(t.clone()));
    }

    let mut out = Vec::with_capacity(n + 8 + (subject[1] - subject[0]) + (object[1] - object[0]));
    for (i, tok) in tokens.iter().enumerate() {
        if i == subject[0] || i == object[0] {
            out.push(ENTITY_START.to_string());
        }
        out.push(tok.clone());
        if i + 1 == subject[1] || i + 1 == object[1] {
            out.push(ENTITY_END.to_string());
        }
    }
    let subject_type_index = out.len();
    out.push(SUBJECT_TYPE.to_string());
    out.extend_from_slice(&tokens[subject[0]..subject[1]]);
    let mask_index = out.len();
    out.push(MASK.to_string());
    let object_type_index = out.len();
    out.push(OBJECT_TYPE.to_string());
    out.extend_from_slice(&tokens[object[0]..object[1]]);
    Ok(PromptTemplate {
        tokens: out,
        mask_index,
        subject_type_index,
        object_type_index,
    })
}
