//! Token batches, synthetic generators, file-backed pools and separation statistics.

mod io;

pub use io::{
    load_embed_file, load_vocab_file, parse_embed_bytes, parse_vocab_bytes, save_embed_file,
    save_vocab_file, embed_bytes, vocab_bytes, VocabFile,
};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{AmiError, Result};

/// Resample cap for the distinct-sequence loops.
pub const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceKind {
    OneHot,
    Spherical,
    Gaussian,
    EmbedFile,
    IndexFile,
}

impl SourceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::OneHot => "onehot",
            SourceKind::Spherical => "spherical",
            SourceKind::Gaussian => "gaussian",
            SourceKind::EmbedFile => "embed_file",
            SourceKind::IndexFile => "index_file",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = AmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" | "one_hot" => Ok(SourceKind::OneHot),
            "spherical" => Ok(SourceKind::Spherical),
            "gaussian" => Ok(SourceKind::Gaussian),
            "embed_file" => Ok(SourceKind::EmbedFile),
            "index_file" => Ok(SourceKind::IndexFile),
            other => Err(AmiError::Config(format!("unknown data source `{other}`"))),
        }
    }
}

/// One sequence of `l_x` tokens stored row-major `[token][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub values: Vec<f64>,
    pub ids: Option<Vec<u32>>,
}

impl Sequence {
    pub fn token(&self, j: usize, d_x: usize) -> &[f64] {
        &self.values[j * d_x..(j + 1) * d_x]
    }

    /// Identity used for distinctness checks: token ids when present, raw bits otherwise.
    fn key(&self) -> Vec<u64> {
        match &self.ids {
            Some(ids) => ids.iter().map(|&i| i as u64).collect(),
            None => self.values.iter().map(|v| v.to_bits()).collect(),
        }
    }
}

/// A dataset of `n` sequences, each `l_x` tokens of dimension `d_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    values: Vec<f64>,
    n: usize,
    l_x: usize,
    d_x: usize,
    source: SourceKind,
    token_ids: Option<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(values: Vec<f64>, n: usize, l_x: usize, d_x: usize, source: SourceKind) -> Result<Self> {
        if values.len() != n * l_x * d_x {
            return Err(AmiError::Shape(format!(
                "{} values for a batch of {n}x{l_x}x{d_x}",
                values.len()
            )));
        }
        Ok(TokenBatch { values, n, l_x, d_x, source, token_ids: None })
    }

    pub fn with_token_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.n * self.l_x {
            return Err(AmiError::Shape(format!(
                "{} token ids for {} tokens",
                ids.len(),
                self.n * self.l_x
            )));
        }
        self.token_ids = Some(ids);
        Ok(self)
    }

    /// Builds a batch from sequences of identical shape.
    pub fn from_sequences(seqs: &[Sequence], l_x: usize, d_x: usize, source: SourceKind) -> Result<Self> {
        let mut values = Vec::with_capacity(seqs.len() * l_x * d_x);
        let with_ids = seqs.first().is_some_and(|s| s.ids.is_some());
        let mut ids = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            if s.values.len() != l_x * d_x {
                return Err(AmiError::Shape(format!(
                    "sequence {i} has {} values, expected {}",
                    s.values.len(),
                    l_x * d_x
                )));
            }
            values.extend_from_slice(&s.values);
            match (&s.ids, with_ids) {
                (Some(v), true) => ids.extend_from_slice(v),
                (None, false) => {}
                _ => return Err(AmiError::Shape("mixed sequences with and without token ids".into())),
            }
        }
        let batch = TokenBatch::new(values, seqs.len(), l_x, d_x, source)?;
        if with_ids {
            batch.with_token_ids(ids)
        } else {
            Ok(batch)
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l_x(&self) -> usize {
        self.l_x
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn token_ids(&self) -> Option<&[u32]> {
        self.token_ids.as_deref()
    }

    pub fn sequence(&self, i: usize) -> &[f64] {
        let len = self.l_x * self.d_x;
        &self.values[i * len..(i + 1) * len]
    }

    pub fn sequence_ids(&self, i: usize) -> Option<&[u32]> {
        self.token_ids.as_ref().map(|ids| &ids[i * self.l_x..(i + 1) * self.l_x])
    }

    pub fn token(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.l_x + j) * self.d_x;
        &self.values[start..start + self.d_x]
    }

    pub fn get_sequence(&self, i: usize) -> Sequence {
        Sequence {
            values: self.sequence(i).to_vec(),
            ids: self.sequence_ids(i).map(|s| s.to_vec()),
        }
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.l_x * self.d_x)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d_x)
    }

    /// True when no two sequences coincide.
    pub fn all_distinct(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.n);
        (0..self.n).all(|i| seen.insert(self.get_sequence(i).key()))
    }

    pub fn scaled(&self, c: f64) -> TokenBatch {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }
}

/// Embedding table indexed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    k: usize,
    d_x: usize,
    table: Vec<f64>,
}

impl Vocabulary {
    pub fn new(k: usize, d_x: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != k * d_x {
            return Err(AmiError::Shape(format!("{} table entries for {k}x{d_x}", table.len())));
        }
        if k == 0 {
            return Err(AmiError::Config("vocabulary must contain at least one token".into()));
        }
        Ok(Vocabulary { k, d_x, table })
    }

    /// One-hot vocabulary: id `i` embeds to `e_i`.
    pub fn identity(k: usize) -> Self {
        let mut table = vec![0.0; k * k];
        for i in 0..k {
            table[i * k + i] = 1.0;
        }
        Vocabulary { k, d_x: k, table }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, id: u32) -> Result<&[f64]> {
        let i = id as usize;
        if i >= self.k {
            return Err(AmiError::Domain { index: id, k: self.k });
        }
        Ok(&self.table[i * self.d_x..(i + 1) * self.d_x])
    }

    /// Embeds a flat list of ids, appending rows in order.
    pub fn lookup(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.d_x);
        for &id in ids {
            out.extend_from_slice(self.row(id)?);
        }
        Ok(out)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.table.chunks_exact(self.d_x)
    }
}

/// Distributional token families used by the synthetic generators and the bound estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenDistribution {
    OneHot,
    Spherical,
    Gaussian,
}

impl TokenDistribution {
    pub fn kind(&self) -> SourceKind {
        match self {
            TokenDistribution::OneHot => SourceKind::OneHot,
            TokenDistribution::Spherical => SourceKind::Spherical,
            TokenDistribution::Gaussian => SourceKind::Gaussian,
        }
    }

    pub fn from_kind(kind: SourceKind) -> Option<Self> {
        match kind {
            SourceKind::OneHot => Some(TokenDistribution::OneHot),
            SourceKind::Spherical => Some(TokenDistribution::Spherical),
            SourceKind::Gaussian => Some(TokenDistribution::Gaussian),
            _ => None,
        }
    }

    /// Writes one i.i.d. token into `out` (one-hot tokens are uniform basis vectors).
    pub fn sample_token<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            TokenDistribution::OneHot => {
                out.fill(0.0);
                let i = rng.random_range(0..out.len());
                out[i] = 1.0;
            }
            TokenDistribution::Gaussian => out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
            TokenDistribution::Spherical => sample_unit(rng, out),
        }
    }
}

fn sample_unit<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    loop {
        out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
            return;
        }
    }
}

/// Where game sequences come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic { dist: TokenDistribution, l_x: usize, d_x: usize },
    /// Sequences drawn uniformly from a fixed pool (exported files).
    Pool(Arc<TokenBatch>),
}

impl DataSource {
    pub fn synthetic(dist: TokenDistribution, l_x: usize, d_x: usize) -> Result<Self> {
        if l_x == 0 || d_x == 0 {
            return Err(AmiError::Config("l_x and d_x must be positive".into()));
        }
        match dist {
            TokenDistribution::OneHot if l_x > d_x => {
                return Err(AmiError::Config(format!(
                    "one-hot sequences need l_x <= d_x, got l_x = {l_x}, d_x = {d_x}"
                )))
            }
            TokenDistribution::Spherical if d_x < 2 => {
                return Err(AmiError::Config("spherical tokens need d_x >= 2".into()))
            }
            _ => {}
        }
        Ok(DataSource::Synthetic { dist, l_x, d_x })
    }

    pub fn pool(batch: TokenBatch) -> Result<Self> {
        if batch.n() == 0 {
            return Err(AmiError::Config("sequence pool is empty".into()));
        }
        Ok(DataSource::Pool(Arc::new(batch)))
    }

    pub fn l_x(&self) -> usize {
        match self {
            DataSource::Synthetic { l_x, .. } => *l_x,
            DataSource::Pool(b) => b.l_x(),
        }
    }

    pub fn d_x(&self) -> usize {
        match self {
            DataSource::Synthetic { d_x, .. } => *d_x,
            DataSource::Pool(b) => b.d_x(),
        }
    }

    pub fn kind(&self) -> SourceKind {
        match self {
            DataSource::Synthetic { dist, .. } => dist.kind(),
            DataSource::Pool(b) => b.source(),
        }
    }

    /// Draws one sequence. One-hot tokens are distinct within the sequence and carry their ids.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        match self {
            DataSource::Synthetic { dist: TokenDistribution::OneHot, l_x, d_x } => {
                let ids: Vec<u32> = index::sample(rng, *d_x, *l_x).into_iter().map(|i| i as u32).collect();
                let mut values = vec![0.0; l_x * d_x];
                for (j, &id) in ids.iter().enumerate() {
                    values[j * d_x + id as usize] = 1.0;
                }
                Sequence { values, ids: Some(ids) }
            }
            DataSource::Synthetic { dist, l_x, d_x } => {
                let mut values = vec![0.0; l_x * d_x];
                for tok in values.chunks_exact_mut(*d_x) {
                    dist.sample_token(rng, tok);
                }
                Sequence { values, ids: None }
            }
            DataSource::Pool(b) => b.get_sequence(rng.random_range(0..b.n())),
        }
    }

    /// Draws `n` pairwise distinct sequences.
    pub fn sample_distinct<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Sequence>> {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        let mut misses = 0usize;
        while out.len() < n {
            let s = self.sample_sequence(rng);
            if seen.insert(s.key()) {
                out.push(s);
                misses = 0;
            } else {
                misses += 1;
                if misses > MAX_RESAMPLES {
                    return Err(AmiError::Config(format!(
                        "could not draw {n} distinct sequences after {MAX_RESAMPLES} resamples; domain too small"
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Draws a batch of `n` distinct sequences.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<TokenBatch> {
        let seqs = self.sample_distinct(n, rng)?;
        TokenBatch::from_sequences(&seqs, self.l_x(), self.d_x(), self.kind())
    }
}

/// `n` sequences of `l_x` distinct one-hot tokens in dimension `d_x`.
pub fn gen_onehot<R: Rng + ?Sized>(n: usize, l_x: usize, d_x: usize, rng: &mut R) -> Result<TokenBatch> {
    DataSource::synthetic(TokenDistribution::OneHot, l_x, d_x)?.sample_batch(n, rng)
}

/// Tokens uniform on the unit sphere.
pub fn gen_spherical<R: Rng + ?Sized>(n: usize, l_x: usize, d_x: usize, rng: &mut R) -> Result<TokenBatch> {
    DataSource::synthetic(TokenDistribution::Spherical, l_x, d_x)?.sample_batch(n, rng)
}

/// Tokens with i.i.d. standard normal coordinates.
pub fn gen_gaussian<R: Rng + ?Sized>(n: usize, l_x: usize, d_x: usize, rng: &mut R) -> Result<TokenBatch> {
    DataSource::synthetic(TokenDistribution::Gaussian, l_x, d_x)?.sample_batch(n, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataStats {
    /// Largest token L2 norm.
    pub m: f64,
    /// Minimum separation `x_i.x_i - max_{j != i} x_i.x_j` over all sequences.
    /// Infinite when every sequence has a single token.
    pub delta: f64,
    pub mean_token: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Separation of every token of one sequence.
pub fn token_separations(seq: &[f64], l_x: usize, d_x: usize) -> Vec<f64> {
    let toks: Vec<&[f64]> = seq.chunks_exact(d_x).take(l_x).collect();
    (0..toks.len())
        .map(|i| {
            let self_dot = dot(toks[i], toks[i]);
            let worst = (0..toks.len())
                .filter(|&j| j != i)
                .map(|j| dot(toks[i], toks[j]))
                .fold(f64::NEG_INFINITY, f64::max);
            self_dot - worst
        })
        .collect()
}

pub fn measure_stats(batch: &TokenBatch) -> Result<DataStats> {
    if batch.n() == 0 || batch.l_x() == 0 || batch.d_x() == 0 {
        return Err(AmiError::Contract("measure_stats needs a nonempty batch".into()));
    }
    let d_x = batch.d_x();
    let mut m = 0.0f64;
    let mut mean = vec![0.0; d_x];
    for tok in batch.tokens() {
        m = m.max(dot(tok, tok).sqrt());
        mean.iter_mut().zip(tok).for_each(|(a, b)| *a += b);
    }
    let count = (batch.n() * batch.l_x()) as f64;
    mean.iter_mut().for_each(|a| *a /= count);
    let delta = batch
        .sequences()
        .flat_map(|s| token_separations(s, batch.l_x(), d_x))
        .fold(f64::INFINITY, f64::min);
    Ok(DataStats { m, delta, mean_token: mean })
}
