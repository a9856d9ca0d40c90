//! Dense word-vector spaces: loading, saving, normalisation and retrieval.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// A vocabulary-indexed matrix of word vectors, one row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    words: Vec<String>,
    vectors: Array2<f64>,
    index: HashMap<String, usize>,
    norms: Vec<f64>,
}

/// Bookkeeping produced while reading a vector file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub rows_read: usize,
    pub duplicates: usize,
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub word: String,
    pub index: usize,
    pub score: f64,
}

/// Retrieval criterion for [`EmbeddingSpace::nearest_neighbors`].
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    Cosine,
    Csls(&'a CslsContext),
}

/// Hubness penalties for cross-domain similarity local scaling.
///
/// `row_penalty[j]` is the mean cosine of row `j` of the searched space to its
/// `k` nearest vectors in the other domain. The query-side penalty is computed
/// against the searched space at query time.
#[derive(Debug, Clone)]
pub struct CslsContext {
    pub k: usize,
    pub row_penalty: Vec<f64>,
}

/// A phrase embedding and how many of its tokens were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseVector {
    pub vector: Array1<f64>,
    pub oov_tokens: usize,
}

fn l2(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Mean of the `k` largest values. Uses a partial selection, O(n).
pub(crate) fn mean_top_k(scores: &mut [f64], k: usize) -> f64 {
    let k = k.min(scores.len());
    if k == 0 {
        return 0.0;
    }
    let n = scores.len();
    scores.select_nth_unstable_by(n - k, |a, b| a.total_cmp(b));
    scores[n - k..].iter().sum::<f64>() / k as f64
}

impl EmbeddingSpace {
    /// Builds a space, validating uniqueness, shape and finiteness.
    pub fn new(words: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if words.len() != vectors.nrows() {
            return Err(Error::InvalidArgument(format!(
                "{} words but {} vector rows",
                words.len(),
                vectors.nrows()
            )));
        }
        if vectors.ncols() == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate word {w:?}")));
            }
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite coordinate in row {} ({:?})",
                pos / vectors.ncols(),
                words[pos / vectors.ncols()]
            )));
        }
        let norms = vectors.rows().into_iter().map(l2).collect();
        Ok(Self {
            words,
            vectors,
            index,
            norms,
        })
    }

    /// An empty space of the given dimension.
    pub fn empty(dim: usize) -> Self {
        Self {
            words: Vec::new(),
            vectors: Array2::zeros((0, dim)),
            index: HashMap::new(),
            norms: Vec::new(),
        }
    }

    /// Reads the `count dim` header text format.
    pub fn load(path: impl AsRef<Path>, limit: Option<usize>) -> Result<(Self, LoadStats)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path, limit)
    }

    fn read<R: BufRead>(reader: R, path: &Path, limit: Option<usize>) -> Result<(Self, LoadStats)> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, 1, "missing header")),
        };
        let mut parts = header.split_ascii_whitespace();
        let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(d), None) => {
                let c: usize = c
                    .parse()
                    .map_err(|_| Error::parse(path, 1, format!("bad vocabulary count {c:?}")))?;
                let d: usize = d
                    .parse()
                    .map_err(|_| Error::parse(path, 1, format!("bad dimension {d:?}")))?;
                (c, d)
            }
            _ => return Err(Error::parse(path, 1, "header must be `<count> <dim>`")),
        };
        if dim == 0 {
            return Err(Error::parse(path, 1, "dimension must be positive"));
        }
        let wanted = limit.map_or(count, |l| l.min(count));

        let mut stats = LoadStats::default();
        let mut words = Vec::with_capacity(wanted);
        let mut data = Vec::with_capacity(wanted * dim);
        let mut seen = HashMap::with_capacity(wanted);
        let mut lineno = 1;
        while words.len() < wanted && stats.rows_read < count {
            lineno += 1;
            let line = match lines.next() {
                Some(l) => l.map_err(|e| Error::io(path, e))?,
                None => {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("expected {count} rows, found {}", stats.rows_read),
                    ))
                }
            };
            stats.rows_read += 1;
            let mut fields = line.split_ascii_whitespace();
            let word = fields
                .next()
                .ok_or_else(|| Error::parse(path, lineno, "empty row"))?;
            let start = data.len();
            let mut norm_sq = 0.0;
            for field in fields {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad coordinate {field:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(path, lineno, "non-finite coordinate"));
                }
                norm_sq += v * v;
                data.push(v);
            }
            let got = data.len() - start;
            if got != dim {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {dim} coordinates, found {got}"),
                ));
            }
            if norm_sq == 0.0 {
                return Err(Error::parse(path, lineno, "zero vector"));
            }
            if seen.contains_key(word) {
                stats.duplicates += 1;
                data.truncate(start);
                continue;
            }
            seen.insert(word.to_string(), words.len());
            words.push(word.to_string());
        }
        if stats.duplicates > 0 {
            log::warn!(
                "{}: skipped {} duplicate vocabulary entries",
                path.display(),
                stats.duplicates
            );
        }
        let vectors = Array2::from_shape_vec((words.len(), dim), data)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok((Self::new(words, vectors)?, stats))
    }

    /// Writes the text format. Coordinates use the shortest exact decimal form.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim())?;
        for (word, row) in self.words.iter().zip(self.vectors.rows()) {
            write!(w, "{word}")?;
            for v in row {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn vector(&self, word: &str) -> Option<ArrayView1<'_, f64>> {
        self.index_of(word).map(|i| self.vectors.row(i))
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Replaces the vectors, keeping the vocabulary.
    pub fn with_vectors(&self, vectors: Array2<f64>) -> Result<Self> {
        if vectors.dim() != self.vectors.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: vectors.ncols(),
            });
        }
        Self::new(self.words.clone(), vectors)
    }

    /// True when every row has unit norm within `tol`.
    pub fn is_unit_normalized(&self, tol: f64) -> bool {
        self.norms.iter().all(|n| (n - 1.0).abs() <= tol)
    }

    /// Returns a copy with every row scaled to unit Euclidean norm.
    pub fn unit_normalize(&self) -> Result<Self> {
        let mut vectors = self.vectors.clone();
        for (i, mut row) in vectors.axis_iter_mut(Axis(0)).enumerate() {
            let n = self.norms[i];
            if n == 0.0 {
                return Err(Error::Numerical(format!("zero vector for {:?}", self.words[i])));
            }
            // Rows already at unit length are kept as-is so normalisation is idempotent.
            if n != 1.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        Self::new(self.words.clone(), vectors)
    }

    /// Cosine similarity of two in-vocabulary words.
    pub fn cosine(&self, w1: &str, w2: &str) -> Result<f64> {
        let i = self
            .index_of(w1)
            .ok_or_else(|| Error::OutOfVocabulary(w1.to_string()))?;
        let j = self
            .index_of(w2)
            .ok_or_else(|| Error::OutOfVocabulary(w2.to_string()))?;
        let c = self.row(i).dot(&self.row(j)) / (self.norms[i] * self.norms[j]);
        Ok(c.clamp(-1.0, 1.0))
    }

    /// Cosine of every row to `query`.
    pub fn cosine_scores(&self, query: ArrayView1<f64>) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        let qn = l2(query);
        if qn == 0.0 {
            return Err(Error::Numerical("zero query vector".into()));
        }
        let dots = self.vectors.dot(&query);
        Ok(dots
            .iter()
            .zip(&self.norms)
            .map(|(d, n)| d / (n * qn))
            .collect())
    }

    /// The `k` best rows for `query`, best first; ties go to the lower row.
    pub fn nearest_neighbors(
        &self,
        query: ArrayView1<f64>,
        k: usize,
        metric: Metric<'_>,
    ) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds vocabulary size {}",
                self.len()
            )));
        }
        let mut scores = self.cosine_scores(query)?;
        if let Metric::Csls(ctx) = metric {
            if ctx.row_penalty.len() != self.len() {
                return Err(Error::InvalidArgument(
                    "CSLS context does not match the searched space".into(),
                ));
            }
            let mut tmp = scores.clone();
            let query_penalty = mean_top_k(&mut tmp, ctx.k);
            for (s, r) in scores.iter_mut().zip(&ctx.row_penalty) {
                *s = 2.0 * *s - query_penalty - r;
            }
        }
        Ok(top_k(&scores, k)
            .into_iter()
            .map(|i| Neighbor {
                word: self.words[i].clone(),
                index: i,
                score: scores[i],
            })
            .collect())
    }

    /// Runs [`Self::nearest_neighbors`] for many queries in parallel.
    pub fn nearest_neighbors_batch(
        &self,
        queries: &Array2<f64>,
        k: usize,
        metric: Metric<'_>,
    ) -> Result<Vec<Vec<Neighbor>>> {
        queries
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|q| self.nearest_neighbors(q, k, metric))
            .collect()
    }

    /// Mean of the in-vocabulary token vectors.
    pub fn phrase_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Result<PhraseVector> {
        let mut acc = Array1::zeros(self.dim());
        let mut found = 0usize;
        for t in tokens {
            if let Some(i) = self.index_of(t.as_ref()) {
                acc += &self.row(i);
                found += 1;
            }
        }
        if found == 0 {
            let joined: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
            return Err(Error::OutOfVocabulary(joined.join(" ")));
        }
        if found > 1 {
            acc /= found as f64;
        }
        Ok(PhraseVector {
            vector: acc,
            oov_tokens: tokens.len() - found,
        })
    }
}

/// Indices of the `k` largest scores, sorted descending with index tie-break.
pub(crate) fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx
}

impl CslsContext {
    /// Penalties for rows of `searched` measured against the rows of `other`.
    ///
    /// Both matrices must hold unit-length rows.
    pub fn new(searched: &Array2<f64>, other: &Array2<f64>, k: usize) -> Result<Self> {
        if searched.ncols() != other.ncols() {
            return Err(Error::DimensionMismatch {
                expected: searched.ncols(),
                actual: other.ncols(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("CSLS k must be at least 1".into()));
        }
        let row_penalty = searched
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|row| {
                let mut sims = other.dot(&row).to_vec();
                mean_top_k(&mut sims, k)
            })
            .collect();
        Ok(Self { k, row_penalty })
    }
}
