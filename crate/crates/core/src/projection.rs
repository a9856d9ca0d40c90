//! Supervised cross-lingual projection and constraint translation.
//!
//! A linear map `W` is fitted on a seed dictionary by gradient ascent on the
//! relaxed CSLS criterion, starting from the orthogonal Procrustes solution.
//! Source constraints are then translated term by term through `W`, picking
//! the target word with the best CSLS score for each (possibly averaged)
//! source embedding.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, Group, TaggedTerm, TermPair};
use crate::embedding::{mean_top_k, CslsContext, EmbeddingSpace, Metric};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retrieval {
    Csls,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Neighbourhood size for the hubness penalty.
    pub k_neighbors: usize,
    /// Full-batch gradient steps on the seed dictionary.
    pub iterations: usize,
    /// Initial step size; halved whenever a step lowers the objective.
    pub learning_rate: f64,
    /// Dictionary pairs per gradient step, 0 for the whole dictionary.
    pub batch_size: usize,
    /// Only the first `max_neg` rows of each space form the neighbourhood pools.
    pub max_neg: usize,
    pub retrieval: Retrieval,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 10,
            iterations: 10,
            learning_rate: 1.0,
            batch_size: 0,
            max_neg: 200_000,
            retrieval: Retrieval::Csls,
            seed: 0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "k_neighbors and iterations must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.max_neg == 0 {
            return Err(Error::InvalidArgument("max_neg must be positive".into()));
        }
        Ok(())
    }
}

/// Linear map from the source space into the target space (`y ≈ W x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    pub matrix: Array2<f64>,
}

impl ProjectionMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Array2::eye(dim),
        }
    }

    pub fn src_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn tgt_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.matrix.dot(&x)
    }

    /// Projects every row of `rows`.
    pub fn apply_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        rows.dot(&self.matrix.t())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
        if m.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{}: non-finite projection", path.display())));
        }
        Ok(m)
    }
}

/// Reads `src<TAB>tgt` lines.
pub fn load_seed_dictionary(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, n + 1, "expected `src<TAB>tgt`"))?;
        out.push((a.trim().to_string(), b.trim().to_string()));
    }
    Ok(out)
}

/// Outcome of [`train_rcsls`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcslsReport {
    pub resolved_pairs: usize,
    pub skipped_pairs: usize,
    /// Objective after Procrustes initialisation, then after each accepted or rejected step
    /// (the best-so-far value, so the sequence is non-decreasing).
    pub objective: Vec<f64>,
}

/// `2·cos(x, y) − r_x − r_y` for unit `x`, `y`.
pub fn csls_score(x: ArrayView1<f64>, y: ArrayView1<f64>, mean_nn_sim_x: f64, mean_nn_sim_y: f64) -> f64 {
    2.0 * x.dot(&y) - mean_nn_sim_x - mean_nn_sim_y
}

/// Orthogonal `W` minimising `Σ ‖W x_i − y_i‖²` over the rows of `x`, `y`.
pub fn procrustes(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            actual: y.ncols(),
        });
    }
    let m = y.t().dot(x);
    let (r, c) = m.dim();
    let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
    let svd = dm.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD did not converge".into())),
    };
    let w = u * vt;
    Ok(Array2::from_shape_fn((r, c), |(i, j)| w[(i, j)]))
}

fn normalized_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

fn normalized(space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
    if space.is_unit_normalized(1e-9) {
        Ok(space.clone())
    } else {
        space.unit_normalize()
    }
}

/// For each query row, the `k` best rows of `score_pool` by dot product.
/// Returns the mean of the matching rows of `mean_pool` and the mean score.
fn neighbourhood_means(
    queries: &Array2<f64>,
    score_pool: &Array2<f64>,
    mean_pool: &Array2<f64>,
    k: usize,
) -> (Array2<f64>, Vec<f64>) {
    let k = k.min(score_pool.nrows());
    let rows: Vec<(Array1<f64>, f64)> = queries
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|q| {
            let scores = score_pool.dot(&q).to_vec();
            let mut mean = Array1::zeros(mean_pool.ncols());
            let mut score = 0.0;
            for j in crate::embedding::top_k(&scores, k) {
                mean += &mean_pool.row(j);
                score += scores[j];
            }
            (mean / k as f64, score / k as f64)
        })
        .collect();
    let mut means = Array2::zeros((queries.nrows(), mean_pool.ncols()));
    let mut scores = Vec::with_capacity(rows.len());
    for (i, (m, s)) in rows.into_iter().enumerate() {
        means.row_mut(i).assign(&m);
        scores.push(s);
    }
    (means, scores)
}

struct RcslsProblem<'a> {
    x: &'a Array2<f64>,
    y: &'a Array2<f64>,
    src_pool: &'a Array2<f64>,
    tgt_pool: &'a Array2<f64>,
    k: usize,
}

impl RcslsProblem<'_> {
    /// Mean relaxed CSLS over the dictionary and its gradient in `W`.
    ///
    /// Neighbourhoods are held fixed while differentiating.
    fn value_and_grad(&self, w: &Array2<f64>) -> (f64, Array2<f64>) {
        let n = self.x.nrows() as f64;
        let proj = self.x.dot(&w.t());
        let (tgt_nn, tgt_score) = neighbourhood_means(&proj, self.tgt_pool, self.tgt_pool, self.k);
        let proj_pool = self.src_pool.dot(&w.t());
        let (src_nn, src_score) = neighbourhood_means(self.y, &proj_pool, self.src_pool, self.k);

        let fit: f64 = (&proj * self.y).sum();
        let value = (2.0 * fit - tgt_score.iter().sum::<f64>() - src_score.iter().sum::<f64>()) / n;
        let grad = (self.y.t().dot(self.x) * 2.0 - tgt_nn.t().dot(self.x) - self.y.t().dot(&src_nn)) / n;
        (value, grad)
    }
}

/// Fits `W` on the resolvable part of `seed_dict`.
pub fn train_rcsls(
    src: &EmbeddingSpace,
    tgt: &EmbeddingSpace,
    seed_dict: &[(String, String)],
    cfg: &ProjectionConfig,
) -> Result<(ProjectionMatrix, RcslsReport)> {
    cfg.validate()?;
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch {
            expected: src.dim(),
            actual: tgt.dim(),
        });
    }
    let src = normalized(src)?;
    let tgt = normalized(tgt)?;
    let pairs: Vec<(usize, usize)> = seed_dict
        .iter()
        .filter_map(|(a, b)| Some((src.index_of(a)?, tgt.index_of(b)?)))
        .collect();
    let skipped = seed_dict.len() - pairs.len();
    if skipped > 0 {
        log::warn!("seed dictionary: {skipped} pairs not resolvable in the spaces");
    }
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "seed dictionary has {} resolvable pairs, need at least 2",
            pairs.len()
        )));
    }
    let d = src.dim();
    let mut x = Array2::zeros((pairs.len(), d));
    let mut y = Array2::zeros((pairs.len(), d));
    for (i, &(a, b)) in pairs.iter().enumerate() {
        x.row_mut(i).assign(&src.row(a));
        y.row_mut(i).assign(&tgt.row(b));
    }
    let src_pool = src.vectors().slice(s![..cfg.max_neg.min(src.len()), ..]).to_owned();
    let tgt_pool = tgt.vectors().slice(s![..cfg.max_neg.min(tgt.len()), ..]).to_owned();

    let mut w = procrustes(&x, &y)?;
    let batch = if cfg.batch_size == 0 {
        pairs.len()
    } else {
        cfg.batch_size.min(pairs.len())
    };

    let full = RcslsProblem {
        x: &x,
        y: &y,
        src_pool: &src_pool,
        tgt_pool: &tgt_pool,
        k: cfg.k_neighbors,
    };
    let (mut best, _) = full.value_and_grad(&w);
    let mut objective = vec![best];
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = crate::seed::rng(cfg.seed);

    for _ in 0..cfg.iterations {
        if batch < pairs.len() {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (bx, by) = if batch == pairs.len() {
                (x.clone(), y.clone())
            } else {
                (x.select(Axis(0), chunk), y.select(Axis(0), chunk))
            };
            let sub = RcslsProblem {
                x: &bx,
                y: &by,
                src_pool: &src_pool,
                tgt_pool: &tgt_pool,
                k: cfg.k_neighbors,
            };
            let (_, grad) = sub.value_and_grad(&w);
            let candidate = &w + &(grad * lr);
            if candidate.iter().any(|v| !v.is_finite()) {
                lr /= 2.0;
                continue;
            }
            let (value, _) = full.value_and_grad(&candidate);
            if value >= best {
                best = value;
                w = candidate;
            } else {
                lr /= 2.0;
            }
        }
        objective.push(best);
        if lr < 1e-6 {
            break;
        }
    }
    Ok((
        ProjectionMatrix { matrix: w },
        RcslsReport {
            resolved_pairs: pairs.len(),
            skipped_pairs: skipped,
            objective,
        },
    ))
}

/// A translated term and its retrieval score.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub word: String,
    pub score: f64,
}

/// Nearest-neighbour translation of source terms into the target vocabulary.
pub struct Translator<'a> {
    w: &'a ProjectionMatrix,
    src: EmbeddingSpace,
    tgt: EmbeddingSpace,
    csls: Option<CslsContext>,
    source_lang: String,
    target_lang: String,
}

impl<'a> Translator<'a> {
    pub fn new(
        w: &'a ProjectionMatrix,
        src: &EmbeddingSpace,
        tgt: &EmbeddingSpace,
        cfg: &ProjectionConfig,
        source_lang: &str,
        target_lang: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        if w.src_dim() != src.dim() || w.tgt_dim() != tgt.dim() {
            return Err(Error::DimensionMismatch {
                expected: w.src_dim(),
                actual: src.dim(),
            });
        }
        let src = normalized(src)?;
        let tgt = normalized(tgt)?;
        let csls = match cfg.retrieval {
            Retrieval::Cosine => None,
            Retrieval::Csls => {
                let pool = src.vectors().slice(s![..cfg.max_neg.min(src.len()), ..]).to_owned();
                let projected = normalized_rows(&w.apply_rows(&pool));
                Some(CslsContext::new(tgt.vectors(), &projected, cfg.k_neighbors)?)
            }
        };
        Ok(Self {
            w,
            src,
            tgt,
            csls,
            source_lang: source_lang.to_string(),
            target_lang: target_lang.to_string(),
        })
    }

    pub fn target(&self) -> &EmbeddingSpace {
        &self.tgt
    }

    pub fn target_lang(&self) -> &str {
        &self.target_lang
    }

    /// Projected, unit-length embedding of a source term.
    pub fn project_term(&self, term: &TaggedTerm) -> Option<Array1<f64>> {
        if term.lang != self.source_lang {
            return None;
        }
        let x = match self.src.vector(&term.surface) {
            Some(v) => v.to_owned(),
            None => self.src.phrase_vector(&term.tokens()).ok()?.vector,
        };
        let q = self.w.apply(x.view());
        let n = q.dot(&q).sqrt();
        (n > 0.0).then(|| q / n)
    }

    pub fn translate(&self, term: &TaggedTerm) -> Option<Translation> {
        let q = self.project_term(term)?;
        let metric = match &self.csls {
            Some(ctx) => Metric::Csls(ctx),
            None => Metric::Cosine,
        };
        let hit = self.tgt.nearest_neighbors(q.view(), 1, metric).ok()?.into_iter().next()?;
        Some(Translation {
            word: hit.word,
            score: hit.score,
        })
    }

    /// Mean cosine of `q` to its `k` nearest target rows.
    pub fn query_penalty(&self, q: ArrayView1<f64>) -> Option<f64> {
        let ctx = self.csls.as_ref()?;
        let mut scores = self.tgt.cosine_scores(q).ok()?;
        Some(mean_top_k(&mut scores, ctx.k))
    }

    pub fn row_penalty(&self, target_row: usize) -> Option<f64> {
        self.csls.as_ref().map(|c| c.row_penalty[target_row])
    }
}

/// Counters reported by [`project_constraints`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub input: usize,
    pub phrase_pairs_dropped: usize,
    pub untranslatable: usize,
    pub self_translations: usize,
    pub collapsed_duplicates: usize,
    pub output: usize,
}

fn translate_all<'t, I>(terms: I, tr: &Translator<'_>) -> HashMap<TaggedTerm, Option<Translation>>
where
    I: IntoIterator<Item = &'t TaggedTerm>,
{
    let unique: BTreeSet<&TaggedTerm> = terms.into_iter().collect();
    let unique: Vec<&TaggedTerm> = unique.into_iter().collect();
    unique
        .par_iter()
        .map(|t| ((*t).clone(), tr.translate(t)))
        .collect()
}

/// Translates a monolingual source constraint set into the target language.
pub fn project_constraints(
    set: &ConstraintSet,
    tr: &Translator<'_>,
    phrase_level: bool,
) -> Result<(ConstraintSet, ProjectionReport)> {
    if let Some(lang) = set.language() {
        if lang != tr.source_lang {
            return Err(Error::InvalidArgument(format!(
                "expected {} constraints, found {lang}",
                tr.source_lang
            )));
        }
    } else if !set.is_empty() {
        return Err(Error::InvalidArgument("constraint set mixes languages".into()));
    }
    let mut report = ProjectionReport {
        input: set.len(),
        ..Default::default()
    };
    let kept: Vec<&TermPair> = set
        .iter()
        .filter(|p| {
            let drop = !phrase_level && p.has_phrase();
            if drop {
                report.phrase_pairs_dropped += 1;
            }
            !drop
        })
        .collect();
    let table = translate_all(kept.iter().flat_map(|p| p.terms()), tr);
    let mut out = ConstraintSet::new(set.relation, set.group);
    for p in kept {
        let (a, b) = match (&table[p.first()], &table[p.second()]) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                report.untranslatable += 1;
                continue;
            }
        };
        if a.word == b.word {
            report.self_translations += 1;
            continue;
        }
        let ok = out.insert(
            TaggedTerm::new(&tr.target_lang, &a.word),
            TaggedTerm::new(&tr.target_lang, &b.word),
        );
        if !ok {
            report.collapsed_duplicates += 1;
        }
    }
    report.output = out.len();
    Ok((out, report))
}

/// Turns cross-lingual pairs into target-language pairs by translating the source side.
pub fn translate_crosslingual(
    set: &ConstraintSet,
    tr: &Translator<'_>,
    phrase_level: bool,
) -> Result<(ConstraintSet, ProjectionReport)> {
    if set.group != Group::CrossLingual {
        return Err(Error::InvalidArgument("expected a cross-lingual constraint set".into()));
    }
    let mut report = ProjectionReport {
        input: set.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for p in set.iter() {
        let (src, tgt) = match (p.side(&tr.source_lang), p.side(&tr.target_lang)) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "pair {}\t{} lacks a {}/{} side",
                    p.first(),
                    p.second(),
                    tr.source_lang,
                    tr.target_lang
                )))
            }
        };
        if !phrase_level && p.has_phrase() {
            report.phrase_pairs_dropped += 1;
            continue;
        }
        kept.push((src, tgt));
    }
    let table = translate_all(kept.iter().map(|(s, _)| *s), tr);
    let mut out = ConstraintSet::new(set.relation, Group::Domain);
    for (src, tgt) in kept {
        let Some(a) = &table[src] else {
            report.untranslatable += 1;
            continue;
        };
        if a.word == tgt.surface {
            report.self_translations += 1;
            continue;
        }
        if !out.insert(TaggedTerm::new(&tr.target_lang, &a.word), tgt.clone()) {
            report.collapsed_duplicates += 1;
        }
    }
    report.output = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Relation;
    use ndarray::array;

    fn toy(words: &[&str], rows: Array2<f64>) -> EmbeddingSpace {
        EmbeddingSpace::new(words.iter().map(|w| w.to_string()).collect(), rows)
            .unwrap()
            .unit_normalize()
            .unwrap()
    }

    #[test]
    fn csls_formula_anchors() {
        let x = array![1.0, 0.0];
        assert!((csls_score(x.view(), x.view(), 0.5, 0.5) - 1.0).abs() < 1e-12);
        let y = array![0.6, 0.8];
        let m = x.dot(&y);
        assert!(csls_score(x.view(), y.view(), m, m).abs() < 1e-12);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let theta: f64 = 0.3;
        let r = array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
        let x = array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]];
        let y = x.dot(&r.t());
        let w = procrustes(&x, &y).unwrap();
        for (a, b) in w.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn config_defaults() {
        let c = ProjectionConfig::default();
        assert_eq!((c.k_neighbors, c.iterations), (10, 10));
        assert!(ProjectionConfig { k_neighbors: 0, ..c.clone() }.validate().is_err());
    }

    #[test]
    fn train_rejects_small_dictionary() {
        let s = toy(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]]);
        let dict = vec![("a".to_string(), "a".to_string()), ("q".into(), "b".into())];
        assert!(matches!(
            train_rcsls(&s, &s, &dict, &ProjectionConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn identity_translation_and_phrase_drop() {
        let s = toy(
            &["a", "b", "c", "d"],
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.2]],
        );
        let w = ProjectionMatrix::identity(3);
        let cfg = ProjectionConfig {
            k_neighbors: 1,
            ..Default::default()
        };
        let tr = Translator::new(&w, &s, &s, &cfg, "en", "zh").unwrap();
        for word in ["a", "b", "c", "d"] {
            assert_eq!(tr.translate(&TaggedTerm::new("en", word)).unwrap().word, word);
        }
        assert!(tr.translate(&TaggedTerm::new("en", "zz")).is_none());
        assert!(tr.translate(&TaggedTerm::new("zh", "a")).is_none());

        let mut set = ConstraintSet::new(Relation::Attract, Group::Domain);
        set.insert(TaggedTerm::new("en", "a"), TaggedTerm::new("en", "b"));
        set.insert(TaggedTerm::new("en", "c"), TaggedTerm::new("en", "a b"));
        let (out, rep) = project_constraints(&set, &tr, false).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(rep.phrase_pairs_dropped, 1);
        assert!(out.iter().all(|p| p.terms().iter().all(|t| t.lang == "zh")));
        let empty = ConstraintSet::new(Relation::Attract, Group::Domain);
        assert!(project_constraints(&empty, &tr, true).unwrap().0.is_empty());
    }
}
