//! Binary specialisation-tensor relation classifier.
//!
//! Each input vector is pushed through `K` learned projections with a `tanh`
//! squashing; the two projected vectors of every slice are compared by a
//! bilinear form, and a logistic layer over the `K` slice scores yields the
//! probability that the pair realises the relation the model was trained on.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{resolve, ConstraintSet, Resolution, TaggedTerm, TermPair};
use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Adam, Dense};
use crate::projection::ProjectionMatrix;
use crate::seed::{self, Rng};

pub const FORMAT_VERSION: u32 = 1;

/// The five classifier instances used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StmKind {
    /// General ATTRACT.
    Ga,
    /// General REPEL.
    Gr,
    /// Domain ATTRACT.
    Da,
    /// Domain REPEL.
    Dr,
    /// Cross-lingual domain ATTRACT.
    Dcl,
}

impl StmKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StmKind::Ga => "ga",
            StmKind::Gr => "gr",
            StmKind::Da => "da",
            StmKind::Dr => "dr",
            StmKind::Dcl => "dcl",
        }
    }
}

impl fmt::Display for StmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ga" => Ok(StmKind::Ga),
            "gr" => Ok(StmKind::Gr),
            "da" => Ok(StmKind::Da),
            "dr" => Ok(StmKind::Dr),
            "dcl" => Ok(StmKind::Dcl),
            other => Err(Error::InvalidArgument(format!("unknown classifier kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StmConfig {
    pub num_tensors: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub threshold: f64,
    /// Average the logit over both input orders.
    pub symmetrize: bool,
    /// Fraction of the labelled pairs held out for early stopping.
    pub holdout_fraction: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for StmConfig {
    fn default() -> Self {
        Self {
            num_tensors: 5,
            hidden_size: 300,
            dropout: 0.5,
            batch_size: 32,
            max_iterations: 10,
            learning_rate: 1e-4,
            threshold: 0.5,
            symmetrize: true,
            holdout_fraction: 0.1,
            patience: 2,
            seed: 0,
        }
    }
}

impl StmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_tensors == 0 || self.hidden_size == 0 || self.batch_size == 0 {
            return bad("num_tensors, hidden_size and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmModel {
    pub format_version: u32,
    pub kind: StmKind,
    pub dim: usize,
    pub config: StmConfig,
    /// `K` projections `d → hidden`.
    pub projections: Vec<Dense>,
    /// `K` bilinear forms `hidden × hidden`.
    pub slices: Vec<Array2<f64>>,
    /// `1 × K` output weights.
    pub output_weight: Array2<f64>,
    /// `1 × 1` output bias.
    pub output_bias: Array2<f64>,
}

/// Cached activations for one forward pass over a batch.
struct Trace {
    logits: Array1<f64>,
    scores: Vec<Array1<f64>>,
    s1: Vec<Array2<f64>>,
    s2: Vec<Array2<f64>>,
    m1: Vec<Option<Array2<f64>>>,
    m2: Vec<Option<Array2<f64>>>,
}

/// Gradients laid out like [`StmModel::params_mut`].
pub type StmGrads = Vec<Array2<f64>>;

impl StmModel {
    pub fn new(kind: StmKind, dim: usize, cfg: &StmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.seed);
        let h = cfg.hidden_size;
        let projections = (0..cfg.num_tensors)
            .map(|_| Dense::new(dim, h, 1.0, &mut rng))
            .collect();
        let normal = Normal::new(0.0, 1.0 / h as f64).expect("finite std");
        let slices = (0..cfg.num_tensors)
            .map(|_| Array2::from_shape_fn((h, h), |(i, j)| if i == j { 1.0 / h as f64 } else { 0.0 } + normal.sample(&mut rng)))
            .collect();
        let normal = Normal::new(0.0, 1.0 / (cfg.num_tensors as f64).sqrt()).expect("finite std");
        let output_weight = Array2::from_shape_fn((1, cfg.num_tensors), |_| normal.sample(&mut rng).abs());
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind,
            dim,
            config: cfg.clone(),
            projections,
            slices,
            output_weight,
            output_bias: Array2::zeros((1, 1)),
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for p in &mut self.projections {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        for s in &mut self.slices {
            out.push(s);
        }
        out.push(&mut self.output_weight);
        out.push(&mut self.output_bias);
        out
    }

    fn slice_form(&self, k: usize) -> Array2<f64> {
        if self.config.symmetrize {
            (&self.slices[k] + &self.slices[k].t()) * 0.5
        } else {
            self.slices[k].clone()
        }
    }

    fn forward(&self, x1: &Array2<f64>, x2: &Array2<f64>, mut rng: Option<&mut Rng>) -> Trace {
        let b = x1.nrows();
        let k_count = self.projections.len();
        let mut logits = Array1::from_elem(b, self.output_bias[[0, 0]]);
        let mut t = Trace {
            logits: Array1::zeros(0),
            scores: Vec::with_capacity(k_count),
            s1: Vec::with_capacity(k_count),
            s2: Vec::with_capacity(k_count),
            m1: Vec::with_capacity(k_count),
            m2: Vec::with_capacity(k_count),
        };
        let p = self.config.dropout;
        let mut mask = |a: &Array2<f64>| -> Option<Array2<f64>> {
            let r = rng.as_deref_mut()?;
            if p == 0.0 {
                return None;
            }
            let keep = 1.0 - p;
            Some(a.mapv(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }))
        };
        for k in 0..k_count {
            let s1 = self.projections[k].forward(x1).mapv(f64::tanh);
            let s2 = self.projections[k].forward(x2).mapv(f64::tanh);
            let m1 = mask(&s1);
            let m2 = mask(&s2);
            let u1 = m1.as_ref().map_or_else(|| s1.clone(), |m| &s1 * m);
            let u2 = m2.as_ref().map_or_else(|| s2.clone(), |m| &s2 * m);
            let score = (&u1 * &u2.dot(&self.slice_form(k).t())).sum_axis(Axis(1));
            logits.scaled_add(self.output_weight[[0, k]], &score);
            t.scores.push(score);
            t.s1.push(s1);
            t.s2.push(s2);
            t.m1.push(m1);
            t.m2.push(m2);
        }
        t.logits = logits;
        t
    }

    /// Mean binary cross-entropy of a labelled batch and its parameter gradients.
    fn loss_and_grads(
        &self,
        x1: &Array2<f64>,
        x2: &Array2<f64>,
        labels: &Array1<f64>,
        rng: Option<&mut Rng>,
    ) -> (f64, StmGrads) {
        let t = self.forward(x1, x2, rng);
        let b = x1.nrows() as f64;
        let loss = t
            .logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / b;
        let dlogit: Array1<f64> = t
            .logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| (sigmoid(z) - y) / b)
            .collect();

        let k_count = self.projections.len();
        let mut proj_grads = Vec::with_capacity(2 * k_count);
        let mut slice_grads = Vec::with_capacity(k_count);
        let mut dw = Array2::zeros((1, k_count));
        for k in 0..k_count {
            dw[[0, k]] = dlogit.dot(&t.scores[k]);
            let dscore = (&dlogit * self.output_weight[[0, k]]).insert_axis(Axis(1));
            let u1 = t.m1[k].as_ref().map_or_else(|| t.s1[k].clone(), |m| &t.s1[k] * m);
            let u2 = t.m2[k].as_ref().map_or_else(|| t.s2[k].clone(), |m| &t.s2[k] * m);
            let a = self.slice_form(k);
            let mut du1 = &u2.dot(&a.t()) * &dscore;
            let mut du2 = &u1.dot(&a) * &dscore;
            let da = (&u1 * &dscore).t().dot(&u2);
            let dm = if self.config.symmetrize {
                (&da + &da.t()) * 0.5
            } else {
                da
            };
            if let Some(m) = &t.m1[k] {
                du1 = &du1 * m;
            }
            if let Some(m) = &t.m2[k] {
                du2 = &du2 * m;
            }
            let dz1 = &du1 * &t.s1[k].mapv(|v| 1.0 - v * v);
            let dz2 = &du2 * &t.s2[k].mapv(|v| 1.0 - v * v);
            let gw = dz1.t().dot(x1) + dz2.t().dot(x2);
            let gb = (dz1.sum_axis(Axis(0)) + dz2.sum_axis(Axis(0))).insert_axis(Axis(0));
            proj_grads.push(gw);
            proj_grads.push(gb);
            slice_grads.push(dm);
        }
        let db = Array2::from_elem((1, 1), dlogit.sum());
        let mut grads = proj_grads;
        grads.extend(slice_grads);
        grads.push(dw);
        grads.push(db);
        (loss, grads)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: n,
            });
        }
        Ok(())
    }

    /// Relation probabilities for row-aligned pairs, dropout off.
    /// Mean binary cross-entropy and its gradient, dropout off; gradients
    /// follow the order of [`StmModel::params_mut`].
    pub fn loss_and_gradients(&self, x1: &Array2<f64>, x2: &Array2<f64>, labels: &Array1<f64>) -> (f64, StmGrads) {
        self.loss_and_grads(x1, x2, labels, None)
    }

    pub fn score_batch(&self, x1: &Array2<f64>, x2: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_dim(x1.ncols())?;
        self.check_dim(x2.ncols())?;
        if x1.nrows() != x2.nrows() {
            return Err(Error::InvalidArgument("pair batches differ in length".into()));
        }
        let t = self.forward(x1, x2, None);
        Ok(t.logits.mapv(probability))
    }

    /// Probability in the open interval (0, 1) that `(v1, v2)` holds the relation.
    pub fn score_pair(&self, v1: &Array1<f64>, v2: &Array1<f64>) -> Result<f64> {
        let x1 = v1.clone().insert_axis(Axis(0));
        let x2 = v2.clone().insert_axis(Axis(0));
        Ok(self.score_batch(&x1, &x2)?[0])
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
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "{}: unsupported format version {}",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Sigmoid kept strictly inside (0, 1).
fn probability(z: f64) -> f64 {
    sigmoid(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StmReport {
    pub train_size: usize,
    pub heldout_size: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub heldout_loss: Vec<f64>,
    pub heldout_accuracy: f64,
}

/// Labelled vector pairs.
#[derive(Debug, Clone)]
pub struct PairData {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    pub labels: Array1<f64>,
}

impl PairData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            left: self.left.select(Axis(0), idx),
            right: self.right.select(Axis(0), idx),
            labels: self.labels.select(Axis(0), idx),
        }
    }
}

/// Accuracy of thresholded predictions.
pub fn accuracy(model: &StmModel, data: &PairData, threshold: f64) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let p = model.score_batch(&data.left, &data.right)?;
    let hits = p
        .iter()
        .zip(&data.labels)
        .filter(|(&p, &y)| (p >= threshold) == (y > 0.5))
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mini-batch Adam training with early stopping on a held-out split.
pub fn train_on_pairs(kind: StmKind, data: &PairData, cfg: &StmConfig) -> Result<(StmModel, StmReport)> {
    cfg.validate()?;
    let dim = data.left.ncols();
    if data.right.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: data.right.ncols(),
        });
    }
    let positives = data.labels.iter().filter(|&&y| y > 0.5).count();
    if positives < 10 {
        return Err(Error::InsufficientData(format!(
            "{kind}: {positives} resolvable positive pairs, need at least 10"
        )));
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, "stm-train"));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((data.len() as f64 * cfg.holdout_fraction).round() as usize).min(data.len() - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let heldout = data.select(hold_idx);
    let train = data.select(train_idx);

    let mut model = StmModel::new(kind, dim, cfg)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_iterations {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let b = train.select(chunk);
            let (_, grads) = model.loss_and_grads(&b.left, &b.right, &b.labels, Some(&mut rng));
            opt.update(model.params_mut(), &grads);
        }
        let eval = if heldout.is_empty() { &train } else { &heldout };
        let (loss, _) = model.loss_and_grads(&eval.left, &eval.right, &eval.labels, None);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("{kind}: non-finite loss at epoch {epoch}")));
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    let heldout_accuracy = accuracy(&best, if heldout.is_empty() { &train } else { &heldout }, cfg.threshold)?;
    let report = StmReport {
        train_size: train.len(),
        heldout_size: heldout.len(),
        epochs_run: history.len(),
        best_epoch,
        heldout_loss: history,
        heldout_accuracy,
    };
    Ok((best, report))
}

/// Supplies unit vectors for tagged terms, possibly from two languages.
pub trait TermVectors: Sync {
    fn dim(&self) -> usize;
    fn vector(&self, term: &TaggedTerm) -> Option<Array1<f64>>;
    /// A uniformly drawn single-word term in `lang`.
    fn sample_term(&self, lang: &str, rng: &mut Rng) -> Option<TaggedTerm>;
}

/// The target space, optionally joined by a source space mapped through `W`.
pub struct SharedSpace<'a> {
    target: &'a EmbeddingSpace,
    target_lang: String,
    source: Option<(&'a EmbeddingSpace, &'a ProjectionMatrix, String)>,
}

impl<'a> SharedSpace<'a> {
    pub fn target_only(target: &'a EmbeddingSpace, lang: &str) -> Self {
        Self {
            target,
            target_lang: lang.to_string(),
            source: None,
        }
    }

    pub fn with_source(
        target: &'a EmbeddingSpace,
        target_lang: &str,
        source: &'a EmbeddingSpace,
        w: &'a ProjectionMatrix,
        source_lang: &str,
    ) -> Result<Self> {
        if w.src_dim() != source.dim() || w.tgt_dim() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                actual: w.tgt_dim(),
            });
        }
        Ok(Self {
            target,
            target_lang: target_lang.to_string(),
            source: Some((source, w, source_lang.to_string())),
        })
    }
}

fn unit(v: Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

fn resolved_vector(space: &EmbeddingSpace, term: &TaggedTerm) -> Option<Array1<f64>> {
    match resolve(space, term)? {
        Resolution::Word(i) => Some(space.row(i).to_owned()),
        Resolution::Phrase(ix) => {
            let mut acc = Array1::zeros(space.dim());
            for &i in &ix {
                acc += &space.row(i);
            }
            Some(acc / ix.len() as f64)
        }
    }
}

impl TermVectors for SharedSpace<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn vector(&self, term: &TaggedTerm) -> Option<Array1<f64>> {
        if term.lang == self.target_lang {
            return unit(resolved_vector(self.target, term)?);
        }
        let (src, w, lang) = self.source.as_ref()?;
        if term.lang != *lang {
            return None;
        }
        unit(w.apply(resolved_vector(src, term)?.view()))
    }

    fn sample_term(&self, lang: &str, rng: &mut Rng) -> Option<TaggedTerm> {
        let space = if lang == self.target_lang {
            self.target
        } else {
            match &self.source {
                Some((s, _, l)) if l == lang => s,
                _ => return None,
            }
        };
        let word = space.words().choose(rng)?;
        Some(TaggedTerm::new(lang, word.clone()))
    }
}

/// Where training negatives come from.
pub enum Negatives<'a> {
    /// Half random word pairs, half pairs from the opposite relation when available.
    Auto { confusion: Option<&'a ConstraintSet> },
    Explicit(&'a ConstraintSet),
}

fn pair_vectors(space: &dyn TermVectors, p: &TermPair) -> Option<(Array1<f64>, Array1<f64>)> {
    Some((space.vector(p.first())?, space.vector(p.second())?))
}

/// Builds labelled data from constraint pairs and trains a classifier.
pub fn train_stm(
    kind: StmKind,
    positives: &ConstraintSet,
    negatives: Negatives<'_>,
    space: &dyn TermVectors,
    cfg: &StmConfig,
) -> Result<(StmModel, StmReport)> {
    let mut rng = seed::rng(seed::derive(cfg.seed, "stm-negatives"));
    let pos: Vec<(Array1<f64>, Array1<f64>)> = positives.iter().filter_map(|p| pair_vectors(space, p)).collect();
    if pos.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "{kind}: {} resolvable positive pairs, need at least 10",
            pos.len()
        )));
    }
    let neg: Vec<(Array1<f64>, Array1<f64>)> = match negatives {
        Negatives::Explicit(set) => set.iter().filter_map(|p| pair_vectors(space, p)).collect(),
        Negatives::Auto { confusion } => {
            let want = pos.len();
            let mut out = Vec::with_capacity(want);
            if let Some(conf) = confusion {
                let mut pool: Vec<&TermPair> = conf.iter().filter(|p| !positives.contains(p)).collect();
                pool.shuffle(&mut rng);
                out.extend(pool.into_iter().filter_map(|p| pair_vectors(space, p)).take(want / 2));
            }
            let langs: Vec<[String; 2]> = positives
                .iter()
                .map(|p| [p.first().lang.clone(), p.second().lang.clone()])
                .collect();
            let mut attempts = 0;
            while out.len() < want && attempts < want * 20 {
                attempts += 1;
                let [la, lb] = &langs[rng.random_range(0..langs.len())];
                let (Some(a), Some(b)) = (space.sample_term(la, &mut rng), space.sample_term(lb, &mut rng)) else {
                    continue;
                };
                let Some(p) = TermPair::new(a, b) else { continue };
                if positives.contains(&p) {
                    continue;
                }
                if let Some(v) = pair_vectors(space, &p) {
                    out.push(v);
                }
            }
            out
        }
    };
    let n = pos.len() + neg.len();
    let d = space.dim();
    let mut left = Array2::zeros((n, d));
    let mut right = Array2::zeros((n, d));
    let mut labels = Array1::zeros(n);
    for (i, (a, b)) in pos.iter().chain(neg.iter()).enumerate() {
        left.row_mut(i).assign(a);
        right.row_mut(i).assign(b);
        labels[i] = if i < pos.len() { 1.0 } else { 0.0 };
    }
    train_on_pairs(kind, &PairData { left, right, labels }, cfg)
}

/// Counters reported by [`filter_constraints`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub unresolvable: usize,
}

/// Keeps candidate pairs scoring at least `threshold`.
pub fn filter_constraints(
    model: &StmModel,
    candidates: &ConstraintSet,
    space: &dyn TermVectors,
    threshold: f64,
) -> Result<(ConstraintSet, FilterReport)> {
    let pairs: Vec<&TermPair> = candidates.iter().collect();
    let scored: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|p| {
            let (a, b) = pair_vectors(space, p)?;
            model.score_pair(&a, &b).ok()
        })
        .collect();
    let mut kept = ConstraintSet::new(candidates.relation, candidates.group);
    let mut report = FilterReport {
        input: pairs.len(),
        ..Default::default()
    };
    for (p, s) in pairs.into_iter().zip(scored) {
        match s {
            None => report.unresolvable += 1,
            Some(s) if s >= threshold => {
                kept.insert_pair(p.clone());
            }
            Some(_) => report.dropped += 1,
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

/// Distinct terms of a set, for diagnostics.
pub fn terms(set: &ConstraintSet) -> BTreeSet<&TaggedTerm> {
    set.iter().flat_map(|p| p.terms()).collect()
}
