//! Attract-Repel specialisation of the vectors named in constraints.
//!
//! Mini-batches of ATTRACT and REPEL pairs are paired with in-batch negatives
//! and pushed through margin hinges; a small L2 pull towards the starting
//! vectors keeps the space anchored. Only rows touched by a batch move.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, Relation};
use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub attract_margin: f64,
    pub repel_margin: f64,
    pub reg_lambda: f64,
    /// Adagrad step size.
    pub learning_rate: f64,
    /// Starting value of the Adagrad accumulators.
    pub initial_accumulator: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            attract_margin: 0.6,
            repel_margin: 0.0,
            reg_lambda: 1e-9,
            learning_rate: 0.05,
            initial_accumulator: 0.1,
            batch_size: 50,
            epochs: 5,
            seed: 0,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.reg_lambda < 0.0 || self.initial_accumulator < 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive; reg_lambda and initial_accumulator non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Row-index pairs and their negatives for one optimisation step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArBatch {
    pub attract: Vec<(usize, usize)>,
    pub repel: Vec<(usize, usize)>,
    pub attract_negatives: Vec<(usize, usize)>,
    pub repel_negatives: Vec<(usize, usize)>,
}

impl ArBatch {
    /// Distinct rows read by the batch.
    pub fn rows(&self) -> BTreeSet<usize> {
        self.attract
            .iter()
            .chain(&self.repel)
            .chain(&self.attract_negatives)
            .chain(&self.repel_negatives)
            .flat_map(|&(a, b)| [a, b])
            .collect()
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArLoss {
    pub total: f64,
    pub attract: f64,
    pub repel: f64,
    pub reg: f64,
}

impl std::ops::AddAssign for ArLoss {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.attract += o.attract;
        self.repel += o.repel;
        self.reg += o.reg;
    }
}

fn farthest_or_nearest(
    anchor: ArrayView1<f64>,
    candidates: &[usize],
    vectors: &Array2<f64>,
    relation: Relation,
) -> usize {
    let mut best = candidates[0];
    let mut best_score = anchor.dot(&vectors.row(best));
    for &c in &candidates[1..] {
        let s = anchor.dot(&vectors.row(c));
        let better = match relation {
            Relation::Attract => s > best_score,
            Relation::Repel => s < best_score,
        };
        if better {
            best = c;
            best_score = s;
        }
    }
    best
}

fn random_other(pool: &[usize], exclude: (usize, usize), rng: &mut Rng) -> Option<usize> {
    let candidates: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&w| w != exclude.0 && w != exclude.1)
        .collect();
    candidates.choose(rng).copied()
}

/// One negative pair per constraint pair, drawn from the batch's own words.
///
/// A random half of the pairs take the most similar (ATTRACT) or least
/// similar (REPEL) batch word for each side; the rest take uniform batch
/// words. When the batch offers no other word, `fallback` is used.
pub fn select_negatives(
    pairs: &[(usize, usize)],
    vectors: &Array2<f64>,
    relation: Relation,
    fallback: &[usize],
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    let batch_words: Vec<usize> = pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let by_similarity: BTreeSet<usize> = order[..pairs.len() / 2 + pairs.len() % 2].iter().copied().collect();

    let mut out = Vec::with_capacity(pairs.len());
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let candidates: Vec<usize> = batch_words.iter().copied().filter(|&w| w != a && w != b).collect();
        let pick = |anchor: usize, rng: &mut Rng| -> Result<usize> {
            if candidates.is_empty() {
                return random_other(fallback, (a, b), rng).ok_or_else(|| {
                    Error::InsufficientData("no word available to serve as a negative".into())
                });
            }
            if by_similarity.contains(&i) {
                Ok(farthest_or_nearest(vectors.row(anchor), &candidates, vectors, relation))
            } else {
                Ok(*candidates.choose(rng).expect("non-empty"))
            }
        };
        let ta = pick(a, rng)?;
        let tb = pick(b, rng)?;
        out.push((ta, tb));
    }
    Ok(out)
}

/// Loss of a batch: attract and repel hinges plus the L2 anchor term.
pub fn ar_loss(batch: &ArBatch, current: &Array2<f64>, initial: &Array2<f64>, cfg: &ArConfig) -> Result<ArLoss> {
    Ok(ar_loss_and_grad(batch, current, initial, cfg, false)?.0)
}

/// Loss and sparse gradient (row index → gradient row).
pub fn ar_loss_and_grad(
    batch: &ArBatch,
    current: &Array2<f64>,
    initial: &Array2<f64>,
    cfg: &ArConfig,
    want_grad: bool,
) -> Result<(ArLoss, BTreeMap<usize, Array1<f64>>)> {
    if batch.attract.len() != batch.attract_negatives.len() || batch.repel.len() != batch.repel_negatives.len() {
        return Err(Error::InvalidArgument("every pair needs exactly one negative pair".into()));
    }
    let rows = batch.rows();
    let d = current.ncols();
    for &r in &rows {
        if r >= current.nrows() {
            return Err(Error::InvalidArgument(format!("row {r} out of range")));
        }
        if current.row(r).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite vector at row {r}")));
        }
    }
    let mut grad: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    let mut add = |row: usize, g: ArrayView1<f64>, scale: f64| {
        if want_grad {
            grad.entry(row)
                .or_insert_with(|| Array1::zeros(d))
                .scaled_add(scale, &g);
        }
    };
    let x = |i: usize| current.row(i);
    let mut loss = ArLoss::default();

    for (&(a, b), &(ta, tb)) in batch.attract.iter().zip(&batch.attract_negatives) {
        let ab = x(a).dot(&x(b));
        let h1 = cfg.attract_margin + x(a).dot(&x(ta)) - ab;
        if h1 > 0.0 {
            loss.attract += h1;
            add(a, x(ta), 1.0);
            add(a, x(b), -1.0);
            add(ta, x(a), 1.0);
            add(b, x(a), -1.0);
        }
        let h2 = cfg.attract_margin + x(b).dot(&x(tb)) - ab;
        if h2 > 0.0 {
            loss.attract += h2;
            add(b, x(tb), 1.0);
            add(b, x(a), -1.0);
            add(tb, x(b), 1.0);
            add(a, x(b), -1.0);
        }
    }
    for (&(a, b), &(ta, tb)) in batch.repel.iter().zip(&batch.repel_negatives) {
        let ab = x(a).dot(&x(b));
        let h1 = cfg.repel_margin + ab - x(a).dot(&x(ta));
        if h1 > 0.0 {
            loss.repel += h1;
            add(a, x(b), 1.0);
            add(a, x(ta), -1.0);
            add(b, x(a), 1.0);
            add(ta, x(a), -1.0);
        }
        let h2 = cfg.repel_margin + ab - x(b).dot(&x(tb));
        if h2 > 0.0 {
            loss.repel += h2;
            add(b, x(a), 1.0);
            add(b, x(tb), -1.0);
            add(a, x(b), 1.0);
            add(tb, x(b), -1.0);
        }
    }
    for &r in &rows {
        let diff = &x(r) - &initial.row(r);
        loss.reg += cfg.reg_lambda * diff.dot(&diff);
        add(r, diff.view(), 2.0 * cfg.reg_lambda);
    }
    loss.total = loss.attract + loss.repel + loss.reg;
    Ok((loss, grad))
}

/// Per-epoch loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: ArLoss,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArReport {
    pub attract_pairs: usize,
    pub repel_pairs: usize,
    pub unresolved_pairs: usize,
    pub updated_rows: usize,
    pub epochs: Vec<EpochLog>,
}

impl ArReport {
    /// Comma-separated training log.
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "epoch,attract,repel,reg,total").map_err(io)?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch, e.loss.attract, e.loss.repel, e.loss.reg, e.loss.total
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Row pairs of the single-word constraints that resolve in `space`.
pub fn resolve_pairs(set: &ConstraintSet, space: &EmbeddingSpace) -> (Vec<(usize, usize)>, usize) {
    let mut out = Vec::with_capacity(set.len());
    let mut skipped = 0;
    for p in set.iter() {
        match (space.index_of(&p.first().surface), space.index_of(&p.second().surface)) {
            (Some(a), Some(b)) if a != b => out.push((a, b)),
            _ => skipped += 1,
        }
    }
    (out, skipped)
}

/// Sparse Adagrad state over the rows of the space.
struct Adagrad {
    lr: f64,
    acc: Array2<f64>,
}

impl Adagrad {
    fn step(&mut self, vectors: &mut Array2<f64>, grad: &BTreeMap<usize, Array1<f64>>) {
        for (&r, g) in grad {
            let mut acc = self.acc.row_mut(r);
            let mut row = vectors.row_mut(r);
            for ((v, a), &gi) in row.iter_mut().zip(acc.iter_mut()).zip(g.iter()) {
                *a += gi * gi;
                if gi != 0.0 {
                    *v -= self.lr * gi / a.sqrt();
                }
            }
        }
    }
}

/// Builds the batches of one epoch.
pub fn epoch_batches(
    attract: &[(usize, usize)],
    repel: &[(usize, usize)],
    vectors: &Array2<f64>,
    fallback: &[usize],
    cfg: &ArConfig,
    rng: &mut Rng,
) -> Result<Vec<ArBatch>> {
    let mut a = attract.to_vec();
    let mut r = repel.to_vec();
    a.shuffle(rng);
    r.shuffle(rng);
    let steps = a.len().div_ceil(cfg.batch_size).max(r.len().div_ceil(cfg.batch_size));
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let chunk = |v: &[(usize, usize)]| -> Vec<(usize, usize)> {
            let lo = (i * cfg.batch_size).min(v.len());
            let hi = ((i + 1) * cfg.batch_size).min(v.len());
            v[lo..hi].to_vec()
        };
        let ba = chunk(&a);
        let br = chunk(&r);
        let na = if ba.is_empty() {
            Vec::new()
        } else {
            select_negatives(&ba, vectors, Relation::Attract, fallback, rng)?
        };
        let nr = if br.is_empty() {
            Vec::new()
        } else {
            select_negatives(&br, vectors, Relation::Repel, fallback, rng)?
        };
        out.push(ArBatch {
            attract: ba,
            repel: br,
            attract_negatives: na,
            repel_negatives: nr,
        });
    }
    Ok(out)
}

/// Specialises the rows named in `attract`/`repel`; every other row is copied unchanged.
pub fn specialise(
    space: &EmbeddingSpace,
    attract: &ConstraintSet,
    repel: &ConstraintSet,
    cfg: &ArConfig,
) -> Result<(EmbeddingSpace, ArReport)> {
    cfg.validate()?;
    if !space.is_unit_normalized(1e-6) {
        return Err(Error::InvalidArgument("specialisation expects a unit-normalised space".into()));
    }
    let (a_pairs, a_skip) = resolve_pairs(attract, space);
    let (r_pairs, r_skip) = resolve_pairs(repel, space);
    if a_pairs.is_empty() && r_pairs.is_empty() {
        return Err(Error::InsufficientData("no resolvable constraints to specialise on".into()));
    }
    let fallback: Vec<usize> = a_pairs
        .iter()
        .chain(&r_pairs)
        .flat_map(|&(a, b)| [a, b])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let initial = space.vectors().clone();
    let mut current = initial.clone();
    let mut opt = Adagrad {
        lr: cfg.learning_rate,
        acc: Array2::from_elem(initial.raw_dim(), cfg.initial_accumulator),
    };
    let mut rng = seed::rng(cfg.seed);
    let mut touched = BTreeSet::new();
    let mut report = ArReport {
        attract_pairs: a_pairs.len(),
        repel_pairs: r_pairs.len(),
        unresolved_pairs: a_skip + r_skip,
        ..Default::default()
    };
    for epoch in 1..=cfg.epochs {
        let mut total = ArLoss::default();
        for batch in epoch_batches(&a_pairs, &r_pairs, &current, &fallback, cfg, &mut rng)? {
            let (loss, grad) = ar_loss_and_grad(&batch, &current, &initial, cfg, true)?;
            total += loss;
            touched.extend(grad.keys().copied());
            opt.step(&mut current, &grad);
        }
        if !total.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss in epoch {epoch}")));
        }
        log::debug!("attract-repel epoch {epoch}: {total:?}");
        report.epochs.push(EpochLog { epoch, loss: total });
    }
    report.updated_rows = touched.len();
    Ok((space.with_vectors(current)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> ArConfig {
        ArConfig::default()
    }

    #[test]
    fn defaults_match_published_values() {
        let c = cfg();
        assert_eq!((c.attract_margin, c.repel_margin, c.reg_lambda), (0.6, 0.0, 1e-9));
        assert_eq!((c.learning_rate, c.batch_size, c.epochs), (0.05, 50, 5));
    }

    #[test]
    fn attract_anchor_values() {
        // rows: a, b identical; t orthogonal
        let v = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let batch = ArBatch {
            attract: vec![(0, 1)],
            attract_negatives: vec![(2, 3)],
            ..Default::default()
        };
        let l = ar_loss(&batch, &v, &v, &cfg()).unwrap();
        assert_eq!(l.attract, 0.0);

        // orthogonal pair whose negatives coincide with the anchors
        let v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let l = ar_loss(&batch, &v, &v, &cfg()).unwrap();
        assert!((l.attract - 3.2).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);
    }

    #[test]
    fn two_pair_batch_negatives_come_from_the_other_pair() {
        let v = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        let mut rng = seed::rng(1);
        for rel in [Relation::Attract, Relation::Repel] {
            let negs = select_negatives(&[(0, 1), (2, 3)], &v, rel, &[], &mut rng).unwrap();
            assert!([2, 3].contains(&negs[0].0) && [2, 3].contains(&negs[0].1));
            assert!([0, 1].contains(&negs[1].0) && [0, 1].contains(&negs[1].1));
        }
    }

    #[test]
    fn single_pair_batch_uses_fallback() {
        let v = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let mut rng = seed::rng(1);
        let negs = select_negatives(&[(0, 1)], &v, Relation::Attract, &[0, 1, 2], &mut rng).unwrap();
        assert_eq!(negs, vec![(2, 2)]);
        assert!(select_negatives(&[(0, 1)], &v, Relation::Attract, &[0, 1], &mut rng).is_err());
    }

    #[test]
    fn negatives_are_deterministic() {
        let v = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let pairs: Vec<_> = (0..6).map(|i| (2 * i, 2 * i + 1)).collect();
        let a = select_negatives(&pairs, &v, Relation::Attract, &[], &mut seed::rng(9)).unwrap();
        let b = select_negatives(&pairs, &v, Relation::Attract, &[], &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        for (&(x, y), &(t1, t2)) in pairs.iter().zip(&a) {
            assert!(t1 != x && t1 != y && t2 != x && t2 != y);
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let v = array![[f64::NAN, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let batch = ArBatch {
            attract: vec![(0, 1)],
            attract_negatives: vec![(2, 3)],
            ..Default::default()
        };
        assert!(matches!(ar_loss(&batch, &v, &v, &cfg()), Err(Error::Numerical(_))));
    }
}
