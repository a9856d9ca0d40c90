//! Exact t-SNE for small point sets (a few thousand at most).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// Step size; `None` scales it with the number of points.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 15.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// One `[x, y]` row per input point.
    pub coords: Vec<[f64; 2]>,
    pub initial_kl: f64,
    pub final_kl: f64,
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let diff = &x.row(i) - &x.row(j);
            let v = diff.dot(&diff);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional probabilities with per-point bandwidths found by bisection on
/// the entropy, symmetrised and normalised to sum to 1.
fn joint_probabilities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (f64::NEG_INFINITY, f64::INFINITY, 1.0);
        let min_d = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).fold(f64::INFINITY, f64::min);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[[i, j]] - min_d) * beta).exp() };
                sum += row[j];
                weighted += row[j] * (d[[i, j]] - min_d);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in row.iter_mut() {
                *v /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-6 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    let sym = (&p + &p.t()) / (2.0 * n as f64);
    sym.mapv(|v| v.max(1e-12))
}

/// Student-t affinities (unnormalised numerators and their sum).
fn affinities(y: &[[f64; 2]]) -> (Array2<f64>, f64) {
    let n = y.len();
    let mut num = Array2::zeros((n, n));
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// KL(P || Q) for a layout.
pub fn kl_divergence(p: &Array2<f64>, y: &[[f64; 2]]) -> f64 {
    let (num, sum) = affinities(y);
    let n = y.len();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[[i, j]] / sum).max(1e-12);
                kl += p[[i, j]] * (p[[i, j]] / q).ln();
            }
        }
    }
    kl
}

/// Embeds row vectors into the plane.
pub fn project_2d(vectors: &Array2<f64>, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = vectors.nrows();
    if n < 2 || cfg.perplexity <= 0.0 || cfg.perplexity >= (n as f64 - 1.0) / 3.0 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} is infeasible for {n} points (must be below (n - 1) / 3)",
            cfg.perplexity
        )));
    }
    let p = joint_probabilities(&squared_distances(vectors), cfg.perplexity);
    let mut rng = seed::rng(seed::derive(cfg.seed, "tsne"));
    let normal = Normal::new(0.0, 1e-4).expect("finite std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let initial_kl = kl_divergence(&p, &y);
    let lr = cfg.learning_rate.unwrap_or_else(|| (n as f64 / 12.0).clamp(10.0, 200.0));
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iterations { 0.5 } else { 0.8 };
        let (num, sum) = affinities(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let m = (exaggeration * p[[i, j]] - num[[i, j]] / sum) * num[[i, j]];
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (g[a] > 0.0) != (velocity[i][a] > 0.0) {
                    gains[i][a] + 0.2
                } else {
                    (gains[i][a] * 0.8).max(0.01)
                };
                velocity[i][a] = momentum * velocity[i][a] - lr * gains[i][a] * g[a];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), r| (a + r[0], b + r[1]));
        for r in y.iter_mut() {
            r[0] -= mx / n as f64;
            r[1] -= my / n as f64;
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("t-SNE diverged".into()));
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(TsneResult {
        coords: y,
        initial_kl,
        final_kl,
    })
}

/// Mean silhouette coefficient of a labelled 2-D layout.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = coords.len();
    let dist = |a: usize, b: usize| ((coords[a][0] - coords[b][0]).powi(2) + (coords[a][1] - coords[b][1]).powi(2)).sqrt();
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            if others.is_empty() {
                None
            } else {
                Some(others.iter().map(|&j| dist(i, j)).sum::<f64>() / others.len() as f64)
            }
        };
        let Some(a) = mean_to(labels[i]) else { continue };
        let b = classes
            .iter()
            .filter(|&&c| c != labels[i])
            .filter_map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `word,cluster,x,y` rows.
pub fn write_coordinates(path: impl AsRef<Path>, points: &[(String, usize)], coords: &[[f64; 2]]) -> Result<()> {
    let path = path.as_ref();
    if points.len() != coords.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: coords.len(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "word,cluster,x,y").map_err(io)?;
    for ((word, c), xy) in points.iter().zip(coords) {
        writeln!(w, "{},{},{},{}", csv_field(word), c, xy[0], xy[1]).map_err(io)?;
    }
    w.flush().map_err(io)
}
