use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean(i+1..=j)
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two equal-length lists of at least 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("correlation undefined for a constant list".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman input contains non-finite values".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBenchmark {
    pub name: String,
    pub entries: Vec<(String, String, f64)>,
}

impl SimilarityBenchmark {
    /// Reads `word1<TAB>word2<TAB>score` lines; blank lines and `#` comments
    /// are skipped. The benchmark is named after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = if line.contains('\t') {
                line.split('\t').map(str::trim).collect()
            } else {
                line.split_whitespace().collect()
            };
            if fields.len() != 3 {
                return Err(Error::parse(path, i + 1, format!("expected 3 fields, found {}", fields.len())));
            }
            let score: f64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad score {:?}", fields[2])))?;
            if !score.is_finite() {
                return Err(Error::parse(path, i + 1, "non-finite score"));
            }
            entries.push((fields[0].to_string(), fields[1].to_string(), score));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self { name, entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub benchmark: String,
    pub rho: f64,
    pub covered: usize,
    pub total: usize,
}

/// Spearman correlation between gold scores and cosine similarities on the
/// pairs whose words are both in `space`.
pub fn eval_word_similarity(space: &EmbeddingSpace, bench: &SimilarityBenchmark) -> Result<SimilarityReport> {
    let mut gold = Vec::new();
    let mut predicted = Vec::new();
    for (a, b, score) in &bench.entries {
        if space.contains(a) && space.contains(b) {
            gold.push(*score);
            predicted.push(space.cosine(a, b)?);
        }
    }
    if gold.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: only {} of {} pairs are covered",
            bench.name,
            gold.len(),
            bench.entries.len()
        )));
    }
    Ok(SimilarityReport {
        benchmark: bench.name.clone(),
        rho: spearman(&gold, &predicted)?,
        covered: gold.len(),
        total: bench.entries.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_and_reversed_agreement() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 5.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 3.0]), vec![3.0, 1.0, 3.0, 3.0]);
        // ranks (1.5,1.5,3) vs (1,2,3): hand-computed pearson = 0.8660254...
        let rho = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((rho - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_an_error() {
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn coverage_is_reported() {
        let space = EmbeddingSpace::new(
            vec!["a".into(), "b".into(), "c".into()],
            array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]],
        )
        .unwrap();
        let bench = SimilarityBenchmark {
            name: "toy".into(),
            entries: vec![
                ("a".into(), "b".into(), 0.6),
                ("a".into(), "c".into(), 0.0),
                ("b".into(), "c".into(), 0.8),
                ("a".into(), "zzz".into(), 1.0),
            ],
        };
        let r = eval_word_similarity(&space, &bench).unwrap();
        assert_eq!((r.covered, r.total), (3, 4));
        assert_eq!(r.rho, 1.0);
    }

    #[test]
    fn loader_rejects_bad_scores() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ws.tsv");
        std::fs::write(&p, "# c\na\tb\t1.5\n\nb\tc\tx\n").unwrap();
        match SimilarityBenchmark::load(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "a\tb\t1.5\nb c 2\n").unwrap();
        let b = SimilarityBenchmark::load(&p).unwrap();
        assert_eq!(b.name, "ws");
        assert_eq!(b.entries.len(), 2);
    }
}
