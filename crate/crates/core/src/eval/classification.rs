use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Sexist,
    NonSexist,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Sexist, Label::NonSexist];

    fn positive(self) -> bool {
        self == Label::Sexist
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Sexist => "SEXIST",
            Label::NonSexist => "NON_SEXIST",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "1" | "sexist" => Ok(Label::Sexist),
            "0" | "non_sexist" | "nonsexist" => Ok(Label::NonSexist),
            other => Err(Error::InvalidArgument(format!("unknown label {other:?}"))),
        }
    }
}

/// Text either as a raw string to be segmented or as tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Text {
    Raw(String),
    Tokens(Vec<String>),
}

impl Text {
    /// Whitespace-separated input counts as tokenised; anything else is raw.
    pub fn from_field(s: &str) -> Self {
        let s = s.trim();
        if s.split_whitespace().nth(1).is_some() {
            Text::Tokens(s.split_whitespace().map(str::to_string).collect())
        } else {
            Text::Raw(s.to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: Text,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub records: Vec<Record>,
    /// One entry per record once split; empty before.
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn new(records: Vec<Record>) -> Self {
        Self {
            records,
            splits: Vec::new(),
        }
    }

    /// Reads `label<TAB>text` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (label, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected label<TAB>text"))?;
            let label = label.parse().map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))?;
            records.push(Record {
                text: Text::from_field(text),
                label,
            });
        }
        Ok(Self::new(records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_split(&self) -> bool {
        self.splits.len() == self.records.len() && !self.records.is_empty()
    }

    pub fn part(&self, split: Split) -> Vec<&Record> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(r, _)| r)
            .collect()
    }

    /// `(sexist, non_sexist)` counts per split, in train/validation/test order.
    pub fn label_distribution(&self) -> [(Split, usize, usize); 3] {
        [Split::Train, Split::Validation, Split::Test].map(|s| {
            let part = self.part(s);
            let pos = part.iter().filter(|r| r.label.positive()).count();
            (s, pos, part.len() - pos)
        })
    }
}

/// Split sizes by largest remainder; ties go to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Stratified train/validation/test split.
///
/// Records of each class are shuffled and interleaved in proportion, so every
/// prefix of the merged order keeps the class balance; the merged order is then
/// cut at the exact split sizes.
pub fn split_dataset(data: &LabeledDataset, ratios: [f64; 3], seed: u64) -> Result<LabeledDataset> {
    if data.len() < 10 {
        return Err(Error::InsufficientData(format!("{} records, need at least 10", data.len())));
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = seed::rng(seed::derive(seed, "split"));
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(data.len());
    for (c, label) in Label::ALL.iter().enumerate() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.records[i].label == *label).collect();
        idx.shuffle(&mut rng);
        let m = idx.len() as f64;
        keyed.extend(idx.into_iter().enumerate().map(|(rank, i)| ((rank as f64 + 0.5) / m, c, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let sizes = split_sizes(data.len(), ratios);
    let mut splits = vec![Split::Train; data.len()];
    let parts = [Split::Train, Split::Validation, Split::Test];
    let mut pos = 0;
    for (part, size) in parts.iter().zip(&sizes) {
        for &(_, _, i) in &keyed[pos..pos + size] {
            splits[i] = *part;
        }
        pos += size;
    }
    let out = LabeledDataset {
        records: data.records.clone(),
        splits,
    };
    for ((part, pos, neg), ratio) in out.label_distribution().into_iter().zip(ratios) {
        if ratio > 0.0 && (pos == 0 || neg == 0) {
            return Err(Error::InsufficientData(format!("{part:?} split has no members of one class")));
        }
    }
    Ok(out)
}

/// A text's averaged vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVector {
    pub vector: Array1<f64>,
    pub tokens_used: usize,
    /// No token was found; `vector` is zero.
    pub all_oov: bool,
}

/// Segments raw text by greedy longest match against a vocabulary.
pub struct TextEmbedder<'a> {
    space: &'a EmbeddingSpace,
    max_chars: usize,
}

impl<'a> TextEmbedder<'a> {
    pub fn new(space: &'a EmbeddingSpace) -> Self {
        let max_chars = space.words().iter().map(|w| w.chars().count()).max().unwrap_or(1);
        Self { space, max_chars }
    }

    /// Greedy longest-match segmentation; unmatched positions become single characters.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = (2..=self.max_chars.min(chars.len() - i))
                .rev()
                .map(|len| chars[i..i + len].iter().collect::<String>())
                .find(|cand| self.space.contains(cand));
            let piece = longest.unwrap_or_else(|| chars[i].to_string());
            i += piece.chars().count();
            out.push(piece);
        }
        out
    }

    pub fn embed(&self, text: &Text) -> TextVector {
        let tokens = match text {
            Text::Raw(s) => self.segment(s),
            Text::Tokens(t) => t.clone(),
        };
        match self.space.phrase_vector(&tokens) {
            Ok(p) => TextVector {
                vector: p.vector,
                tokens_used: tokens.len() - p.oov_tokens,
                all_oov: false,
            },
            Err(_) => TextVector {
                vector: Array1::zeros(self.space.dim()),
                tokens_used: 0,
                all_oov: true,
            },
        }
    }
}

pub fn embed_text(space: &EmbeddingSpace, text: &Text) -> TextVector {
    TextEmbedder::new(space).embed(text)
}

/// Logistic-regression stand-in for a downstream text classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    pub fn predict(&self, x: &Array1<f64>) -> Label {
        if self.weights.dot(x) + self.bias >= 0.0 {
            Label::Sexist
        } else {
            Label::NonSexist
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    /// Train/validation/test proportions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.5,
            batch_size: 32,
            l2: 1e-4,
            split: [0.72, 0.18, 0.10],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub f1_sexist: f64,
    pub f1_nonsexist: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub support: usize,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-class F1, macro-F1 and accuracy from gold and predicted labels.
pub fn classification_metrics(gold: &[Label], predicted: &[Label]) -> Result<ClassificationReport> {
    if gold.len() != predicted.len() || gold.is_empty() {
        return Err(Error::InvalidArgument("gold and predictions must be equal-length and non-empty".into()));
    }
    let count = |g: Label, p: Label| gold.iter().zip(predicted).filter(|(a, b)| **a == g && **b == p).count();
    let tp = count(Label::Sexist, Label::Sexist);
    let tn = count(Label::NonSexist, Label::NonSexist);
    let fp = count(Label::NonSexist, Label::Sexist);
    let fn_ = count(Label::Sexist, Label::NonSexist);
    let f1_sexist = f1(tp, fp, fn_);
    let f1_nonsexist = f1(tn, fn_, fp);
    Ok(ClassificationReport {
        f1_sexist,
        f1_nonsexist,
        macro_f1: (f1_sexist + f1_nonsexist) / 2.0,
        accuracy: (tp + tn) as f64 / gold.len() as f64,
        support: gold.len(),
    })
}

struct Features {
    x: Array2<f64>,
    y: Vec<Label>,
}

fn features(embedder: &TextEmbedder<'_>, records: &[&Record]) -> Features {
    let dim = embedder.space.dim();
    let mut x = Array2::zeros((records.len(), dim));
    for (i, r) in records.iter().enumerate() {
        x.row_mut(i).assign(&embedder.embed(&r.text).vector);
    }
    Features {
        x,
        y: records.iter().map(|r| r.label).collect(),
    }
}

fn score(model: &LinearClassifier, f: &Features) -> Result<ClassificationReport> {
    let predicted: Vec<Label> = f.x.rows().into_iter().map(|r| model.predict(&r.to_owned())).collect();
    classification_metrics(&f.y, &predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub best_epoch: usize,
    pub validation_macro_f1: f64,
}

/// Mini-batch logistic regression on averaged text vectors. The returned model
/// is the epoch with the best validation macro-F1 (train macro-F1 when there is
/// no validation split).
pub fn train_proxy_classifier(
    space: &EmbeddingSpace,
    data: &LabeledDataset,
    cfg: &ClassifierConfig,
) -> Result<(LinearClassifier, ClassifierTraining)> {
    if !data.is_split() {
        return Err(Error::InvalidArgument("dataset has not been split".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("epochs, batch_size and learning_rate must be positive".into()));
    }
    let embedder = TextEmbedder::new(space);
    let train = features(&embedder, &data.part(Split::Train));
    if Label::ALL.iter().any(|l| !train.y.contains(l)) {
        return Err(Error::InsufficientData("training split needs both classes".into()));
    }
    let val_records = data.part(Split::Validation);
    let val = if val_records.is_empty() {
        None
    } else {
        Some(features(&embedder, &val_records))
    };

    let mut rng = seed::rng(seed::derive(cfg.seed, "proxy-classifier"));
    let normal = Normal::new(0.0, 0.01).expect("finite std");
    let mut model = LinearClassifier {
        weights: Array1::from_shape_fn(space.dim(), |_| normal.sample(&mut rng)),
        bias: 0.0,
    };
    let targets: Vec<f64> = train.y.iter().map(|l| if l.positive() { 1.0 } else { 0.0 }).collect();
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    let mut best = (model.clone(), ClassifierTraining { best_epoch: 0, validation_macro_f1: f64::NEG_INFINITY });
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut gw = &model.weights * cfg.l2;
            let mut gb = 0.0;
            for &i in chunk {
                let x = train.x.row(i);
                let err = sigmoid(model.weights.dot(&x) + model.bias) - targets[i];
                gw.scaled_add(err / chunk.len() as f64, &x);
                gb += err / chunk.len() as f64;
            }
            model.weights.scaled_add(-cfg.learning_rate, &gw);
            model.bias -= cfg.learning_rate * gb;
        }
        let m = score(&model, val.as_ref().unwrap_or(&train))?.macro_f1;
        if m > best.1.validation_macro_f1 {
            best = (model.clone(), ClassifierTraining { best_epoch: epoch, validation_macro_f1: m });
        }
    }
    Ok(best)
}

/// Scores `model` on the test split.
pub fn eval_classifier(model: &LinearClassifier, space: &EmbeddingSpace, data: &LabeledDataset) -> Result<ClassificationReport> {
    let test = data.part(Split::Test);
    if test.is_empty() {
        return Err(Error::InsufficientData("test split is empty".into()));
    }
    score(model, &features(&TextEmbedder::new(space), &test))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<ClassificationReport>,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Trains and tests once per seed on a fixed split; only initialisation and
/// batch order change between runs.
pub fn evaluate_over_seeds(
    space: &EmbeddingSpace,
    data: &LabeledDataset,
    cfg: &ClassifierConfig,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let run_cfg = ClassifierConfig { seed: s, ..cfg.clone() };
        let (model, _) = train_proxy_classifier(space, data, &run_cfg)?;
        runs.push(eval_classifier(&model, space, data)?);
    }
    let (macro_f1_mean, macro_f1_std) = mean_std(&runs.iter().map(|r| r.macro_f1).collect::<Vec<_>>());
    let (accuracy_mean, accuracy_std) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        runs,
        macro_f1_mean,
        macro_f1_std,
        accuracy_mean,
        accuracy_std,
    })
}
