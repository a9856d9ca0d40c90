//! Seeded synthetic data: small bilingual worlds with planted structure.
//!
//! Used by the test suites, the benchmarks and the `fixture` CLI command.
//! Nothing here resembles real language data; the point is that the planted
//! structure is known exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::constraints::{ConstraintSet, Group, Relation, TaggedTerm};
use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

fn gaussian(rng: &mut Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// A random orthogonal matrix (QR of a Gaussian matrix, sign-fixed).
pub fn random_rotation(d: usize, rng: &mut Rng) -> Array2<f64> {
    let g: nalgebra::DMatrix<f64> = nalgebra::DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)] * r[(j, j)].signum())
}

fn space(words: Vec<String>, rows: &[Array1<f64>]) -> EmbeddingSpace {
    let d = rows[0].len();
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    EmbeddingSpace::new(words, m).expect("generated rows are finite and non-zero")
}

/// Source space, target space = rotated source + noise, and the word pairing.
pub struct RotatedPair {
    pub source: EmbeddingSpace,
    pub target: EmbeddingSpace,
    pub rotation: Array2<f64>,
    /// `(source word, target word)` for every row, in row order.
    pub pairs: Vec<(String, String)>,
}

/// Unit Gaussian source rows; target row `i` is `R x_i + noise`, renormalised.
pub fn rotated_bilingual(n: usize, d: usize, noise: f64, seed_: u64) -> RotatedPair {
    let mut rng = seed::rng(seed::derive(seed_, "rotated-bilingual"));
    let rotation = random_rotation(d, &mut rng);
    let src: Vec<Array1<f64>> = (0..n).map(|_| unit(gaussian(&mut rng, d))).collect();
    let tgt: Vec<Array1<f64>> = src
        .iter()
        .map(|x| unit(rotation.dot(x) + gaussian(&mut rng, d) * (noise / (d as f64).sqrt())))
        .collect();
    let sw: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let tw: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    RotatedPair {
        pairs: sw.iter().cloned().zip(tw.iter().cloned()).collect(),
        source: space(sw, &src),
        target: space(tw, &tgt),
        rotation,
    }
}

/// Clustered unit vectors: `clusters × per_cluster` words around random centres.
pub fn clustered_space(clusters: usize, per_cluster: usize, d: usize, spread: f64, seed_: u64) -> EmbeddingSpace {
    let mut rng = seed::rng(seed::derive(seed_, "clustered"));
    let mut words = Vec::new();
    let mut rows = Vec::new();
    for c in 0..clusters {
        let centre = unit(gaussian(&mut rng, d));
        for j in 0..per_cluster {
            words.push(format!("c{c}w{j}"));
            rows.push(unit(&centre + &(gaussian(&mut rng, d) * (spread / (d as f64).sqrt()))));
        }
    }
    space(words, &rows)
}

/// A 50-word space with ten ATTRACT pairs and five REPEL pairs.
///
/// Words `w0..w29` appear in constraints; `w30..w49` never do.
pub struct ArToy {
    pub space: EmbeddingSpace,
    pub attract: ConstraintSet,
    pub repel: ConstraintSet,
}

pub fn attract_repel_toy(seed_: u64) -> ArToy {
    let mut rng = seed::rng(seed::derive(seed_, "ar-toy"));
    let d = 16;
    let rows: Vec<Array1<f64>> = (0..50).map(|_| unit(gaussian(&mut rng, d))).collect();
    let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let t = |i: usize| TaggedTerm::new("zh", format!("w{i}"));
    let mut attract = ConstraintSet::new(Relation::Attract, Group::Domain);
    for i in 0..10 {
        attract.insert(t(2 * i), t(2 * i + 1));
    }
    let mut repel = ConstraintSet::new(Relation::Repel, Group::Domain);
    for i in 0..5 {
        repel.insert(t(20 + 2 * i), t(21 + 2 * i));
    }
    ArToy {
        space: space(words, &rows),
        attract,
        repel,
    }
}

/// Parameters of the on-disk toy world.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub dim: usize,
    pub concepts: usize,
    pub words_per_concept: usize,
    /// Words per concept used in constraints; the rest stay unseen.
    pub seen_per_concept: usize,
    pub fillers: usize,
    pub records: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 24,
            concepts: 10,
            words_per_concept: 12,
            seen_per_concept: 8,
            fillers: 60,
            records: 240,
            seed: 7,
        }
    }
}

/// What [`write_toy_world`] produced, with planted counts.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub dir: PathBuf,
    pub config_path: PathBuf,
    /// Multi-token pairs across all source and cross-lingual files.
    pub phrase_pairs: usize,
    pub cluster_seeds: Vec<String>,
}

fn zh_word(i: usize) -> String {
    let a = char::from_u32(0x4E00 + i as u32).expect("CJK block");
    let b = char::from_u32(0x6C00 + ((i * 37) % 997) as u32).expect("CJK block");
    format!("{a}{b}")
}

struct Lexicon {
    en: Vec<String>,
    zh: Vec<String>,
    /// `concept[c][j]` = row index of word `j` of concept `c`.
    concept: Vec<Vec<usize>>,
}

fn write_lines(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn pair_line(a: &TaggedTerm, b: &TaggedTerm) -> String {
    format!("{a}\t{b}\n")
}

/// Writes vectors, constraints, a seed dictionary, a similarity benchmark,
/// a labelled dataset, cluster seeds and a pipeline config into `dir`.
///
/// Concepts come in antonym pairs `(0,1), (2,3), ...` whose centres are close
/// in the plain space. Concepts below `concepts / 2` feed the general
/// constraints, the rest the domain, cross-lingual and external ones.
pub fn write_toy_world(dir: impl AsRef<Path>, cfg: &ToyConfig) -> Result<ToyWorld> {
    let dir = dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if cfg.concepts < 4 || cfg.concepts % 2 != 0 || cfg.seen_per_concept < 4 || cfg.seen_per_concept > cfg.words_per_concept {
        return Err(Error::InvalidArgument("toy world needs an even number (>= 4) of concepts".into()));
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, "toy-world"));
    let d = cfg.dim;
    let scale = 1.0 / (d as f64).sqrt();

    let mut centres = Vec::new();
    for _ in 0..cfg.concepts / 2 {
        let c = unit(gaussian(&mut rng, d));
        let anti = unit(&c + &(gaussian(&mut rng, d) * (0.9 * scale)));
        centres.push(c);
        centres.push(anti);
    }
    let mut en_rows = Vec::new();
    let mut lex = Lexicon {
        en: Vec::new(),
        zh: Vec::new(),
        concept: vec![Vec::new(); cfg.concepts],
    };
    for (c, centre) in centres.iter().enumerate() {
        for j in 0..cfg.words_per_concept {
            lex.concept[c].push(en_rows.len());
            lex.en.push(format!("e{c}w{j}"));
            en_rows.push(unit(centre + &(gaussian(&mut rng, d) * (0.9 * scale))));
        }
    }
    for k in 0..cfg.fillers {
        lex.en.push(format!("f{k}"));
        en_rows.push(unit(gaussian(&mut rng, d)));
    }
    let rotation = random_rotation(d, &mut rng);
    let zh_rows: Vec<Array1<f64>> = en_rows
        .iter()
        .map(|x| unit(rotation.dot(x) + gaussian(&mut rng, d) * (0.1 * scale)))
        .collect();
    lex.zh = (0..lex.en.len()).map(zh_word).collect();
    space(lex.en.clone(), &en_rows).save(dir.join("en.vec"))?;
    space(lex.zh.clone(), &zh_rows).save(dir.join("zh.vec"))?;

    // Seed dictionary: two thirds of the rows.
    let mut dict = String::new();
    for i in (0..lex.en.len()).filter(|i| i % 3 != 0) {
        writeln!(dict, "{}\t{}", lex.en[i], lex.zh[i]).expect("string write");
    }
    write_lines(&dir.join("dictionary.tsv"), &dict)?;

    let en = |i: usize| TaggedTerm::new("en", lex.en[i].clone());
    let zh = |i: usize| TaggedTerm::new("zh", lex.zh[i].clone());
    let en_phrase = |a: usize, b: usize| TaggedTerm::new("en", format!("{} {}", lex.en[a], lex.en[b]));
    let seen = cfg.seen_per_concept;
    let half = cfg.concepts / 2;
    let general: Vec<usize> = (0..half).collect();
    let domain: Vec<usize> = (half..cfg.concepts).collect();
    let mut phrase_pairs = 0;

    let attract_file = |concepts: &[usize], phrases: usize, phrase_pairs: &mut usize, noise: usize, rng: &mut Rng| {
        let mut out = String::new();
        for &c in concepts {
            let w = &lex.concept[c];
            for j in 0..seen {
                out += &pair_line(&en(w[j]), &en(w[(j + 1) % seen]));
            }
        }
        for p in 0..phrases {
            let w = &lex.concept[concepts[p % concepts.len()]];
            out += &pair_line(&en_phrase(w[0], w[1]), &en(w[2 + p % (seen - 2)]));
            *phrase_pairs += 1;
        }
        for _ in 0..noise {
            let a = lex.concept[concepts[0]][rng.random_range(0..seen)];
            let b = lex.en.len() - 1 - rng.random_range(0..cfg.fillers.max(1));
            out += &pair_line(&en(a), &en(b));
        }
        out
    };
    let repel_file = |concepts: &[usize]| {
        let mut out = String::new();
        for pair in concepts.chunks(2) {
            if let [a, b] = pair {
                for j in 0..seen {
                    out += &pair_line(&en(lex.concept[*a][j]), &en(lex.concept[*b][(j + 2) % seen]));
                }
            }
        }
        out
    };
    let general_attract = attract_file(&general, 3, &mut phrase_pairs, 0, &mut rng);
    let domain_attract = attract_file(&domain, 2, &mut phrase_pairs, 3, &mut rng);
    write_lines(&dir.join("general_attract.tsv"), &general_attract)?;
    write_lines(&dir.join("general_repel.tsv"), &repel_file(&general))?;
    write_lines(&dir.join("domain_attract.tsv"), &domain_attract)?;
    write_lines(&dir.join("domain_repel.tsv"), &repel_file(&domain))?;

    let mut cl = String::from("# cross-lingual synonyms\n");
    for &c in &domain {
        let w = &lex.concept[c];
        for j in 0..3 {
            cl += &pair_line(&en(w[j]), &zh(w[j + 3]));
        }
    }
    let w = &lex.concept[domain[0]];
    cl += &pair_line(&en_phrase(w[0], w[1]), &zh(w[4]));
    phrase_pairs += 1;
    write_lines(&dir.join("crosslingual_attract.tsv"), &cl)?;

    let mut ext_a = String::new();
    for &c in &domain {
        let w = &lex.concept[c];
        ext_a += &pair_line(&zh(w[1]), &zh(w[4]));
        ext_a += &pair_line(&zh(w[2]), &zh(w[5]));
    }
    write_lines(&dir.join("external_attract.tsv"), &ext_a)?;
    let mut ext_r = String::new();
    for pair in domain.chunks(2) {
        if let [a, b] = pair {
            ext_r += &pair_line(&zh(lex.concept[*a][0]), &zh(lex.concept[*b][1]));
        }
    }
    write_lines(&dir.join("external_repel.tsv"), &ext_r)?;

    // Similarity benchmark over target words, including unseen ones.
    let mut bench = String::new();
    let wpc = cfg.words_per_concept;
    for c in 0..cfg.concepts {
        let w = &lex.concept[c];
        let anti = c ^ 1;
        let other = (c + 2) % cfg.concepts;
        for j in 0..3 {
            let jitter = rng.random_range(-0.5..0.5);
            writeln!(bench, "{}\t{}\t{:.2}", lex.zh[w[j]], lex.zh[w[wpc - 1 - j]], 8.5 + jitter).expect("write");
            writeln!(bench, "{}\t{}\t{:.2}", lex.zh[w[j]], lex.zh[lex.concept[anti][j + 1]], 1.0 + jitter).expect("write");
            writeln!(bench, "{}\t{}\t{:.2}", lex.zh[w[j]], lex.zh[lex.concept[other][j]], 4.0 + jitter).expect("write");
        }
    }
    writeln!(bench, "{}\t未知\t5.0", lex.zh[0]).expect("write");
    writeln!(bench, "未见\t未知\t2.0").expect("write");
    write_lines(&dir.join("similarity.tsv"), &bench)?;

    // Labelled texts: the first domain antonym pair marks positive texts.
    let positive: Vec<usize> = [domain[0], domain[1]].iter().flat_map(|&c| lex.concept[c].clone()).collect();
    let neutral: Vec<usize> = domain[2..].iter().chain(&general).flat_map(|&c| lex.concept[c].clone()).collect();
    let fillers: Vec<usize> = (lex.en.len() - cfg.fillers..lex.en.len()).collect();
    let mut data = String::new();
    for r in 0..cfg.records {
        let pos = r % 3 == 0;
        let pool = if pos { &positive } else { &neutral };
        let mut words: Vec<usize> = (0..2).map(|_| *pool.choose(&mut rng).expect("non-empty")).collect();
        if !fillers.is_empty() {
            words.extend((0..3).map(|_| *fillers.choose(&mut rng).expect("non-empty")));
        }
        words.shuffle(&mut rng);
        let flip = rng.random::<f64>() < 0.05;
        let label = if pos != flip { "sexist" } else { "non_sexist" };
        let text: String = words.iter().map(|&i| lex.zh[i].as_str()).collect();
        writeln!(data, "{label}\t{text}").expect("write");
    }
    write_lines(&dir.join("dataset.tsv"), &data)?;

    let cluster_seeds: Vec<String> = (0..6.min(cfg.concepts)).map(|c| lex.zh[lex.concept[c][0]].clone()).collect();
    write_lines(&dir.join("cluster_seeds.txt"), &(cluster_seeds.join("\n") + "\n"))?;

    let config_path = dir.join("pipeline.toml");
    write_lines(&config_path, &toy_config_text(cfg.seed))?;
    Ok(ToyWorld {
        dir,
        config_path,
        phrase_pairs,
        cluster_seeds,
    })
}

fn toy_config_text(seed_: u64) -> String {
    format!(
        r#"# Pipeline configuration for the synthetic toy world.
seed = {seed_}
source_lang = "en"
target_lang = "zh"
output_dir = "out"

[paths]
source_vectors = "en.vec"
target_vectors = "zh.vec"
seed_dictionary = "dictionary.tsv"
general_attract = "general_attract.tsv"
general_repel = "general_repel.tsv"
domain_attract = "domain_attract.tsv"
domain_repel = "domain_repel.tsv"
crosslingual_attract = "crosslingual_attract.tsv"
external_attract = "external_attract.tsv"
external_repel = "external_repel.tsv"
benchmarks = ["similarity.tsv"]
dataset = "dataset.tsv"
cluster_seeds = "cluster_seeds.txt"

[ablation]
phrase_level = true
refinement = true
postspec = true
use_external_target = true
constraint_selection = "both"
refine_general = true
splice = false

[projection]
k_neighbors = 5

# Small networks and larger steps than the published settings: the toy data
# has a few hundred words.
[stm]
num_tensors = 3
hidden_size = 16
dropout = 0.1
batch_size = 16
max_iterations = 30
learning_rate = 0.01
patience = 5

[attract_repel]
epochs = 10
batch_size = 4

[postspec]
hidden_units = 64
learning_rate = 0.01
epochs = 30
batch_size = 16
confounders = 5

[evaluation]
classifier_runs = 3
cluster_k = 8
tsne = true
tsne_perplexity = 10.0
tsne_iterations = 300
"#
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = seed::rng(1);
        let r = random_rotation(6, &mut rng);
        let eye = r.t().dot(&r);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn toy_world_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let wa = write_toy_world(a.path(), &ToyConfig::default()).unwrap();
        write_toy_world(b.path(), &ToyConfig::default()).unwrap();
        for f in ["zh.vec", "domain_attract.tsv", "dataset.tsv", "similarity.tsv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(wa.phrase_pairs, 6);
        assert_eq!(wa.cluster_seeds.len(), 6);
    }

    #[test]
    fn ar_toy_shape() {
        let t = attract_repel_toy(0);
        assert_eq!((t.space.len(), t.attract.len(), t.repel.len()), (50, 10, 5));
    }
}
