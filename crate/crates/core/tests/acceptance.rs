//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! Criteria 9 and 10 need real data and are skipped unless these variables
//! are set:
//!
//! * `DOMSPEC_ZH_VECTORS`: Chinese fastText vectors in text format
//!   (`DOMSPEC_VECTOR_LIMIT` optionally caps the rows read);
//! * `DOMSPEC_SL999`, `DOMSPEC_WS240`, `DOMSPEC_WS296`: similarity benchmarks;
//! * `DOMSPEC_SWSR`: the labelled sexism dataset (`label<TAB>text`);
//! * `DOMSPEC_SPECIALISED_VECTORS`: a specialised space to compare against.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use domspec_core::attract_repel::{self, ar_loss_and_grad, ArBatch, ArConfig};
use domspec_core::constraints::TaggedTerm;
use domspec_core::embedding::CslsContext;
use domspec_core::eval::classification::{evaluate_over_seeds, split_dataset, ClassifierConfig, LabeledDataset};
use domspec_core::eval::similarity::{eval_word_similarity, spearman, SimilarityBenchmark};
use domspec_core::fixture::{attract_repel_toy, rotated_bilingual, write_toy_world, ToyConfig};
use domspec_core::nn::Mlp;
use domspec_core::pipeline::{Pipeline, PipelineConfig, RunManifest};
use domspec_core::postspec::{mm_loss, AdversarialLoss, MappingModel, MarginVariant, PostSpecBatch, PostSpecConfig};
use domspec_core::projection::{csls_score, train_rcsls, ProjectionConfig};
use domspec_core::seed;
use domspec_core::stm::{self, Negatives, SharedSpace, StmConfig, StmKind, StmModel};
use domspec_core::{ConstraintSet, EmbeddingSpace, Group, Metric, Relation, StageStatus};
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Verdict;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn gaussian(rng: &mut seed::Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Largest central-difference mismatch over every entry of `params`,
/// relative to `max(1, |numeric|)`.
fn worst_mismatch(
    params: &mut [Array2<f64>],
    analytic: &[Array2<f64>],
    mut loss: impl FnMut(&[Array2<f64>]) -> f64,
) -> f64 {
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for idx in 0..params[p].len() {
            let (r, c) = (idx / params[p].ncols(), idx % params[p].ncols());
            let orig = params[p][[r, c]];
            params[p][[r, c]] = orig + eps;
            let up = loss(params);
            params[p][[r, c]] = orig - eps;
            let down = loss(params);
            params[p][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((numeric - analytic[p][[r, c]]).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

fn ar_gradient() -> f64 {
    let mut rng = seed::rng(11);
    let n = 12;
    let initial = unit_rows(gaussian(&mut rng, (n, 6)));
    let current = &initial + &(gaussian(&mut rng, (n, 6)) * 0.1);
    let cfg = ArConfig {
        reg_lambda: 0.3,
        repel_margin: 0.2,
        ..Default::default()
    };
    let batch = ArBatch {
        attract: vec![(0, 1), (2, 3), (4, 5)],
        repel: vec![(6, 7), (8, 9)],
        attract_negatives: vec![(2, 10), (11, 0), (1, 5)],
        repel_negatives: vec![(9, 3), (4, 6)],
    };
    let (_, sparse) = ar_loss_and_grad(&batch, &current, &initial, &cfg, true).expect("valid batch");
    let mut dense = Array2::zeros(current.raw_dim());
    for (r, g) in sparse {
        dense.row_mut(r).assign(&g);
    }
    worst_mismatch(&mut [current], &[dense], |p| {
        attract_repel::ar_loss(&batch, &p[0], &initial, &cfg).expect("valid batch").total
    })
}

fn stm_gradient() -> f64 {
    let mut rng = seed::rng(12);
    let cfg = StmConfig {
        num_tensors: 2,
        hidden_size: 4,
        dropout: 0.0,
        seed: 3,
        ..Default::default()
    };
    let mut model = StmModel::new(StmKind::Da, 5, &cfg).expect("valid config");
    let x1 = gaussian(&mut rng, (7, 5));
    let x2 = gaussian(&mut rng, (7, 5));
    let labels = Array1::from_shape_fn(7, |i| (i % 2) as f64);
    let (_, grads) = model.loss_and_gradients(&x1, &x2, &labels);
    let mut params: Vec<Array2<f64>> = model.params_mut().into_iter().map(|p| p.clone()).collect();
    worst_mismatch(&mut params, &grads, |p| {
        for (dst, src) in model.params_mut().into_iter().zip(p) {
            dst.assign(src);
        }
        model.loss_and_gradients(&x1, &x2, &labels).0
    })
}

/// `G`, `F`, `D_spec`, `D_plain` by position.
fn net(m: &mut MappingModel, which: usize) -> &mut Mlp {
    match which {
        0 => &mut m.g,
        1 => &mut m.f,
        2 => &mut m.d_spec,
        _ => &mut m.d_plain,
    }
}

fn postspec_gradients(adversarial: AdversarialLoss, variant: MarginVariant) -> f64 {
    let mut rng = seed::rng(13);
    let cfg = PostSpecConfig {
        hidden_units: 6,
        confounders: 3,
        adversarial,
        margin_variant: variant,
        seed: 5,
        ..Default::default()
    };
    let d = 4;
    let base = MappingModel::new(d, &cfg).expect("valid config");
    let plain_pool = unit_rows(gaussian(&mut rng, (10, d)));
    let spec_pool = unit_rows(gaussian(&mut rng, (10, d)));
    let items = [0usize, 1, 2];
    let batch = PostSpecBatch {
        plain: plain_pool.select(ndarray::Axis(0), &items),
        spec: spec_pool.select(ndarray::Axis(0), &items),
        confounders: vec![vec![4, 5, 6], vec![3, 7, 8], vec![9, 4, 8]],
        plain_pool: &plain_pool,
        spec_pool: &spec_pool,
    };
    let (_, gg, gf) = base.generator_step(&batch, None);
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let mut model = base.clone();
        let mut params: Vec<Array2<f64>> = net(&mut model, which).params().into_iter().cloned().collect();
        let analytic = if which == 0 { &gg } else { &gf };
        worst = worst.max(worst_mismatch(&mut params, analytic, |p| {
            for (dst, src) in net(&mut model, which).params_mut().into_iter().zip(p) {
                dst.assign(src);
            }
            model.generator_step(&batch, None).0.total
        }));
    }
    // Discriminators on real rows and fixed generated rows.
    let fake_spec = gaussian(&mut rng, (3, d));
    let fake_plain = gaussian(&mut rng, (3, d));
    let (_, gs, gp) = base.discriminator_step(&batch.plain, &batch.spec, &fake_spec, &fake_plain, None);
    for which in 2..4 {
        let mut model = base.clone();
        let mut params: Vec<Array2<f64>> = net(&mut model, which).params().into_iter().cloned().collect();
        let analytic = if which == 2 { &gs } else { &gp };
        worst = worst.max(worst_mismatch(&mut params, analytic, |p| {
            for (dst, src) in net(&mut model, which).params_mut().into_iter().zip(p) {
                dst.assign(src);
            }
            model.discriminator_step(&batch.plain, &batch.spec, &fake_spec, &fake_plain, None).0
        }));
    }
    worst
}

fn criterion_1() -> Verdict {
    let ar = ar_gradient();
    let stm = stm_gradient();
    let post = [
        (AdversarialLoss::CrossEntropy, MarginVariant::Literal),
        (AdversarialLoss::LeastSquares, MarginVariant::TypeConsistent),
    ]
    .into_iter()
    .map(|(a, v)| postspec_gradients(a, v))
    .fold(0.0, f64::max);
    ensure(
        ar < 1e-4 && stm < 1e-4 && post < 1e-3,
        format!("max rel. error: attract-repel {ar:.1e}, relation classifier {stm:.1e}, post-spec {post:.1e}"),
    )
}

/// Ranks with ties averaged, by counting.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Indices sorted by descending score, ties to the lower index.
fn oracle_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite").then(a.cmp(&b)));
    idx
}

fn mean_top(scores: &[f64], k: usize) -> f64 {
    let order = oracle_order(scores);
    order[..k].iter().map(|&i| scores[i]).sum::<f64>() / k as f64
}

fn criterion_2() -> Verdict {
    let trials = 60;
    let (n, d, k) = (100, 8, 10);
    let mut worst: f64 = 0.0;
    let mut retrieval_errors = 0;
    for t in 0..trials {
        let mut rng = seed::rng(seed::derive(2, &format!("trial-{t}")));
        // Spearman on data with ties.
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..30) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-20.0..20.0)).collect();
        let rho = spearman(&a, &b).expect("valid input");
        worst = worst.max((rho - oracle_pearson(&oracle_ranks(&a), &oracle_ranks(&b))).abs());

        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let raw = gaussian(&mut rng, (n, d));
        let space = EmbeddingSpace::new(words.clone(), raw.clone()).expect("finite rows");
        let rows: Vec<Vec<f64>> = raw.rows().into_iter().map(|r| r.to_vec()).collect();
        for _ in 0..20 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            let c = space.cosine(&words[i], &words[j]).expect("in vocabulary");
            worst = worst.max((c - oracle_cos(&rows[i], &rows[j])).abs());
        }

        // Cosine retrieval.
        let q: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cos: Vec<f64> = rows.iter().map(|r| oracle_cos(&q, r)).collect();
        let got = space.nearest_neighbors(Array1::from(q.clone()).view(), k, Metric::Cosine).expect("k <= n");
        if got.iter().map(|g| g.index).collect::<Vec<_>>() != oracle_order(&cos)[..k] {
            retrieval_errors += 1;
        }

        // CSLS scores and retrieval against a second set of mapped queries.
        let unit = space.unit_normalize().expect("non-zero rows");
        let queries = unit_rows(gaussian(&mut rng, (50, d)));
        let qrows: Vec<Vec<f64>> = queries.rows().into_iter().map(|r| r.to_vec()).collect();
        let urows: Vec<Vec<f64>> = unit.vectors().rows().into_iter().map(|r| r.to_vec()).collect();
        let ctx = CslsContext::new(unit.vectors(), &queries, k).expect("same dim");
        let r_row: Vec<f64> = urows
            .iter()
            .map(|y| mean_top(&qrows.iter().map(|x| oracle_cos(x, y)).collect::<Vec<_>>(), k))
            .collect();
        for (a, b) in ctx.row_penalty.iter().zip(&r_row) {
            worst = worst.max((a - b).abs());
        }
        let x = &qrows[0];
        let sims: Vec<f64> = urows.iter().map(|y| oracle_cos(x, y)).collect();
        let r_q = mean_top(&sims, k);
        let csls: Vec<f64> = sims.iter().zip(&r_row).map(|(s, r)| 2.0 * s - r_q - r).collect();
        for (j, y) in urows.iter().enumerate() {
            let s = csls_score(Array1::from(x.clone()).view(), Array1::from(y.clone()).view(), r_q, r_row[j]);
            worst = worst.max((s - csls[j]).abs());
        }
        let got = unit
            .nearest_neighbors(Array1::from(x.clone()).view(), k, Metric::Csls(&ctx))
            .expect("k <= n");
        for g in &got {
            worst = worst.max((g.score - csls[g.index]).abs());
        }
        if got.iter().map(|g| g.index).collect::<Vec<_>>() != oracle_order(&csls)[..k] {
            retrieval_errors += 1;
        }
    }
    ensure(
        worst <= 1e-9 && retrieval_errors == 0,
        format!("{trials} trials: max score error {worst:.1e}, retrieval mismatches {retrieval_errors}"),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let toy = attract_repel_toy(3);
    let cfg = ArConfig {
        batch_size: 5,
        epochs: 5,
        seed: 3,
        ..Default::default()
    };
    let mean_cos = |s: &EmbeddingSpace, set: &ConstraintSet| {
        let v: Vec<f64> = set
            .iter()
            .map(|p| s.cosine(&p.first().surface, &p.second().surface).expect("in vocabulary"))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (out, _) = attract_repel::specialise(&toy.space, &toy.attract, &toy.repel, &cfg).expect("valid toy");
    let (a0, a1) = (mean_cos(&toy.space, &toy.attract), mean_cos(&out, &toy.attract));
    let (r0, r1) = (mean_cos(&toy.space, &toy.repel), mean_cos(&out, &toy.repel));
    let untouched = (30..50).all(|i| {
        let w = format!("w{i}");
        let (x, y) = (toy.space.vector(&w).expect("word"), out.vector(&w).expect("word"));
        x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let secs = start.elapsed().as_secs_f64();
    ensure(
        a1 > a0 && r1 < r0 && untouched && secs < 10.0,
        format!("attract cos {a0:.3} -> {a1:.3}, repel cos {r0:.3} -> {r1:.3}, unconstrained rows identical: {untouched}, {secs:.2}s"),
    )
}

fn criterion_4() -> Verdict {
    let (b, k, d) = (2, 4, 2 * 4 + 2);
    let delta = 1.0;
    // Perfect mapping: outputs equal the gold rows, confounders orthogonal to them.
    let gold = Array2::from_shape_fn((b, d), |(i, j)| f64::from(u8::from(i == j)));
    let confs: Vec<Array2<f64>> = (0..b)
        .map(|i| Array2::from_shape_fn((k, d), |(c, j)| f64::from(u8::from(j == b + i * k + c))))
        .collect();
    let zero = mm_loss([&gold, &gold, &gold, &gold], &gold, &confs, delta).expect("aligned");
    // Equidistant: every output orthogonal to its gold and all confounders.
    let out = Array2::from_shape_fn((b, d), |(_, j)| f64::from(u8::from(j == d - 1)));
    let confs_eq: Vec<Array2<f64>> = (0..b)
        .map(|i| Array2::from_shape_fn((k, d), |(c, j)| f64::from(u8::from(j == (i + 1 + c) % (d - 1)))))
        .collect();
    let full = mm_loss([&out, &out, &out, &out], &gold, &confs_eq, delta).expect("aligned");
    let expected = 4.0 * k as f64 * delta * b as f64;
    ensure(
        zero == 0.0 && (full - expected).abs() < 1e-12,
        format!("perfect {zero}, equidistant {full} (expected {expected})"),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let world = rotated_bilingual(1000, 50, 0.1, 5);
    let train: Vec<(String, String)> = world.pairs[..200].to_vec();
    let (w, _) = train_rcsls(&world.source, &world.target, &train, &ProjectionConfig::default()).expect("trainable");
    let projected = unit_rows(w.apply_rows(world.source.vectors()));
    let ctx = CslsContext::new(world.target.vectors(), &projected, 10).expect("same dim");
    let heldout = 200..300;
    let hits = heldout
        .clone()
        .filter(|&i| {
            let nn = world
                .target
                .nearest_neighbors(projected.row(i), 1, Metric::Csls(&ctx))
                .expect("k <= n");
            nn[0].word == world.pairs[i].1
        })
        .count();
    let p1 = hits as f64 / heldout.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    ensure(p1 >= 0.95 && secs < 120.0, format!("P@1 {p1:.3} on 100 held-out pairs, {secs:.1}s"))
}

fn criterion_6() -> Verdict {
    // Related pairs are noisy copies; unrelated pairs are independent.
    let (n, d) = (400, 20);
    let mut rng = seed::rng(6);
    let a = unit_rows(gaussian(&mut rng, (n, d)));
    let b = unit_rows(&a + &(unit_rows(gaussian(&mut rng, (n, d))) * 0.3));
    let mut words = Vec::new();
    let mut rows = Array2::zeros((2 * n, d));
    for i in 0..n {
        words.push(format!("a{i}"));
        rows.row_mut(i).assign(&a.row(i));
    }
    for i in 0..n {
        words.push(format!("b{i}"));
        rows.row_mut(n + i).assign(&b.row(i));
    }
    let space = EmbeddingSpace::new(words, rows).expect("finite rows");
    let t = |s: String| TaggedTerm::new("zh", s);
    let mut pos = ConstraintSet::new(Relation::Attract, Group::Domain);
    let mut neg = ConstraintSet::new(Relation::Attract, Group::Domain);
    let train = 300;
    for i in 0..train {
        pos.insert(t(format!("a{i}")), t(format!("b{i}")));
        neg.insert(t(format!("a{i}")), t(format!("b{}", (i + 1 + rng.random_range(0..n - 1)) % n)));
    }
    let cfg = StmConfig {
        num_tensors: 3,
        hidden_size: 16,
        dropout: 0.2,
        batch_size: 16,
        max_iterations: 150,
        learning_rate: 0.003,
        patience: 20,
        seed: 6,
        ..Default::default()
    };
    let shared = SharedSpace::target_only(&space, "zh");
    let (model, report) =
        stm::train_stm(StmKind::Da, &pos, Negatives::Explicit(&neg), &shared, &cfg).expect("enough data");
    let mut valid = ConstraintSet::new(Relation::Attract, Group::Domain);
    let mut invalid = ConstraintSet::new(Relation::Attract, Group::Domain);
    for i in train..n {
        valid.insert(t(format!("a{i}")), t(format!("b{i}")));
        invalid.insert(t(format!("a{i}")), t(format!("b{}", train + (i - train + 7) % (n - train))));
    }
    let (kept_valid, _) = stm::filter_constraints(&model, &valid, &shared, cfg.threshold).expect("filter");
    let (kept_invalid, _) = stm::filter_constraints(&model, &invalid, &shared, cfg.threshold).expect("filter");
    let keep = kept_valid.len() as f64 / valid.len() as f64;
    let drop = 1.0 - kept_invalid.len() as f64 / invalid.len() as f64;
    ensure(
        report.heldout_accuracy >= 0.9 && keep >= 0.8 && drop >= 0.8,
        format!(
            "held-out accuracy {:.3}, planted-valid kept {keep:.2}, planted-invalid dropped {drop:.2}",
            report.heldout_accuracy
        ),
    )
}

fn toy_config(dir: &std::path::Path) -> (PipelineConfig, usize) {
    let world = write_toy_world(dir, &ToyConfig::default()).expect("fixture written");
    (PipelineConfig::load(&world.config_path).expect("fixture config"), world.phrase_pairs)
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let (cfg, _) = toy_config(dir.path());
    let start = Instant::now();
    let first = Pipeline::new(cfg.clone()).and_then(|mut p| p.run());
    let elapsed = start.elapsed();
    let first = match first {
        Ok(m) => m,
        Err(e) => return Verdict::Fail(format!("pipeline failed: {e}")),
    };
    let final_vec = read(cfg.output_dir.join("spaces/final.vec"));
    let second = Pipeline::new(cfg.clone()).and_then(|mut p| p.run()).expect("second run");
    let all_ok = first.stages.iter().all(|s| s.status == StageStatus::Success);
    let before = first.metrics["clusters/original/local_dist"];
    let after = first.metrics["clusters/final/local_dist"];
    let same = first.without_timings() == second.without_timings() && final_vec == read(cfg.output_dir.join("spaces/final.vec"));
    ensure(
        all_ok && elapsed < Duration::from_secs(300) && after < before && same,
        format!(
            "all stages succeeded: {all_ok}, {:.1}s, local_dist {before:.3} -> {after:.3}, rerun identical: {same}",
            elapsed.as_secs_f64()
        ),
    )
}

fn stage_count(m: &RunManifest, stage: &str, path: &[&str]) -> u64 {
    let mut v = &m.stage(stage).expect("stage present").counts;
    for p in path {
        v = &v[*p];
    }
    v.as_u64().unwrap_or_else(|| panic!("{stage}: missing count {path:?}"))
}

fn criterion_8() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let (base, phrase_pairs) = toy_config(dir.path());
    let run = |name: &str, edit: &dyn Fn(&mut PipelineConfig)| {
        let mut cfg = base.clone();
        cfg.output_dir = base.output_dir.join(name);
        edit(&mut cfg);
        let m = Pipeline::new(cfg.clone()).and_then(|mut p| p.run()).expect("ablation run");
        (cfg.output_dir, m)
    };
    let (full_dir, _) = run("full", &|_| {});
    let (no_post_dir, no_post) = run("no-postspec", &|c| c.ablation.postspec = false);
    let bit_identical = read(no_post_dir.join("spaces/final.vec")) == read(no_post_dir.join("spaces/ar.vec"))
        && read(no_post_dir.join("spaces/ar.vec")) == read(full_dir.join("spaces/ar.vec"))
        && no_post.stage("postspec").expect("stage").status == StageStatus::Skipped;

    let (_, no_ref) = run("no-refinement", &|c| c.ablation.refinement = false);
    let groups = ["general_attract", "general_repel", "domain_attract", "domain_repel", "crosslingual_attract"];
    let passthrough = no_ref.stage("refine").expect("stage").status == StageStatus::Skipped
        && groups
            .iter()
            .all(|g| stage_count(&no_ref, "project", &["groups", g, "output"]) == stage_count(&no_ref, "refine", &["groups", g, "kept"]));

    let (_, no_phrase) = run("no-phrase", &|c| c.ablation.phrase_level = false);
    let dropped = stage_count(&no_phrase, "project", &["phrase_pairs_dropped"])
        + stage_count(&no_phrase, "specialise", &["external_phrase_pairs_dropped"]);
    let consistent = groups.iter().all(|g| {
        let c = |k: &str| stage_count(&no_phrase, "project", &["groups", g, k]);
        c("input") == c("output") + c("phrase_pairs_dropped") + c("untranslatable") + c("self_translations") + c("collapsed_duplicates")
    });
    ensure(
        bit_identical && passthrough && dropped == phrase_pairs as u64 && consistent,
        format!(
            "no post-spec final == AR: {bit_identical}; no refinement passes counts through: {passthrough}; no phrase dropped {dropped} of {phrase_pairs} planted multi-token pairs"
        ),
    )
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name).map(PathBuf::from)
}

fn vector_limit() -> Option<usize> {
    std::env::var("DOMSPEC_VECTOR_LIMIT").ok().and_then(|v| v.parse().ok())
}

fn criterion_9() -> Verdict {
    let vars = ["DOMSPEC_ZH_VECTORS", "DOMSPEC_SL999", "DOMSPEC_WS240", "DOMSPEC_WS296"];
    let Some(paths) = vars.iter().map(|v| env_path(v)).collect::<Option<Vec<_>>>() else {
        return Verdict::Skip(format!("set {} to run", vars.join(", ")));
    };
    let (space, _) = EmbeddingSpace::load(&paths[0], vector_limit()).expect("vectors load");
    let expected = [(0.347, 975, 999), (0.546, 230, 240), (0.620, 286, 297)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (path, (rho, covered, total)) in paths[1..].iter().zip(expected) {
        let bench = SimilarityBenchmark::load(path).expect("benchmark loads");
        let r = eval_word_similarity(&space, &bench).expect("enough coverage");
        ok &= (r.rho - rho).abs() <= 0.02 && r.covered == covered && r.total == total;
        detail.push(format!("{} rho {:.3} (want {rho:.3}) coverage {}/{} (want {covered}/{total})", r.benchmark, r.rho, r.covered, r.total));
    }
    ensure(ok, detail.join("; "))
}

fn criterion_10() -> Verdict {
    let vars = ["DOMSPEC_SWSR", "DOMSPEC_ZH_VECTORS", "DOMSPEC_SPECIALISED_VECTORS"];
    let Some(paths) = vars.iter().map(|v| env_path(v)).collect::<Option<Vec<_>>>() else {
        return Verdict::Skip(format!("set {} to run", vars.join(", ")));
    };
    let cfg = ClassifierConfig::default();
    let data = split_dataset(&LabeledDataset::load(&paths[0]).expect("dataset loads"), cfg.split, 10).expect("split");
    let seeds: Vec<u64> = (0..5).map(|i| seed::derive(10, &format!("run-{i}"))).collect();
    let score = |p: &PathBuf| {
        let (space, _) = EmbeddingSpace::load(p, vector_limit()).expect("vectors load");
        evaluate_over_seeds(&space, &data, &cfg, &seeds).expect("classifier trains").macro_f1_mean
    };
    let (plain, spec) = (score(&paths[1]), score(&paths[2]));
    ensure(spec > plain, format!("macro-F1 unspecialised {plain:.3}, specialised {spec:.3}"))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 10] = [
        ("gradient correctness", criterion_1),
        ("oracle equivalence", criterion_2),
        ("attract-repel behaviour", criterion_3),
        ("max-margin anchors", criterion_4),
        ("projection recovery", criterion_5),
        ("relation classifier discrimination", criterion_6),
        ("end-to-end toy pipeline", criterion_7),
        ("ablation switches", criterion_8),
        ("baseline similarity reproduction", criterion_9),
        ("specialised classifier gain", criterion_10),
    ];
    // Quiet panics: a panicking check is reported as a failure line.
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut summary = BTreeMap::new();
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        *summary.entry(tag).or_insert(0) += 1;
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    println!("acceptance: {summary:?}");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
