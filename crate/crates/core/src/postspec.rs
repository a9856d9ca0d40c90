//! Post-specialisation: learn a global map from the plain space to the
//! specialised space on seen words, then apply it to the whole vocabulary.
//!
//! Two generators (`G`: plain → specialised, `F`: specialised → plain) are
//! trained with a max-margin ranking loss against random confounders, a cycle
//! reconstruction term and adversarial terms from two discriminators.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Activation, Adam, Mlp, MlpTrace};
use crate::seed::{self, Rng};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DSPMAP\x00\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    CrossEntropy,
    LeastSquares,
}

/// Which inputs feed `F` inside the max-margin loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    /// `F` applied to plain vectors and every output compared with the specialised gold vector.
    Literal,
    /// `F` applied to specialised vectors and compared with the plain gold vector.
    TypeConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostSpecConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub generator_dropout: f64,
    pub discriminator_dropout: f64,
    pub margin: f64,
    pub confounders: usize,
    /// Adam step size. 1e-3 is a safer choice if training diverges on new data.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_mm: f64,
    pub w_cycle: f64,
    pub w_adv: f64,
    pub adversarial: AdversarialLoss,
    pub margin_variant: MarginVariant,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PostSpecConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_units: 2048,
            generator_dropout: 0.2,
            discriminator_dropout: 0.3,
            margin: 1.0,
            confounders: 25,
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 32,
            w_mm: 1.0,
            w_cycle: 1.0,
            w_adv: 1.0,
            adversarial: AdversarialLoss::CrossEntropy,
            margin_variant: MarginVariant::Literal,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PostSpecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden_units == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("hidden_units, batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.generator_dropout) || !(0.0..1.0).contains(&self.discriminator_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || self.margin < 0.0 {
            return bad("learning_rate must be positive and margin non-negative");
        }
        if self.w_mm < 0.0 || self.w_cycle < 0.0 || self.w_adv < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    fn sizes(&self, dim: usize, out: usize) -> Vec<usize> {
        let mut s = vec![dim];
        s.extend(std::iter::repeat(self.hidden_units).take(self.hidden_layers));
        s.push(out);
        s
    }
}

/// Generators `G`, `F` and discriminators for both spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingModel {
    pub config: PostSpecConfig,
    pub dim: usize,
    pub g: Mlp,
    pub f: Mlp,
    pub d_spec: Mlp,
    pub d_plain: Mlp,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dim: usize,
    config: PostSpecConfig,
    shapes: Vec<Vec<[usize; 2]>>,
}

impl MappingModel {
    pub fn new(dim: usize, cfg: &PostSpecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed::derive(cfg.seed, "postspec-init"));
        let gen = |rng: &mut Rng| {
            Mlp::new(
                &cfg.sizes(dim, dim),
                Activation::Relu,
                Activation::Identity,
                cfg.generator_dropout,
                rng,
            )
        };
        let disc = |rng: &mut Rng| {
            Mlp::new(
                &cfg.sizes(dim, 1),
                Activation::Relu,
                Activation::Identity,
                cfg.discriminator_dropout,
                rng,
            )
        };
        Ok(Self {
            config: cfg.clone(),
            dim,
            g: gen(&mut rng),
            f: gen(&mut rng),
            d_spec: disc(&mut rng),
            d_plain: disc(&mut rng),
        })
    }

    fn nets(&self) -> [&Mlp; 4] {
        [&self.g, &self.f, &self.d_spec, &self.d_plain]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.g, &mut self.f, &mut self.d_spec, &mut self.d_plain]
    }

    pub fn is_finite(&self) -> bool {
        self.nets().iter().all(|n| n.is_finite())
    }

    /// Maps plain row vectors through `G` with dropout off.
    pub fn map(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.ncols(),
            });
        }
        Ok(self.g.predict(x))
    }

    /// Writes a small JSON header (version, shapes, config) followed by raw
    /// little-endian weights.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            config: self.config.clone(),
            shapes: self
                .nets()
                .iter()
                .map(|n| n.params().iter().map(|p| [p.nrows(), p.ncols()]).collect())
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for net in self.nets() {
            for p in net.params() {
                for v in p.iter() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |m: &str| Error::Serialization(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a mapping model file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {}", header.format_version)));
        }
        let mut model = Self::new(header.dim, &header.config)?;
        let mut offset = 16 + hlen;
        for (net, shapes) in model.nets_mut().into_iter().zip(&header.shapes) {
            let params = net.params_mut();
            if params.len() != shapes.len() {
                return Err(corrupt("layer count mismatch"));
            }
            for (p, shape) in params.into_iter().zip(shapes) {
                if [p.nrows(), p.ncols()] != *shape {
                    return Err(corrupt("parameter shape mismatch"));
                }
                for v in p.iter_mut() {
                    let chunk = bytes.get(offset..offset + 8).ok_or_else(|| corrupt("truncated weights"))?;
                    *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                    offset += 8;
                }
            }
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(model)
    }
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, f64, f64) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    let denom = (na * nb).max(1e-12);
    (a.dot(&b) / denom, na.max(1e-12), nb.max(1e-12))
}

/// d cos(o, g) / d o
fn cosine_grad(o: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
    let (c, no, ng) = cosine(o, g);
    &g / (no * ng) - &o * (c / (no * no))
}

/// Max-margin loss of one generator output against its gold rows.
///
/// `confounders[i]` lists rows of `pool` used as negatives for item `i`.
/// Returns the summed hinge loss and its gradient in `output`.
pub fn margin_loss_indexed(
    output: &Array2<f64>,
    gold: &Array2<f64>,
    pool: &Array2<f64>,
    confounders: &[Vec<usize>],
    margin: f64,
) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut grad = Array2::zeros(output.raw_dim());
    for (i, confs) in confounders.iter().enumerate() {
        let o = output.row(i);
        let (pos, _, _) = cosine(o, gold.row(i));
        let mut g = grad.row_mut(i);
        let mut active = 0usize;
        for &j in confs {
            let (neg, _, _) = cosine(o, pool.row(j));
            let h = margin - pos + neg;
            if h > 0.0 {
                loss += h;
                active += 1;
                g += &cosine_grad(o, pool.row(j));
            }
        }
        if active > 0 {
            g.scaled_add(-(active as f64), &cosine_grad(o, gold.row(i)));
        }
    }
    (loss, grad)
}

/// The four-output max-margin loss with explicit confounder vectors.
///
/// `outputs` are `G(x)`, `F(x)`, `G(F(x))`, `F(G(x))`, each compared against
/// `gold[i]` and the `k` rows of `confounders[i]`.
pub fn mm_loss(outputs: [&Array2<f64>; 4], gold: &Array2<f64>, confounders: &[Array2<f64>], margin: f64) -> Result<f64> {
    let n = gold.nrows();
    if confounders.len() != n || outputs.iter().any(|o| o.dim() != gold.dim()) {
        return Err(Error::InvalidArgument("outputs, gold and confounders must align".into()));
    }
    let mut total = 0.0;
    for out in outputs {
        for i in 0..n {
            let (pos, _, _) = cosine(out.row(i), gold.row(i));
            for c in confounders[i].rows() {
                let (neg, _, _) = cosine(out.row(i), c);
                total += (margin - pos + neg).max(0.0);
            }
        }
    }
    Ok(total)
}

/// Draws `k` confounder rows per item from `pool_size` rows, avoiding `exclude`.
pub fn draw_confounders(
    items: &[usize],
    pool_size: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let exclude: BTreeSet<usize> = items.iter().copied().collect();
    let allowed: Vec<usize> = (0..pool_size).filter(|j| !exclude.contains(j)).collect();
    if k > allowed.len() {
        // A small pool: only the item itself is excluded.
        if k > pool_size.saturating_sub(1) {
            return Err(Error::InsufficientData(format!(
                "{k} confounders requested from a pool of {pool_size}"
            )));
        }
        return Ok(items
            .iter()
            .map(|&i| {
                let others: Vec<usize> = (0..pool_size).filter(|&j| j != i).collect();
                index::sample(rng, others.len(), k).into_iter().map(|p| others[p]).collect()
            })
            .collect());
    }
    Ok(items
        .iter()
        .map(|_| index::sample(rng, allowed.len(), k).into_iter().map(|p| allowed[p]).collect())
        .collect())
}

/// Generator-side loss components for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub mm: f64,
    pub cycle: f64,
    pub adv: f64,
    pub total: f64,
}

/// A training batch: plain rows, specialised rows, and confounders into the pools.
pub struct PostSpecBatch<'a> {
    pub plain: Array2<f64>,
    pub spec: Array2<f64>,
    pub confounders: Vec<Vec<usize>>,
    pub plain_pool: &'a Array2<f64>,
    pub spec_pool: &'a Array2<f64>,
}

fn euclid_rows(diff: &Array2<f64>) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut grad = Array2::zeros(diff.raw_dim());
    for (i, r) in diff.rows().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        loss += n;
        if n > 1e-12 {
            grad.row_mut(i).assign(&(&r / n));
        }
    }
    (loss, grad)
}

/// Adversarial generator loss on discriminator logits, with d/dlogit.
fn generator_adv(kind: AdversarialLoss, logits: &Array2<f64>) -> (f64, Array2<f64>) {
    match kind {
        AdversarialLoss::CrossEntropy => {
            // -log sigmoid(z)
            let loss = logits.iter().map(|&z| softplus(-z)).sum();
            (loss, logits.mapv(|z| sigmoid(z) - 1.0))
        }
        AdversarialLoss::LeastSquares => {
            let loss = logits.iter().map(|&z| (sigmoid(z) - 1.0).powi(2)).sum();
            (loss, logits.mapv(|z| {
                let s = sigmoid(z);
                2.0 * (s - 1.0) * s * (1.0 - s)
            }))
        }
    }
}

/// Discriminator loss for real (label 1) and fake (label 0) logits.
fn discriminator_loss(kind: AdversarialLoss, real: &Array2<f64>, fake: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    match kind {
        AdversarialLoss::CrossEntropy => {
            let loss = real.iter().map(|&z| softplus(-z)).sum::<f64>() + fake.iter().map(|&z| softplus(z)).sum::<f64>();
            (loss, real.mapv(|z| sigmoid(z) - 1.0), fake.mapv(sigmoid))
        }
        AdversarialLoss::LeastSquares => {
            let loss = real.iter().map(|&z| (sigmoid(z) - 1.0).powi(2)).sum::<f64>()
                + fake.iter().map(|&z| sigmoid(z).powi(2)).sum::<f64>();
            let dr = real.mapv(|z| {
                let s = sigmoid(z);
                2.0 * (s - 1.0) * s * (1.0 - s)
            });
            let df = fake.mapv(|z| {
                let s = sigmoid(z);
                2.0 * s * s * (1.0 - s)
            });
            (loss, dr, df)
        }
    }
}

fn add_into(acc: &mut [Array2<f64>], grads: Vec<Array2<f64>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        *a += &g;
    }
}

fn zeros_like(net: &Mlp) -> Vec<Array2<f64>> {
    net.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect()
}

impl MappingModel {
    /// Generator objective and gradients for `G` and `F` (discriminators frozen, dropout off in them).
    ///
    /// With `rng`, generator dropout is active.
    pub fn generator_step(
        &self,
        batch: &PostSpecBatch<'_>,
        mut rng: Option<&mut Rng>,
    ) -> (GeneratorLoss, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let cfg = &self.config;
        let x = &batch.plain;
        let xp = &batch.spec;
        let consistent = cfg.margin_variant == MarginVariant::TypeConsistent;
        let f_in = if consistent { xp } else { x };

        let (gx, t_gx): (Array2<f64>, MlpTrace) = self.g.forward(x, rng.as_deref_mut());
        let (fx, t_fx) = self.f.forward(f_in, rng.as_deref_mut());
        let (gfx, t_gfx) = self.g.forward(&fx, rng.as_deref_mut());
        let (fgx, t_fgx) = self.f.forward(&gx, rng.as_deref_mut());
        let (fxp, t_fxp) = self.f.forward(xp, rng.as_deref_mut());
        let (gfxp, t_gfxp) = self.g.forward(&fxp, rng.as_deref_mut());

        let b = x.nrows() as f64;
        let (spec_gold, spec_pool) = (xp, batch.spec_pool);
        let (plain_gold, plain_pool) = (x, batch.plain_pool);
        let (f_gold, f_pool) = if consistent { (plain_gold, plain_pool) } else { (spec_gold, spec_pool) };

        // Max-margin terms.
        let mm = |o: &Array2<f64>, gold: &Array2<f64>, pool: &Array2<f64>| {
            margin_loss_indexed(o, gold, pool, &batch.confounders, cfg.margin)
        };
        let (l1, mut d_gx) = mm(&gx, spec_gold, spec_pool);
        let (l2, mut d_fx) = mm(&fx, f_gold, f_pool);
        let (l3, mut d_gfx) = mm(&gfx, spec_gold, spec_pool);
        let (l4, mut d_fgx) = mm(&fgx, f_gold, f_pool);
        let mm_total = l1 + l2 + l3 + l4;
        let w_mm = cfg.w_mm / b;
        for d in [&mut d_gx, &mut d_fx, &mut d_gfx, &mut d_fgx] {
            *d *= w_mm;
        }

        // Cycle reconstruction.
        let (c1, dc1) = euclid_rows(&(&fgx - x));
        let (c2, dc2) = euclid_rows(&(&gfxp - xp));
        let w_cyc = cfg.w_cycle / b;
        d_fgx.scaled_add(w_cyc, &dc1);
        let mut d_gfxp = dc2 * w_cyc;

        // Adversarial terms through frozen discriminators.
        let (zs, t_ds) = self.d_spec.forward(&gx, None);
        let (zp, t_dp) = self.d_plain.forward(&fxp, None);
        let (a1, da1) = generator_adv(cfg.adversarial, &zs);
        let (a2, da2) = generator_adv(cfg.adversarial, &zp);
        let w_adv = cfg.w_adv / b;
        let (_, g_from_ds) = self.d_spec.backward(&t_ds, &(da1 * w_adv));
        let (_, g_from_dp) = self.d_plain.backward(&t_dp, &(da2 * w_adv));
        d_gx += &g_from_ds;
        let mut d_fxp = g_from_dp;

        let mut grads_g = zeros_like(&self.g);
        let mut grads_f = zeros_like(&self.f);

        // F(G(x)) → gradients for F and into G(x)
        let (pf, dx) = self.f.backward(&t_fgx, &d_fgx);
        add_into(&mut grads_f, pf);
        d_gx += &dx;
        // G(F(·)) → gradients for G and into F(·)
        let (pg, dx) = self.g.backward(&t_gfx, &d_gfx);
        add_into(&mut grads_g, pg);
        d_fx += &dx;
        let (pg, dx) = self.g.backward(&t_gfxp, &std::mem::take(&mut d_gfxp));
        add_into(&mut grads_g, pg);
        d_fxp += &dx;
        let (pf, _) = self.f.backward(&t_fx, &d_fx);
        add_into(&mut grads_f, pf);
        let (pf, _) = self.f.backward(&t_fxp, &d_fxp);
        add_into(&mut grads_f, pf);
        let (pg, _) = self.g.backward(&t_gx, &d_gx);
        add_into(&mut grads_g, pg);

        let loss = GeneratorLoss {
            mm: mm_total / b,
            cycle: (c1 + c2) / b,
            adv: (a1 + a2) / b,
            total: (cfg.w_mm * mm_total + cfg.w_cycle * (c1 + c2) + cfg.w_adv * (a1 + a2)) / b,
        };
        (loss, grads_g, grads_f)
    }

    /// Discriminator objective on real rows and (detached) generated rows.
    pub fn discriminator_step(
        &self,
        plain: &Array2<f64>,
        spec: &Array2<f64>,
        fake_spec: &Array2<f64>,
        fake_plain: &Array2<f64>,
        mut rng: Option<&mut Rng>,
    ) -> (f64, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let kind = self.config.adversarial;
        let b = plain.nrows() as f64;
        let both = |net: &Mlp, real: &Array2<f64>, fake: &Array2<f64>, rng: Option<&mut Rng>| {
            let stacked = ndarray::concatenate![Axis(0), real.view(), fake.view()];
            let (z, trace) = net.forward(&stacked, rng);
            let n = real.nrows();
            let zr = z.slice(ndarray::s![..n, ..]).to_owned();
            let zf = z.slice(ndarray::s![n.., ..]).to_owned();
            let (loss, dr, df) = discriminator_loss(kind, &zr, &zf);
            let dz = ndarray::concatenate![Axis(0), dr.view(), df.view()] / b;
            let (grads, _) = net.backward(&trace, &dz);
            (loss / b, grads)
        };
        let (ls, gs) = both(&self.d_spec, spec, fake_spec, rng.as_deref_mut());
        let (lp, gp) = both(&self.d_plain, plain, fake_plain, rng.as_deref_mut());
        (ls + lp, gs, gp)
    }

    /// Summed max-margin loss of the four outputs, dropout off.
    pub fn evaluate_mm(&self, plain: &Array2<f64>, spec: &Array2<f64>, confounders: &[Vec<usize>], plain_pool: &Array2<f64>, spec_pool: &Array2<f64>) -> f64 {
        let batch = PostSpecBatch {
            plain: plain.clone(),
            spec: spec.clone(),
            confounders: confounders.to_vec(),
            plain_pool,
            spec_pool,
        };
        let (loss, _, _) = self.generator_step(&batch, None);
        loss.mm * plain.nrows() as f64
    }
}

/// One row of the post-specialisation training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostSpecEpoch {
    pub epoch: usize,
    pub mm: f64,
    pub cycle: f64,
    pub adv: f64,
    pub disc: f64,
    pub heldout_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostSpecReport {
    pub train_words: usize,
    pub heldout_words: usize,
    pub initial_heldout_mm: f64,
    pub best_epoch: usize,
    pub epochs: Vec<PostSpecEpoch>,
}

impl PostSpecReport {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "epoch,mm,cycle,adv,disc,heldout_mm").map_err(io)?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{},{},{}", e.epoch, e.mm, e.cycle, e.adv, e.disc, e.heldout_mm).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Held-out split and its fixed confounders.
struct Heldout {
    plain: Array2<f64>,
    spec: Array2<f64>,
    confounders: Vec<Vec<usize>>,
}

/// Trains the mapping on `seen` words present in both spaces.
pub fn train_postspec(
    plain: &EmbeddingSpace,
    specialised: &EmbeddingSpace,
    seen: &BTreeSet<String>,
    cfg: &PostSpecConfig,
) -> Result<(MappingModel, PostSpecReport)> {
    cfg.validate()?;
    if plain.dim() != specialised.dim() {
        return Err(Error::DimensionMismatch {
            expected: plain.dim(),
            actual: specialised.dim(),
        });
    }
    let rows: Vec<(usize, usize)> = seen
        .iter()
        .filter_map(|w| Some((plain.index_of(w)?, specialised.index_of(w)?)))
        .collect();
    if rows.len() != seen.len() {
        return Err(Error::InvalidArgument(format!(
            "{} seen words are missing from the spaces",
            seen.len() - rows.len()
        )));
    }
    if rows.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} seen words, need at least the batch size {}",
            rows.len(),
            cfg.batch_size
        )));
    }
    let dim = plain.dim();
    let mut rng = seed::rng(seed::derive(cfg.seed, "postspec-train"));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((rows.len() as f64 * cfg.holdout_fraction).round() as usize).min(rows.len() - cfg.batch_size);
    let (hold, train) = order.split_at(n_hold);

    let gather = |idx: &[usize]| {
        let mut p = Array2::zeros((idx.len(), dim));
        let mut s = Array2::zeros((idx.len(), dim));
        for (k, &i) in idx.iter().enumerate() {
            p.row_mut(k).assign(&plain.row(rows[i].0));
            s.row_mut(k).assign(&specialised.row(rows[i].1));
        }
        (p, s)
    };
    let (train_plain, train_spec) = gather(train);
    let heldout = if hold.is_empty() {
        None
    } else {
        let (p, s) = gather(hold);
        let idx: Vec<usize> = (0..p.nrows()).collect();
        // Held-out confounders come from the held-out gold vectors themselves when possible.
        let k = cfg.confounders.min(p.nrows().saturating_sub(1));
        let mut eval_rng = seed::rng(seed::derive(cfg.seed, "postspec-heldout"));
        let confounders = if k == 0 {
            vec![Vec::new(); p.nrows()]
        } else {
            idx.iter()
                .map(|&i| {
                    let others: Vec<usize> = (0..p.nrows()).filter(|&j| j != i).collect();
                    index::sample(&mut eval_rng, others.len(), k).into_iter().map(|q| others[q]).collect()
                })
                .collect()
        };
        Some(Heldout {
            plain: p,
            spec: s,
            confounders,
        })
    };

    let mut model = MappingModel::new(dim, cfg)?;
    let heldout_mm = |m: &MappingModel| match &heldout {
        Some(h) => m.evaluate_mm(&h.plain, &h.spec, &h.confounders, &h.plain, &h.spec),
        None => f64::NAN,
    };
    let initial_heldout_mm = heldout_mm(&model);
    let mut gen_opt = Adam::new(cfg.learning_rate);
    let mut disc_opt = Adam::new(cfg.learning_rate);
    let mut best = model.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut idx: Vec<usize> = (0..train_plain.nrows()).collect();
    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut rng);
        let mut sums = GeneratorLoss::default();
        let mut disc_sum = 0.0;
        let mut batches = 0.0;
        for chunk in idx.chunks(cfg.batch_size) {
            let confounders = draw_confounders(chunk, train_plain.nrows(), cfg.confounders, &mut rng)?;
            let batch = PostSpecBatch {
                plain: train_plain.select(Axis(0), chunk),
                spec: train_spec.select(Axis(0), chunk),
                confounders,
                plain_pool: &train_plain,
                spec_pool: &train_spec,
            };
            let (loss, gg, gf) = model.generator_step(&batch, Some(&mut rng));
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite generator loss in epoch {epoch}; consider a lower learning rate"
                )));
            }
            let mut grads = gg;
            grads.extend(gf);
            let params: Vec<&mut Array2<f64>> = model.g.params_mut().into_iter().chain(model.f.params_mut()).collect();
            gen_opt.update(params, &grads);

            let fake_spec = model.g.predict(&batch.plain);
            let fake_plain = model.f.predict(&batch.spec);
            let (dl, gs, gp) = model.discriminator_step(&batch.plain, &batch.spec, &fake_spec, &fake_plain, Some(&mut rng));
            let mut grads = gs;
            grads.extend(gp);
            let params: Vec<&mut Array2<f64>> = model
                .d_spec
                .params_mut()
                .into_iter()
                .chain(model.d_plain.params_mut())
                .collect();
            disc_opt.update(params, &grads);

            sums.mm += loss.mm;
            sums.cycle += loss.cycle;
            sums.adv += loss.adv;
            disc_sum += dl;
            batches += 1.0;
        }
        if !model.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite weights after epoch {epoch}; consider a lower learning rate"
            )));
        }
        let h = heldout_mm(&model);
        let score = if h.is_nan() { sums.mm / batches } else { h };
        log.push(PostSpecEpoch {
            epoch,
            mm: sums.mm / batches,
            cycle: sums.cycle / batches,
            adv: sums.adv / batches,
            disc: disc_sum / batches,
            heldout_mm: h,
        });
        if score < best_score {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
        }
    }
    Ok((
        best,
        PostSpecReport {
            train_words: train_plain.nrows(),
            heldout_words: hold.len(),
            initial_heldout_mm,
            best_epoch,
            epochs: log,
        },
    ))
}

/// Replaces every vector by its image under `G`; vocabulary and order are kept.
pub fn apply_mapping(model: &MappingModel, space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
    if space.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            actual: space.dim(),
        });
    }
    if !space.is_unit_normalized(1e-6) {
        log::warn!("mapping a space whose rows are not unit length; it may already be specialised");
    }
    const CHUNK: usize = 4096;
    let parts: Vec<Array2<f64>> = space
        .vectors()
        .axis_chunks_iter(Axis(0), CHUNK)
        .into_par_iter()
        .map(|c| model.g.predict(&c.to_owned()))
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let mapped = if views.is_empty() {
        Array2::zeros((0, space.dim()))
    } else {
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?
    };
    if mapped.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("mapping produced non-finite vectors".into()));
    }
    space.with_vectors(mapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn defaults_match_published_values() {
        let c = PostSpecConfig::default();
        assert_eq!((c.hidden_layers, c.hidden_units), (2, 2048));
        assert_eq!((c.generator_dropout, c.discriminator_dropout), (0.2, 0.3));
        assert_eq!((c.margin, c.confounders), (1.0, 25));
        assert_eq!((c.learning_rate, c.epochs, c.batch_size), (0.1, 10, 32));
    }

    #[test]
    fn mm_loss_anchors() {
        let gold = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let conf = vec![array![[0.0, 0.0, 1.0]], array![[0.0, 0.0, 1.0]]];
        assert_eq!(mm_loss([&gold, &gold, &gold, &gold], &gold, &conf, 1.0).unwrap(), 0.0);

        // outputs at 45° between gold and confounder: equal cosines
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let out = array![[s, 0.0, s], [0.0, s, s]];
        let l = mm_loss([&out, &out, &out, &out], &gold, &conf, 1.0).unwrap();
        assert!((l - 4.0 * 1.0 * 1.0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn confounders_avoid_batch_items() {
        let mut rng = seed::rng(0);
        let c = draw_confounders(&[0, 1], 10, 5, &mut rng).unwrap();
        assert!(c.iter().all(|v| v.len() == 5 && !v.contains(&0) && !v.contains(&1)));
        assert!(draw_confounders(&[0], 3, 5, &mut rng).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = PostSpecConfig {
            hidden_units: 5,
            ..Default::default()
        };
        let m = MappingModel::new(3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        m.save(&p).unwrap();
        assert_eq!(MappingModel::load(&p).unwrap(), m);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(MappingModel::load(&p).is_err());
    }

    #[test]
    fn apply_mapping_keeps_vocabulary() {
        let cfg = PostSpecConfig {
            hidden_units: 6,
            ..Default::default()
        };
        let m = MappingModel::new(2, &cfg).unwrap();
        let s = EmbeddingSpace::new(vec!["a".into(), "b".into()], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = apply_mapping(&m, &s).unwrap();
        assert_eq!(out.words(), s.words());
        assert_ne!(out.vectors(), s.vectors());
        let twice = apply_mapping(&m, &out).unwrap();
        assert_eq!(twice.len(), 2);
        let wrong = EmbeddingSpace::new(vec!["a".into()], array![[1.0, 0.0, 0.0]]).unwrap();
        assert!(apply_mapping(&m, &wrong).is_err());
    }
}
