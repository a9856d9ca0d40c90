//! End-to-end orchestration: constraint processing, specialisation,
//! post-specialisation and evaluation.
//!
//! Every stage reads its inputs from the configured files or from artifacts
//! written by earlier stages into the output directory, so stages can be run
//! one at a time and produce the same files as a full run. Vector files are
//! written with exact round-trip formatting, which makes in-memory caching of
//! spaces between stages observationally identical to reloading them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attract_repel::{specialise, ArConfig};
use crate::constraints::{ConstraintSet, Group, LoadOptions, Relation};
use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};
use crate::eval::classification::{self, ClassifierConfig};
use crate::eval::{clusters, similarity, tsne};
use crate::postspec::{apply_mapping, train_postspec, PostSpecConfig};
use crate::projection::{self, ProjectionConfig, ProjectionMatrix, Translator};
use crate::seed;
use crate::stm::{self, Negatives, SharedSpace, StmConfig, StmKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    General,
    Domain,
    Both,
}

impl Selection {
    fn general(self) -> bool {
        self != Selection::Domain
    }

    fn domain(self) -> bool {
        self != Selection::General
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" => Ok(Selection::General),
            "domain" => Ok(Selection::Domain),
            "both" => Ok(Selection::Both),
            other => Err(Error::InvalidArgument(format!("unknown constraint selection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub source_vectors: PathBuf,
    pub target_vectors: PathBuf,
    /// Read only the first rows of each vector file.
    #[serde(default)]
    pub vector_limit: Option<usize>,
    #[serde(default)]
    pub seed_dictionary: Option<PathBuf>,
    /// A previously trained projection; replaces `seed_dictionary` training.
    #[serde(default)]
    pub projection_matrix: Option<PathBuf>,
    #[serde(default)]
    pub general_attract: Option<PathBuf>,
    #[serde(default)]
    pub general_repel: Option<PathBuf>,
    #[serde(default)]
    pub domain_attract: Option<PathBuf>,
    #[serde(default)]
    pub domain_repel: Option<PathBuf>,
    #[serde(default)]
    pub crosslingual_attract: Option<PathBuf>,
    #[serde(default)]
    pub external_attract: Option<PathBuf>,
    #[serde(default)]
    pub external_repel: Option<PathBuf>,
    #[serde(default)]
    pub benchmarks: Vec<PathBuf>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub cluster_seeds: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub phrase_level: bool,
    pub refinement: bool,
    pub postspec: bool,
    pub use_external_target: bool,
    pub constraint_selection: Selection,
    /// Also refine projected general constraints (not only domain ones).
    pub refine_general: bool,
    /// Keep the attract-repel vectors for seen words in the final space.
    pub splice: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            phrase_level: true,
            refinement: true,
            postspec: true,
            use_external_target: true,
            constraint_selection: Selection::Both,
            refine_general: true,
            splice: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub classifier: ClassifierConfig,
    pub classifier_runs: usize,
    pub cluster_k: usize,
    pub tsne: bool,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            classifier_runs: 5,
            cluster_k: 20,
            tsne: false,
            tsne_perplexity: 15.0,
            tsne_iterations: 1000,
        }
    }
}

fn default_source() -> String {
    "en".into()
}

fn default_target() -> String {
    "zh".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_source")]
    pub source_lang: String,
    #[serde(default = "default_target")]
    pub target_lang: String,
    pub output_dir: PathBuf,
    pub paths: Paths,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub stm: StmConfig,
    #[serde(default)]
    pub attract_repel: ArConfig,
    #[serde(default)]
    pub postspec: PostSpecConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    /// Parses a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let p = &mut self.paths;
        fix(&mut p.source_vectors);
        fix(&mut p.target_vectors);
        for opt in [
            &mut p.seed_dictionary,
            &mut p.projection_matrix,
            &mut p.general_attract,
            &mut p.general_repel,
            &mut p.domain_attract,
            &mut p.domain_repel,
            &mut p.crosslingual_attract,
            &mut p.external_attract,
            &mut p.external_repel,
            &mut p.dataset,
            &mut p.cluster_seeds,
        ] {
            if let Some(x) = opt {
                fix(x);
            }
        }
        p.benchmarks.iter_mut().for_each(fix);
    }

    /// Checks module settings and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.stm.validate()?;
        self.attract_repel.validate()?;
        self.postspec.validate()?;
        let p = &self.paths;
        if p.seed_dictionary.is_none() && p.projection_matrix.is_none() {
            return Err(Error::InvalidArgument("either seed_dictionary or projection_matrix is required".into()));
        }
        let mut files: Vec<&PathBuf> = vec![&p.source_vectors, &p.target_vectors];
        files.extend(
            [
                &p.seed_dictionary,
                &p.projection_matrix,
                &p.general_attract,
                &p.general_repel,
                &p.domain_attract,
                &p.domain_repel,
                &p.crosslingual_attract,
                &p.external_attract,
                &p.external_repel,
                &p.dataset,
                &p.cluster_seeds,
            ]
            .into_iter()
            .flatten(),
        );
        files.extend(&p.benchmarks);
        for f in files {
            if !f.is_file() {
                return Err(Error::InvalidArgument(format!("input file not found: {}", f.display())));
            }
        }
        if self.evaluation.classifier_runs == 0 || self.evaluation.cluster_k == 0 {
            return Err(Error::InvalidArgument("classifier_runs and cluster_k must be positive".into()));
        }
        Ok(())
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            source_lang: self.source_lang.clone(),
            target_lang: self.target_lang.clone(),
            allow_crosslingual_repel: false,
        }
    }

    /// Seed of a named stage, derived from the global seed.
    pub fn stage_seed(&self, label: &str) -> u64 {
        seed::derive(self.seed, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageStatus {
    Success,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub counts: Value,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageRecord {
    fn new(name: &str, status: StageStatus) -> Self {
        Self {
            name: name.to_string(),
            status,
            seconds: 0.0,
            artifacts: Vec::new(),
            counts: json!({}),
            metrics: BTreeMap::new(),
            error: None,
        }
    }

    fn count(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("serialisable counts");
        self.counts.as_object_mut().expect("object").insert(key.to_string(), v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// The manifest with timings zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.stages.iter_mut().for_each(|s| s.seconds = 0.0);
        m
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Name of a projected/refined constraint file.
fn set_file(group: Group, relation: Relation) -> String {
    format!("{}_{}.tsv", group.as_str(), relation.as_str())
}

const PROJECTED: &str = "projected";
const REFINED: &str = "refined";
const MERGED: &str = "constraints";
const SPACES: &str = "spaces";
const MODELS: &str = "models";
const LOGS: &str = "logs";
const EVAL: &str = "eval";

/// A space to evaluate, with the label used in reports.
struct Labeled {
    label: String,
    space: EmbeddingSpace,
}

/// Pipeline state: the configuration plus spaces cached between stages.
pub struct Pipeline {
    cfg: PipelineConfig,
    source: Option<EmbeddingSpace>,
    target: Option<EmbeddingSpace>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        Ok(Self {
            cfg,
            source: None,
            target: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn out(&self, rel: &str) -> Result<PathBuf> {
        let p = self.cfg.output_dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn upstream(&self, rel: &str) -> Result<PathBuf> {
        let p = self.cfg.output_dir.join(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::InvalidArgument(format!(
                "missing upstream artifact {}; run the earlier stages first",
                p.display()
            )))
        }
    }

    fn load_space(&self, path: &Path, what: &str) -> Result<EmbeddingSpace> {
        let (space, stats) = EmbeddingSpace::load(path, self.cfg.paths.vector_limit)?;
        log::info!("{what}: {} words, dim {} ({} duplicates skipped)", space.len(), space.dim(), stats.duplicates);
        space.unit_normalize()
    }

    fn ensure_spaces(&mut self) -> Result<()> {
        if self.source.is_none() {
            self.source = Some(self.load_space(&self.cfg.paths.source_vectors.clone(), "source space")?);
        }
        if self.target.is_none() {
            self.target = Some(self.load_space(&self.cfg.paths.target_vectors.clone(), "target space")?);
        }
        Ok(())
    }

    fn spaces(&mut self) -> Result<(&EmbeddingSpace, &EmbeddingSpace)> {
        self.ensure_spaces()?;
        Ok((self.source.as_ref().expect("loaded"), self.target.as_ref().expect("loaded")))
    }

    fn target(&mut self) -> Result<&EmbeddingSpace> {
        Ok(self.spaces()?.1)
    }

    fn source_set(&self, group: Group, relation: Relation) -> Result<Option<ConstraintSet>> {
        let p = &self.cfg.paths;
        let path = match (group, relation) {
            (Group::General, Relation::Attract) => &p.general_attract,
            (Group::General, Relation::Repel) => &p.general_repel,
            (Group::Domain, Relation::Attract) => &p.domain_attract,
            (Group::Domain, Relation::Repel) => &p.domain_repel,
            (Group::CrossLingual, Relation::Attract) => &p.crosslingual_attract,
            _ => &None,
        };
        path.as_ref()
            .map(|f| ConstraintSet::load(f, relation, group, &self.cfg.load_options()).map(|(s, _)| s))
            .transpose()
    }

    /// Source groups selected by the configuration, in processing order.
    fn selected_groups(&self) -> Vec<(Group, Relation)> {
        let sel = self.cfg.ablation.constraint_selection;
        let mut out = Vec::new();
        for (g, on) in [(Group::General, sel.general()), (Group::Domain, sel.domain())] {
            if on {
                out.push((g, Relation::Attract));
                out.push((g, Relation::Repel));
            }
        }
        if sel.domain() {
            out.push((Group::CrossLingual, Relation::Attract));
        }
        out
    }

    fn projection_matrix(&mut self) -> Result<ProjectionMatrix> {
        ProjectionMatrix::load(self.upstream("projection.json")?)
    }

    /// Loads both spaces and reports their sizes.
    pub fn stage_load(&mut self) -> Result<StageRecord> {
        let mut rec = StageRecord::new("load", StageStatus::Success);
        let (src, tgt) = self.spaces()?;
        let (sl, sd, tl, td) = (src.len(), src.dim(), tgt.len(), tgt.dim());
        rec.count("source_words", sl);
        rec.count("source_dim", sd);
        rec.count("target_words", tl);
        rec.count("target_dim", td);
        Ok(rec)
    }

    /// Learns (or loads) the projection and translates every selected source group.
    pub fn stage_project(&mut self) -> Result<StageRecord> {
        let mut rec = StageRecord::new("project", StageStatus::Success);
        let mut pcfg = self.cfg.projection.clone();
        pcfg.seed = self.cfg.stage_seed("projection");
        let w = match &self.cfg.paths.projection_matrix {
            Some(p) => {
                rec.count("projection", json!({ "loaded_from": p }));
                ProjectionMatrix::load(p)?
            }
            None => {
                let dict_path = self.cfg.paths.seed_dictionary.clone().expect("validated");
                let dict = projection::load_seed_dictionary(&dict_path)?;
                let (src, tgt) = self.spaces()?;
                let (w, report) = projection::train_rcsls(src, tgt, &dict, &pcfg)?;
                rec.count("projection", &report);
                w
            }
        };
        let w_path = self.out("projection.json")?;
        w.save(&w_path)?;
        rec.artifacts.push("projection.json".into());

        let groups = self.selected_groups();
        let sets: Vec<(Group, Relation, ConstraintSet)> = groups
            .into_iter()
            .filter_map(|(g, r)| self.source_set(g, r).transpose().map(|s| s.map(|s| (g, r, s))))
            .collect::<Result<_>>()?;
        let phrase_level = self.cfg.ablation.phrase_level;
        let (sl, tl) = (self.cfg.source_lang.clone(), self.cfg.target_lang.clone());
        let (src, tgt) = self.spaces()?;
        let tr = Translator::new(&w, src, tgt, &pcfg, &sl, &tl)?;
        let mut reports = BTreeMap::new();
        let mut artifacts = Vec::new();
        for (g, r, set) in &sets {
            let (out, report) = if *g == Group::CrossLingual {
                projection::translate_crosslingual(set, &tr, phrase_level)?
            } else {
                projection::project_constraints(set, &tr, phrase_level)?
            };
            let name = format!("{PROJECTED}/{}", set_file(*g, *r));
            artifacts.push((name.clone(), out));
            reports.insert(set_file(*g, *r).trim_end_matches(".tsv").to_string(), report);
        }
        // Stale files from an earlier run with a wider selection must not leak into later stages.
        let _ = fs::remove_dir_all(self.cfg.output_dir.join(PROJECTED));
        for (name, set) in &artifacts {
            set.save(self.out(name)?)?;
            rec.artifacts.push(name.clone());
        }
        let dropped: usize = reports.values().map(|r| r.phrase_pairs_dropped).sum();
        rec.count("phrase_pairs_dropped", dropped);
        rec.count("groups", &reports);
        Ok(rec)
    }

    fn read_stage_set(&self, dir: &str, group: Group, relation: Relation) -> Result<Option<ConstraintSet>> {
        let path = self.cfg.output_dir.join(dir).join(set_file(group, relation));
        if !path.is_file() {
            return Ok(None);
        }
        // Translated cross-lingual pairs are monolingual target pairs.
        let load_group = if group == Group::CrossLingual { Group::Domain } else { group };
        let (mut set, _) = ConstraintSet::load(&path, relation, load_group, &self.cfg.load_options())?;
        set.group = load_group;
        Ok(Some(set))
    }

    fn kind_for(group: Group, relation: Relation) -> StmKind {
        match (group, relation) {
            (Group::General, Relation::Attract) => StmKind::Ga,
            (Group::General, Relation::Repel) => StmKind::Gr,
            (Group::CrossLingual, _) => StmKind::Dcl,
            (_, Relation::Attract) => StmKind::Da,
            (_, Relation::Repel) => StmKind::Dr,
        }
    }

    /// Filters each projected group with its own relation classifier.
    pub fn stage_refine(&mut self) -> Result<StageRecord> {
        if !self.cfg.output_dir.join(PROJECTED).is_dir() {
            return Err(Error::InvalidArgument("missing upstream artifact: projected constraints".into()));
        }
        let enabled = self.cfg.ablation.refinement;
        let mut rec = StageRecord::new("refine", if enabled { StageStatus::Success } else { StageStatus::Skipped });
        let w = self.projection_matrix()?;
        let _ = fs::remove_dir_all(self.cfg.output_dir.join(REFINED));
        let mut groups = BTreeMap::new();
        for (group, relation) in self.selected_groups() {
            let Some(candidates) = self.read_stage_set(PROJECTED, group, relation)? else {
                continue;
            };
            let key = set_file(group, relation).trim_end_matches(".tsv").to_string();
            let refine_this = enabled && (group != Group::General || self.cfg.ablation.refine_general);
            let (kept, entry) = if refine_this {
                self.refine_group(group, relation, &candidates, &w, &mut rec)?
            } else {
                let why = if enabled { "general groups not refined" } else { "refinement disabled" };
                (candidates.clone(), json!({ "input": candidates.len(), "kept": candidates.len(), "passthrough": why }))
            };
            let name = format!("{REFINED}/{}", set_file(group, relation));
            kept.save(self.out(&name)?)?;
            rec.artifacts.push(name);
            groups.insert(key, entry);
        }
        rec.count("groups", &groups);
        Ok(rec)
    }

    fn refine_group(
        &mut self,
        group: Group,
        relation: Relation,
        candidates: &ConstraintSet,
        w: &ProjectionMatrix,
        rec: &mut StageRecord,
    ) -> Result<(ConstraintSet, Value)> {
        let kind = Self::kind_for(group, relation);
        let positives = self.source_set(group, relation)?.unwrap_or_else(|| ConstraintSet::new(relation, group));
        let confusion = if group == Group::CrossLingual {
            None
        } else {
            self.source_set(group, relation.opposite())?
        };
        let mut scfg = self.cfg.stm.clone();
        scfg.seed = self.cfg.stage_seed(&format!("stm-{kind}"));
        let (sl, tl) = (self.cfg.source_lang.clone(), self.cfg.target_lang.clone());
        let model_name = format!("{MODELS}/stm_{kind}.json");
        let model_path = self.out(&model_name)?;
        let (src, tgt) = self.spaces()?;
        let shared = SharedSpace::with_source(tgt, &tl, src, w, &sl)?;
        let trained = stm::train_stm(kind, &positives, Negatives::Auto { confusion: confusion.as_ref() }, &shared, &scfg);
        let (model, report) = match trained {
            Ok(x) => x,
            Err(Error::InsufficientData(msg)) => {
                log::warn!("{kind}: {msg}; passing candidates through unfiltered");
                return Ok((
                    candidates.clone(),
                    json!({ "input": candidates.len(), "kept": candidates.len(), "passthrough": msg }),
                ));
            }
            Err(e) => return Err(e),
        };
        model.save(&model_path)?;
        rec.artifacts.push(model_name);
        let (kept, filter) = stm::filter_constraints(&model, candidates, &shared, scfg.threshold)?;
        let entry = json!({
            "classifier": kind.as_str(),
            "input": filter.input,
            "kept": filter.kept,
            "dropped": filter.dropped,
            "unresolvable": filter.unresolvable,
            "heldout_accuracy": report.heldout_accuracy,
            "best_epoch": report.best_epoch,
            "train_pairs": report.train_size + report.heldout_size,
        });
        Ok((kept, entry))
    }

    fn merged_sets(&self, rec: &mut StageRecord) -> Result<(ConstraintSet, ConstraintSet)> {
        if !self.cfg.output_dir.join(REFINED).is_dir() {
            return Err(Error::InvalidArgument("missing upstream artifact: refined constraints".into()));
        }
        let mut attract = Vec::new();
        let mut repel = Vec::new();
        for (group, relation) in self.selected_groups() {
            if let Some(set) = self.read_stage_set(REFINED, group, relation)? {
                match relation {
                    Relation::Attract => attract.push(set),
                    Relation::Repel => repel.push(set),
                }
            }
        }
        let ab = &self.cfg.ablation;
        if ab.use_external_target && ab.constraint_selection.domain() {
            let p = &self.cfg.paths;
            let mut dropped = 0;
            for (path, relation, bucket) in [
                (&p.external_attract, Relation::Attract, &mut attract),
                (&p.external_repel, Relation::Repel, &mut repel),
            ] {
                if let Some(path) = path {
                    let (set, _) = ConstraintSet::load(path, relation, Group::Domain, &self.cfg.load_options())?;
                    if let Some(lang) = set.language() {
                        if lang != self.cfg.target_lang {
                            return Err(Error::InvalidArgument(format!(
                                "{}: external constraints must be in the target language",
                                path.display()
                            )));
                        }
                    }
                    let set = if ab.phrase_level {
                        set
                    } else {
                        let s = set.without_phrases();
                        dropped += set.len() - s.len();
                        s
                    };
                    rec.count(&format!("external_{}", relation.as_str()), set.len());
                    bucket.push(set);
                }
            }
            rec.count("external_phrase_pairs_dropped", dropped);
        }
        let merge = |sets: &[ConstraintSet], relation| {
            if sets.is_empty() {
                Ok(ConstraintSet::new(relation, Group::Both))
            } else {
                ConstraintSet::merge(sets)
            }
        };
        Ok((merge(&attract, Relation::Attract)?, merge(&repel, Relation::Repel)?))
    }

    /// Merges the refined groups (plus external target constraints) and specialises the target space.
    pub fn stage_specialise(&mut self) -> Result<StageRecord> {
        let mut rec = StageRecord::new("specialise", StageStatus::Success);
        let (attract, repel) = self.merged_sets(&mut rec)?;
        for (set, rel) in [(&attract, Relation::Attract), (&repel, Relation::Repel)] {
            let name = format!("{MERGED}/{}.tsv", rel.as_str());
            set.save(self.out(&name)?)?;
            rec.artifacts.push(name);
        }
        let mut acfg = self.cfg.attract_repel.clone();
        acfg.seed = self.cfg.stage_seed("attract-repel");
        let target = self.target()?;
        let seen = attract.seen_vocabulary(target).words.union(&repel.seen_vocabulary(target).words).count();
        let (ar, report) = specialise(target, &attract, &repel, &acfg)?;
        rec.count("attract_pairs", attract.len());
        rec.count("repel_pairs", repel.len());
        rec.count("resolved_attract", report.attract_pairs);
        rec.count("resolved_repel", report.repel_pairs);
        rec.count("unresolved_pairs", report.unresolved_pairs);
        rec.count("seen_words", seen);
        rec.count("updated_rows", report.updated_rows);
        let ar_name = format!("{SPACES}/ar.vec");
        ar.save(self.out(&ar_name)?)?;
        report.write_log(self.out(&format!("{LOGS}/attract_repel.csv"))?)?;
        rec.artifacts.push(ar_name);
        rec.artifacts.push(format!("{LOGS}/attract_repel.csv"));
        Ok(rec)
    }

    fn load_artifact_space(&self, rel: &str) -> Result<EmbeddingSpace> {
        Ok(EmbeddingSpace::load(self.upstream(rel)?, None)?.0)
    }

    /// Learns the global mapping on seen words and applies it to every word.
    pub fn stage_postspec(&mut self) -> Result<StageRecord> {
        let ar = self.load_artifact_space(&format!("{SPACES}/ar.vec"))?;
        let final_name = format!("{SPACES}/final.vec");
        if !self.cfg.ablation.postspec {
            let mut rec = StageRecord::new("postspec", StageStatus::Skipped);
            ar.save(self.out(&final_name)?)?;
            rec.artifacts.push(final_name);
            rec.count("note", "final space is the attract-repel space");
            return Ok(rec);
        }
        let mut rec = StageRecord::new("postspec", StageStatus::Success);
        let opts = self.cfg.load_options();
        let load = |rel: Relation| -> Result<ConstraintSet> {
            let p = self.upstream(&format!("{MERGED}/{}.tsv", rel.as_str()))?;
            Ok(ConstraintSet::load(p, rel, Group::Both, &opts)?.0)
        };
        let (attract, repel) = (load(Relation::Attract)?, load(Relation::Repel)?);
        let mut pcfg = self.cfg.postspec.clone();
        pcfg.seed = self.cfg.stage_seed("postspec");
        let splice = self.cfg.ablation.splice;
        let target = self.target()?;
        let seen: BTreeSet<String> = attract
            .seen_vocabulary(target)
            .words
            .union(&repel.seen_vocabulary(target).words)
            .cloned()
            .collect();
        let (model, report) = train_postspec(target, &ar, &seen, &pcfg)?;
        let mut mapped = apply_mapping(&model, target)?;
        if splice {
            let mut v = mapped.vectors().clone();
            for w in &seen {
                let i = mapped.index_of(w).expect("seen words are in the vocabulary");
                v.row_mut(i).assign(&ar.vector(w).expect("same vocabulary"));
            }
            mapped = mapped.with_vectors(v)?;
        }
        mapped.save(self.out(&final_name)?)?;
        let model_name = format!("{MODELS}/postspec.bin");
        model.save(self.out(&model_name)?)?;
        let log_name = format!("{LOGS}/postspec.csv");
        report.write_log(self.out(&log_name)?)?;
        rec.artifacts.extend([final_name, model_name, log_name]);
        rec.count("seen_words", seen.len());
        rec.count("train_words", report.train_words);
        rec.count("heldout_words", report.heldout_words);
        rec.count("best_epoch", report.best_epoch);
        rec.count("initial_heldout_mm", report.initial_heldout_mm);
        rec.count("spliced", splice);
        if let Some(best) = report.epochs.iter().find(|e| e.epoch == report.best_epoch) {
            rec.metrics.insert("postspec/heldout_mm".into(), best.heldout_mm);
        }
        Ok(rec)
    }

    /// Spaces to evaluate: an explicit file, or the original, attract-repel
    /// and final spaces when they exist.
    fn eval_spaces(&mut self, explicit: Option<&Path>) -> Result<Vec<Labeled>> {
        if let Some(p) = explicit {
            let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "space".into());
            return Ok(vec![Labeled {
                label,
                space: EmbeddingSpace::load(p, None)?.0,
            }]);
        }
        let mut out = vec![Labeled {
            label: "original".into(),
            space: self.target()?.clone(),
        }];
        for name in ["ar", "final"] {
            let rel = format!("{SPACES}/{name}.vec");
            if self.cfg.output_dir.join(&rel).is_file() {
                out.push(Labeled {
                    label: name.into(),
                    space: self.load_artifact_space(&rel)?,
                });
            }
        }
        Ok(out)
    }

    /// Spearman correlation on every configured benchmark.
    pub fn stage_eval_sim(&mut self, space: Option<&Path>) -> Result<StageRecord> {
        if self.cfg.paths.benchmarks.is_empty() {
            return Ok(StageRecord::new("eval-sim", StageStatus::Skipped));
        }
        let mut rec = StageRecord::new("eval-sim", StageStatus::Success);
        let benches: Vec<similarity::SimilarityBenchmark> = self
            .cfg
            .paths
            .benchmarks
            .iter()
            .map(similarity::SimilarityBenchmark::load)
            .collect::<Result<_>>()?;
        let mut csv = String::from("space,benchmark,rho,covered,total\n");
        let mut rows = Vec::new();
        for s in self.eval_spaces(space)? {
            for b in &benches {
                let r = similarity::eval_word_similarity(&s.space, b)?;
                writeln!(csv, "{},{},{},{},{}", csv_field(&s.label), csv_field(&r.benchmark), r.rho, r.covered, r.total)
                    .expect("string write");
                rec.metrics.insert(format!("similarity/{}/{}", s.label, r.benchmark), r.rho);
                rows.push(json!({ "space": s.label, "benchmark": r.benchmark, "covered": r.covered, "total": r.total }));
            }
        }
        let name = format!("{EVAL}/similarity.csv");
        write_atomic(&self.out(&name)?, csv.as_bytes())?;
        rec.artifacts.push(name);
        rec.count("coverage", rows);
        Ok(rec)
    }

    /// Proxy classifier over a fixed stratified split, several seeds per space.
    pub fn stage_eval_clf(&mut self, space: Option<&Path>) -> Result<StageRecord> {
        let Some(path) = self.cfg.paths.dataset.clone() else {
            return Ok(StageRecord::new("eval-clf", StageStatus::Skipped));
        };
        let mut rec = StageRecord::new("eval-clf", StageStatus::Success);
        let ecfg = self.cfg.evaluation.clone();
        let data = classification::split_dataset(
            &classification::LabeledDataset::load(&path)?,
            ecfg.classifier.split,
            self.cfg.stage_seed("dataset-split"),
        )?;
        let seeds: Vec<u64> = (0..ecfg.classifier_runs)
            .map(|i| self.cfg.stage_seed(&format!("classifier-{i}")))
            .collect();
        let mut csv = String::from("space,run,seed,f1_sexist,f1_nonsexist,macro_f1,accuracy\n");
        for s in self.eval_spaces(space)? {
            let r = classification::evaluate_over_seeds(&s.space, &data, &ecfg.classifier, &seeds)?;
            for (i, (run, sd)) in r.runs.iter().zip(&r.seeds).enumerate() {
                writeln!(
                    csv,
                    "{},{i},{sd},{},{},{},{}",
                    csv_field(&s.label),
                    run.f1_sexist,
                    run.f1_nonsexist,
                    run.macro_f1,
                    run.accuracy
                )
                .expect("string write");
            }
            rec.metrics.insert(format!("classification/{}/macro_f1", s.label), r.macro_f1_mean);
            rec.metrics.insert(format!("classification/{}/macro_f1_std", s.label), r.macro_f1_std);
            rec.metrics.insert(format!("classification/{}/accuracy", s.label), r.accuracy_mean);
            rec.metrics.insert(format!("classification/{}/accuracy_std", s.label), r.accuracy_std);
        }
        let name = format!("{EVAL}/classification.csv");
        write_atomic(&self.out(&name)?, csv.as_bytes())?;
        rec.artifacts.push(name);
        let dist: Vec<Value> = data
            .label_distribution()
            .iter()
            .map(|(s, p, n)| json!({ "split": s, "sexist": p, "non_sexist": n }))
            .collect();
        rec.count("splits", dist);
        Ok(rec)
    }

    /// Local distance of seed words to their original neighbours, per space.
    pub fn stage_clusters(&mut self, space: Option<&Path>) -> Result<StageRecord> {
        let Some(path) = self.cfg.paths.cluster_seeds.clone() else {
            return Ok(StageRecord::new("clusters", StageStatus::Skipped));
        };
        let mut rec = StageRecord::new("clusters", StageStatus::Success);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let seeds: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect();
        let ecfg = self.cfg.evaluation.clone();
        let tsne_seed = self.cfg.stage_seed("tsne");
        let source = self.target()?.clone();
        let mut csv = String::from("space,seed,local_dist\n");
        for s in self.eval_spaces(space)? {
            let report = clusters::cluster_report(&s.space, &seeds, ecfg.cluster_k, &source)?;
            for c in &report.clusters {
                writeln!(csv, "{},{},{}", csv_field(&s.label), csv_field(&c.seed), c.local_dist).expect("string write");
            }
            writeln!(csv, "{},ALL,{}", csv_field(&s.label), report.overall).expect("string write");
            rec.metrics.insert(format!("clusters/{}/local_dist", s.label), report.overall);
            rec.count("points", report.unique_points);
            if ecfg.tsne {
                let points = report.points();
                let mut m = ndarray::Array2::zeros((points.len(), s.space.dim()));
                for (i, (w, _)) in points.iter().enumerate() {
                    m.row_mut(i).assign(&s.space.vector(w).expect("points come from the space"));
                }
                let tcfg = tsne::TsneConfig {
                    perplexity: ecfg.tsne_perplexity,
                    iterations: ecfg.tsne_iterations,
                    seed: tsne_seed,
                    ..Default::default()
                };
                match tsne::project_2d(&m, &tcfg) {
                    Ok(r) => {
                        let name = format!("{EVAL}/tsne_{}.csv", s.label);
                        tsne::write_coordinates(self.out(&name)?, &points, &r.coords)?;
                        rec.artifacts.push(name);
                    }
                    Err(Error::InvalidArgument(msg)) => log::warn!("skipping t-SNE: {msg}"),
                    Err(e) => return Err(e),
                }
            }
        }
        let name = format!("{EVAL}/clusters.csv");
        write_atomic(&self.out(&name)?, csv.as_bytes())?;
        rec.artifacts.insert(0, name);
        Ok(rec)
    }

    /// Runs every stage in order and writes `manifest.json`.
    ///
    /// A failing stage is recorded in the manifest, earlier artifacts are kept,
    /// and the error is returned tagged with the stage name.
    pub fn run(&mut self) -> Result<RunManifest> {
        type Stage = fn(&mut Pipeline) -> Result<StageRecord>;
        let stages: [(&str, Stage); 8] = [
            ("load", Pipeline::stage_load),
            ("project", Pipeline::stage_project),
            ("refine", Pipeline::stage_refine),
            ("specialise", Pipeline::stage_specialise),
            ("postspec", Pipeline::stage_postspec),
            ("eval-sim", |p| p.stage_eval_sim(None)),
            ("eval-clf", |p| p.stage_eval_clf(None)),
            ("clusters", |p| p.stage_clusters(None)),
        ];
        let mut manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            stages: Vec::new(),
            metrics: BTreeMap::new(),
        };
        let manifest_path = self.cfg.output_dir.join("manifest.json");
        for (name, stage) in stages {
            let start = Instant::now();
            log::info!("stage {name}");
            match stage(self) {
                Ok(mut rec) => {
                    rec.seconds = start.elapsed().as_secs_f64();
                    manifest.metrics.extend(rec.metrics.clone());
                    manifest.stages.push(rec);
                }
                Err(e) => {
                    let mut rec = StageRecord::new(name, StageStatus::Failed);
                    rec.seconds = start.elapsed().as_secs_f64();
                    rec.error = Some(e.to_string());
                    manifest.stages.push(rec);
                    write_json(&manifest_path, &manifest)?;
                    return Err(e.in_stage(name));
                }
            }
        }
        write_json(&manifest_path, &manifest)?;
        write_atomic(&self.cfg.output_dir.join(EVAL).join("summary.txt"), summary_table(&manifest.metrics).as_bytes())?;
        Ok(manifest)
    }
}

/// Plain-text table of metrics.
pub fn summary_table(metrics: &BTreeMap<String, f64>) -> String {
    let width = metrics.keys().map(String::len).max().unwrap_or(6).max(6);
    let mut out = format!("{:width$}  value\n", "metric");
    for (k, v) in metrics {
        writeln!(out, "{k:width$}  {v:.4}").expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// Repeats the pipeline with reseeded runs under `output_dir/run-<i>` and
/// aggregates every metric as mean and sample standard deviation.
pub fn run_repeated(cfg: &PipelineConfig, runs: usize) -> Result<Aggregate> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be positive".into()));
    }
    let mut seeds = Vec::new();
    let mut collected: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..runs {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(i as u64);
        c.output_dir = cfg.output_dir.join(format!("run-{i}"));
        seeds.push(c.seed);
        let manifest = Pipeline::new(c)?.run()?;
        for (k, v) in manifest.metrics {
            collected.entry(k).or_default().push(v);
        }
    }
    let metrics = collected
        .into_iter()
        .map(|(k, values)| {
            let (mean, std) = classification::mean_std(&values);
            (k, MetricSummary { mean, std, values })
        })
        .collect();
    let agg = Aggregate { runs, seeds, metrics };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(&cfg.output_dir.join("aggregate.json"), &agg)?;
    let mut csv = String::from("metric,mean,std\n");
    for (k, m) in &agg.metrics {
        writeln!(csv, "{},{},{}", csv_field(k), m.mean, m.std).expect("string write");
    }
    write_atomic(&cfg.output_dir.join("aggregate.csv"), csv.as_bytes())?;
    Ok(agg)
}
