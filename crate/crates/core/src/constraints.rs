//! Language-tagged ATTRACT/REPEL constraint sets.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSpace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Attract,
    Repel,
}

impl Relation {
    pub fn opposite(self) -> Self {
        match self {
            Relation::Attract => Relation::Repel,
            Relation::Repel => Relation::Attract,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Attract => "attract",
            Relation::Repel => "repel",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attract" => Ok(Relation::Attract),
            "repel" => Ok(Relation::Repel),
            other => Err(Error::InvalidArgument(format!("unknown relation {other:?}"))),
        }
    }
}

/// Which family of lexical resources a constraint set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    General,
    Domain,
    Both,
    #[serde(rename = "crosslingual")]
    CrossLingual,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::General => "general",
            Group::Domain => "domain",
            Group::Both => "both",
            Group::CrossLingual => "crosslingual",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "general" | "g" => Ok(Group::General),
            "domain" | "d" => Ok(Group::Domain),
            "both" => Ok(Group::Both),
            "crosslingual" | "cl" => Ok(Group::CrossLingual),
            other => Err(Error::InvalidArgument(format!("unknown group {other:?}"))),
        }
    }
}

/// A word or phrase with its language code, serialised as `<lang>_<surface>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaggedTerm {
    pub lang: String,
    pub surface: String,
}

impl TaggedTerm {
    pub fn new(lang: impl Into<String>, surface: impl Into<String>) -> Self {
        Self {
            lang: lang.into(),
            surface: surface.into(),
        }
    }

    /// Splits at the first underscore; everything after it is the surface.
    pub fn parse(s: &str) -> Option<Self> {
        let (lang, surface) = s.split_once('_')?;
        if lang.is_empty() || surface.trim().is_empty() {
            return None;
        }
        Some(Self::new(lang, surface.trim()))
    }

    /// Phrase tokens; spaces and underscores both separate tokens.
    pub fn tokens(&self) -> Vec<&str> {
        self.surface
            .split([' ', '_'])
            .filter(|t| !t.is_empty())
            .collect()
    }

    pub fn is_phrase(&self) -> bool {
        self.tokens().len() > 1
    }

    pub fn retag(&self, lang: &str) -> Self {
        Self::new(lang, self.surface.clone())
    }
}

impl fmt::Display for TaggedTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.lang, self.surface)
    }
}

/// An unordered pair, stored with the smaller serialised term first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermPair {
    a: TaggedTerm,
    b: TaggedTerm,
}

impl TermPair {
    /// Returns `None` for a self-pair.
    pub fn new(x: TaggedTerm, y: TaggedTerm) -> Option<Self> {
        match x.to_string().cmp(&y.to_string()) {
            std::cmp::Ordering::Less => Some(Self { a: x, b: y }),
            std::cmp::Ordering::Greater => Some(Self { a: y, b: x }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn first(&self) -> &TaggedTerm {
        &self.a
    }

    pub fn second(&self) -> &TaggedTerm {
        &self.b
    }

    pub fn terms(&self) -> [&TaggedTerm; 2] {
        [&self.a, &self.b]
    }

    /// The term in `lang`, for cross-lingual pairs.
    pub fn side(&self, lang: &str) -> Option<&TaggedTerm> {
        self.terms().into_iter().find(|t| t.lang == lang)
    }

    pub fn has_phrase(&self) -> bool {
        self.a.is_phrase() || self.b.is_phrase()
    }
}

/// Counters reported by [`ConstraintSet::load`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintLoadReport {
    pub lines: usize,
    pub self_pairs: usize,
    pub duplicates: usize,
}

/// Options controlling language validation while loading.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub source_lang: String,
    pub target_lang: String,
    pub allow_crosslingual_repel: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            source_lang: "en".into(),
            target_lang: "zh".into(),
            allow_crosslingual_repel: false,
        }
    }
}

/// A deduplicated set of unordered pairs under one relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSet {
    pub relation: Relation,
    pub group: Group,
    pairs: BTreeSet<TermPair>,
}

/// Vocabulary coverage of a constraint set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Distinct vocabulary rows touched by resolvable terms (phrase tokens included).
    pub covered_words: usize,
    pub vocab_fraction: f64,
    pub covered_pairs: usize,
}

/// Single-word vocabulary touched by a constraint set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeenVocabulary {
    pub words: BTreeSet<String>,
    /// Distinct multi-token terms, which are not part of `words`.
    pub phrase_terms: usize,
}

/// How a term maps onto rows of a space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Word(usize),
    Phrase(Vec<usize>),
}

/// Resolves a term: whole surface first, then its tokens (all must be known).
pub fn resolve(space: &EmbeddingSpace, term: &TaggedTerm) -> Option<Resolution> {
    if let Some(i) = space.index_of(&term.surface) {
        return Some(Resolution::Word(i));
    }
    let tokens = term.tokens();
    if tokens.len() < 2 {
        return None;
    }
    tokens
        .iter()
        .map(|t| space.index_of(t))
        .collect::<Option<Vec<_>>>()
        .map(Resolution::Phrase)
}

impl ConstraintSet {
    pub fn new(relation: Relation, group: Group) -> Self {
        Self {
            relation,
            group,
            pairs: BTreeSet::new(),
        }
    }

    /// Inserts a pair; returns false for self-pairs and duplicates.
    pub fn insert(&mut self, x: TaggedTerm, y: TaggedTerm) -> bool {
        match TermPair::new(x, y) {
            Some(p) => self.pairs.insert(p),
            None => false,
        }
    }

    pub fn insert_pair(&mut self, pair: TermPair) -> bool {
        self.pairs.insert(pair)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TermPair> {
        self.pairs.iter()
    }

    pub fn contains(&self, pair: &TermPair) -> bool {
        self.pairs.contains(pair)
    }

    /// The single language of a monolingual set, `None` when empty or mixed.
    pub fn language(&self) -> Option<&str> {
        let first = self.pairs.iter().next()?;
        let lang = first.a.lang.as_str();
        self.pairs
            .iter()
            .all(|p| p.a.lang == lang && p.b.lang == lang)
            .then_some(lang)
    }

    pub fn load(
        path: impl AsRef<Path>,
        relation: Relation,
        group: Group,
        opts: &LoadOptions,
    ) -> Result<(Self, ConstraintLoadReport)> {
        let path = path.as_ref();
        if group == Group::CrossLingual
            && relation == Relation::Repel
            && !opts.allow_crosslingual_repel
        {
            return Err(Error::InvalidArgument(format!(
                "{}: cross-lingual REPEL constraints are disabled",
                path.display()
            )));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut set = Self::new(relation, group);
        let mut report = ConstraintLoadReport::default();
        let mut mono_lang: Option<String> = None;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let lineno = n + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            report.lines += 1;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected two tab-separated terms"))?;
            let x = TaggedTerm::parse(l)
                .ok_or_else(|| Error::parse(path, lineno, format!("untagged term {l:?}")))?;
            let y = TaggedTerm::parse(r)
                .ok_or_else(|| Error::parse(path, lineno, format!("untagged term {r:?}")))?;
            for t in [&x, &y] {
                if t.lang != opts.source_lang && t.lang != opts.target_lang {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("unknown language tag {:?}", t.lang),
                    ));
                }
            }
            if group == Group::CrossLingual {
                if x.lang == y.lang {
                    return Err(Error::parse(
                        path,
                        lineno,
                        "cross-lingual pair must mix source and target languages",
                    ));
                }
            } else {
                if x.lang != y.lang {
                    return Err(Error::parse(path, lineno, "language mismatch in monolingual pair"));
                }
                match &mono_lang {
                    None => mono_lang = Some(x.lang.clone()),
                    Some(l) if *l != x.lang => {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("expected language {l:?}, found {:?}", x.lang),
                        ))
                    }
                    Some(_) => {}
                }
            }
            match TermPair::new(x, y) {
                None => report.self_pairs += 1,
                Some(p) => {
                    if !set.pairs.insert(p) {
                        report.duplicates += 1;
                    }
                }
            }
        }
        if report.self_pairs > 0 || report.duplicates > 0 {
            log::warn!(
                "{}: dropped {} self-pairs and {} duplicates",
                path.display(),
                report.self_pairs,
                report.duplicates
            );
        }
        Ok((set, report))
    }

    /// Writes one `a<TAB>b` line per pair in canonical order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.pairs {
            writeln!(w, "{}\t{}", p.a, p.b).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Set union of same-relation sets.
    pub fn merge<'a, I>(sets: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ConstraintSet>,
    {
        let mut iter = sets.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::InvalidArgument("merge of zero sets".into()))?;
        let mut out = first.clone();
        for s in iter {
            if s.relation != out.relation {
                return Err(Error::InvalidArgument(format!(
                    "cannot merge {} with {} constraints",
                    out.relation, s.relation
                )));
            }
            out.group = match (out.group, s.group) {
                (a, b) if a == b => a,
                (Group::CrossLingual, _) | (_, Group::CrossLingual) => {
                    return Err(Error::InvalidArgument(
                        "cannot merge cross-lingual with monolingual constraints".into(),
                    ))
                }
                _ => Group::Both,
            };
            out.pairs.extend(s.pairs.iter().cloned());
        }
        Ok(out)
    }

    /// Pairs without any multi-token term.
    pub fn without_phrases(&self) -> Self {
        Self {
            relation: self.relation,
            group: self.group,
            pairs: self.pairs.iter().filter(|p| !p.has_phrase()).cloned().collect(),
        }
    }

    pub fn coverage(&self, space: &EmbeddingSpace) -> Coverage {
        let mut rows: BTreeSet<usize> = BTreeSet::new();
        let mut covered_pairs = 0;
        for p in &self.pairs {
            let ra = resolve(space, &p.a);
            let rb = resolve(space, &p.b);
            if ra.is_some() && rb.is_some() {
                covered_pairs += 1;
            }
            for r in [ra, rb].into_iter().flatten() {
                match r {
                    Resolution::Word(i) => {
                        rows.insert(i);
                    }
                    Resolution::Phrase(ix) => rows.extend(ix),
                }
            }
        }
        let covered_words = rows.len();
        let vocab_fraction = if space.is_empty() {
            0.0
        } else {
            covered_words as f64 / space.len() as f64
        };
        Coverage {
            covered_words,
            vocab_fraction,
            covered_pairs,
        }
    }

    pub fn seen_vocabulary(&self, space: &EmbeddingSpace) -> SeenVocabulary {
        let mut out = SeenVocabulary::default();
        let mut phrases: BTreeSet<&TaggedTerm> = BTreeSet::new();
        for p in &self.pairs {
            for t in p.terms() {
                if space.contains(&t.surface) {
                    out.words.insert(t.surface.clone());
                } else if t.is_phrase() {
                    phrases.insert(t);
                }
            }
        }
        out.phrase_terms = phrases.len();
        out
    }
}

impl FromIterator<TermPair> for ConstraintSet {
    /// Collects into an ATTRACT/DOMAIN set; adjust the fields afterwards.
    fn from_iter<T: IntoIterator<Item = TermPair>>(iter: T) -> Self {
        Self {
            relation: Relation::Attract,
            group: Group::Domain,
            pairs: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn t(s: &str) -> TaggedTerm {
        TaggedTerm::parse(s).unwrap()
    }

    fn space(words: &[&str]) -> EmbeddingSpace {
        let n = words.len();
        let mut m = Array2::zeros((n, 2));
        for i in 0..n {
            m[[i, 0]] = 1.0;
            m[[i, 1]] = i as f64;
        }
        EmbeddingSpace::new(words.iter().map(|w| w.to_string()).collect(), m).unwrap()
    }

    #[test]
    fn tagged_term_round_trip() {
        let term = t("zh_歧视");
        assert_eq!(term.lang, "zh");
        assert_eq!(term.surface, "歧视");
        assert_eq!(term.to_string(), "zh_歧视");
        assert!(t("en_angelic b*tch").is_phrase());
        assert!(TaggedTerm::parse("hate").is_none());
        assert!(TaggedTerm::parse("en_").is_none());
    }

    #[test]
    fn load_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.tsv", "");
        let (s, r) = ConstraintSet::load(&p, Relation::Attract, Group::Domain, &LoadOptions::default()).unwrap();
        assert!(s.is_empty());
        assert_eq!(r, ConstraintLoadReport::default());
    }

    #[test]
    fn load_crosslingual_pair() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "cl.tsv", "# seeds\nen_hate\tzh_憎恶\n");
        let (s, _) = ConstraintSet::load(&p, Relation::Attract, Group::CrossLingual, &LoadOptions::default()).unwrap();
        assert_eq!(s.len(), 1);
        let pair = s.iter().next().unwrap();
        assert_eq!(pair.side("en").unwrap().surface, "hate");
        assert_eq!(pair.side("zh").unwrap().surface, "憎恶");
    }

    #[test]
    fn load_counts_duplicates_and_self_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.tsv",
            "en_a\ten_b\nen_b\ten_a\nen_c\ten_c\nen_a\ten_long phrase\n",
        );
        let (s, r) = ConstraintSet::load(&p, Relation::Attract, Group::General, &LoadOptions::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(r.duplicates, 1);
        assert_eq!(r.self_pairs, 1);
        assert_eq!(r.lines, 4);
    }

    #[test]
    fn load_rejects_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let opts = LoadOptions::default();
        let notab = write(dir.path(), "a.tsv", "en_a en_b\n");
        assert!(matches!(
            ConstraintSet::load(&notab, Relation::Attract, Group::General, &opts),
            Err(Error::Parse { line: 1, .. })
        ));
        let untagged = write(dir.path(), "b.tsv", "en_a\tb\n");
        assert!(ConstraintSet::load(&untagged, Relation::Attract, Group::General, &opts).is_err());
        let mixed = write(dir.path(), "c.tsv", "en_a\tzh_b\n");
        assert!(ConstraintSet::load(&mixed, Relation::Attract, Group::Domain, &opts).is_err());
        let mono_cl = write(dir.path(), "d.tsv", "en_a\ten_b\n");
        assert!(ConstraintSet::load(&mono_cl, Relation::Attract, Group::CrossLingual, &opts).is_err());
        let two_langs = write(dir.path(), "e.tsv", "en_a\ten_b\nzh_a\tzh_b\n");
        assert!(matches!(
            ConstraintSet::load(&two_langs, Relation::Attract, Group::Domain, &opts),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn crosslingual_repel_needs_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.tsv", "en_a\tzh_b\n");
        let mut opts = LoadOptions::default();
        assert!(ConstraintSet::load(&p, Relation::Repel, Group::CrossLingual, &opts).is_err());
        opts.allow_crosslingual_repel = true;
        assert_eq!(
            ConstraintSet::load(&p, Relation::Repel, Group::CrossLingual, &opts).unwrap().0.len(),
            1
        );
    }

    #[test]
    fn merge_groups_and_relations() {
        let mut g = ConstraintSet::new(Relation::Attract, Group::General);
        g.insert(t("en_a"), t("en_b"));
        let mut d = ConstraintSet::new(Relation::Attract, Group::Domain);
        d.insert(t("en_b"), t("en_a"));
        d.insert(t("en_c"), t("en_d"));
        let m = ConstraintSet::merge([&g, &d]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.group, Group::Both);
        let empty = ConstraintSet::new(Relation::Attract, Group::General);
        assert_eq!(ConstraintSet::merge([&g, &empty]).unwrap(), g);
        let r = ConstraintSet::new(Relation::Repel, Group::General);
        assert!(ConstraintSet::merge([&g, &r]).is_err());
    }

    #[test]
    fn merge_reproduces_english_union_counts() {
        // Sizes of the general and domain English sets with the overlap implied by their union.
        fn build(group: Group, relation: Relation, range: std::ops::Range<usize>) -> ConstraintSet {
            let mut s = ConstraintSet::new(relation, group);
            for i in range {
                s.insert(TaggedTerm::new("en", format!("w{i}")), TaggedTerm::new("en", format!("v{i}")));
            }
            s
        }
        let general = build(Group::General, Relation::Attract, 0..640_435);
        let domain = build(Group::Domain, Relation::Attract, (640_435 - 2_586)..(640_435 - 2_586 + 130_445));
        assert_eq!(general.len(), 640_435);
        assert_eq!(domain.len(), 130_445);
        assert_eq!(ConstraintSet::merge([&general, &domain]).unwrap().len(), 768_294);

        let general = build(Group::General, Relation::Repel, 0..11_939);
        let domain = build(Group::Domain, Relation::Repel, (11_939 - 292)..(11_939 - 292 + 501));
        assert_eq!(ConstraintSet::merge([&general, &domain]).unwrap().len(), 12_148);
    }

    #[test]
    fn coverage_counts() {
        let sp = space(&["a", "b", "c", "d", "e", "f", "g", "h"]);
        let mut s = ConstraintSet::new(Relation::Attract, Group::Domain);
        let pairs = [
            ("a", "b"),
            ("a", "c"),
            ("b", "d"),
            ("x", "a"),
            ("e", "y"),
            ("f", "g"),
            ("z", "x"),
            ("c", "d"),
            ("e f", "a"),
            ("e q", "b"),
        ];
        for (x, y) in pairs {
            s.insert(TaggedTerm::new("zh", x), TaggedTerm::new("zh", y));
        }
        // OOV terms: x, y, z, and the phrase "e q"; phrase "e f" resolves. "h" is never used.
        let c = s.coverage(&sp);
        assert_eq!(c.covered_pairs, 6);
        assert_eq!(c.covered_words, 7);
        assert!((c.vocab_fraction - 7.0 / 8.0).abs() < 1e-12);

        let empty = ConstraintSet::new(Relation::Attract, Group::Domain);
        let c = empty.coverage(&sp);
        assert_eq!((c.covered_words, c.vocab_fraction, c.covered_pairs), (0, 0.0, 0));

        let seen = s.seen_vocabulary(&sp);
        let words: Vec<_> = seen.words.iter().map(String::as_str).collect();
        assert_eq!(words, vec!["a", "b", "c", "d", "e", "f", "g"]);
        assert_eq!(seen.phrase_terms, 2);
    }

    #[test]
    fn seen_vocabulary_definition() {
        let sp = space(&["a", "b", "c"]);
        let mut s = ConstraintSet::new(Relation::Attract, Group::Domain);
        assert!(s.seen_vocabulary(&sp).words.is_empty());
        s.insert(t("zh_a"), t("zh_b"));
        s.insert(t("zh_b"), t("zh_c"));
        assert_eq!(s.seen_vocabulary(&sp).words.len(), 3);
    }
}
