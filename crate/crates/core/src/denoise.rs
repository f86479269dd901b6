//! Structured versus random-order denoising on corrupted crystal corpora.
//!
//! A record is a crystal with some of its fields masked. The structured
//! schedule resolves masks in the order domain, relation, subject/object, so
//! every reconstructed concept is drawn from the resolved domain's fiber. The
//! random schedule applies the same resolvers in a random field order; a
//! concept resolved while its domain is still unknown is drawn from the pooled
//! vocabulary of every fiber.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{concept_distribution, expand_relations};
use crate::domain::DomainPath;
use crate::embeddings::EmbeddingSpace;
use crate::inference::effective_concepts;
use crate::meta::RelationSymbol;
use crate::par::{self, derive_seed, Execution};
use crate::store::{Crystal, CrystalLibrary, Scope, StoreError};

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid parameter: {0}")]
    InvalidSpec(String),
    #[error("fiber {domain} reached {accepted} of {quota} crystals before the retry budget ran out")]
    QuotaUnreachable {
        domain: DomainPath,
        accepted: usize,
        quota: usize,
    },
    #[error("library has no crystals")]
    EmptyLibrary,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Shape of a synthetic corpus. Fibers sit at the leaves of a uniform tree
/// of the given depth and branching under `root` (or ⊤).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub root: Option<String>,
    pub depth: usize,
    pub branching: usize,
    pub concepts_per_fiber: usize,
    pub crystals_per_fiber: usize,
    /// Fraction of each fiber's vocabulary drawn from a pool shared by all
    /// fibers; 0 gives fiber-disjoint vocabularies.
    pub shared_fraction: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// Six leaf fibers, 208 concepts and 834 crystals each: about 1,250
    /// entities and 5,000 tuples.
    pub fn icd11_like(seed: u64) -> Self {
        Self {
            root: Some("ICD11".into()),
            depth: 1,
            branching: 6,
            concepts_per_fiber: 208,
            crystals_per_fiber: 834,
            shared_fraction: 0.0,
            seed,
        }
    }

    fn check(&self) -> Result<(), DenoiseError> {
        if self.depth == 0 || self.branching == 0 || self.crystals_per_fiber == 0 {
            return Err(DenoiseError::InvalidSpec("depth, branching and crystals_per_fiber must be positive".into()));
        }
        if self.concepts_per_fiber < 2 {
            return Err(DenoiseError::InvalidSpec("concepts_per_fiber must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(DenoiseError::InvalidSpec(format!(
                "shared_fraction {} not in [0,1]",
                self.shared_fraction
            )));
        }
        Ok(())
    }

    pub fn leaves(&self) -> Vec<DomainPath> {
        let base = match &self.root {
            Some(r) => DomainPath::top().child(r).expect("valid root segment"),
            None => DomainPath::top(),
        };
        let mut level = vec![base];
        for _ in 0..self.depth {
            level = level
                .iter()
                .flat_map(|p| (0..self.branching).map(move |i| p.child(&format!("D{i}")).expect("valid segment")))
                .collect();
        }
        level
    }
}

const RETRIES_PER_CRYSTAL: usize = 50;

/// Builds a library whose crystals all pass the validation gate. Deterministic
/// per seed.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<CrystalLibrary, DenoiseError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut library = CrystalLibrary::default();
    let relations: Vec<RelationSymbol> = library.meta().relations().cloned().collect();
    let shared = (spec.shared_fraction * spec.concepts_per_fiber as f64).round() as usize;
    let pool: Vec<String> = (0..shared).map(|j| format!("shared_c{j}")).collect();
    for leaf in spec.leaves() {
        library.register_domain(&leaf);
        let tag = leaf.segments().join("_");
        let mut vocab: Vec<String> = pool.clone();
        vocab.extend((0..spec.concepts_per_fiber - shared).map(|j| format!("{tag}_c{j}")));
        let quota = spec.crystals_per_fiber;
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < quota {
            if attempts == quota * RETRIES_PER_CRYSTAL {
                return Err(DenoiseError::QuotaUnreachable {
                    domain: leaf,
                    accepted,
                    quota,
                });
            }
            attempts += 1;
            // Early subjects walk the vocabulary so every concept is used.
            let s = if accepted < vocab.len() {
                accepted
            } else {
                rng.gen_range(0..vocab.len())
            };
            let o = rng.gen_range(0..vocab.len());
            if s == o {
                continue;
            }
            let r = relations.choose(&mut rng).expect("meta has relations").clone();
            let candidate = Crystal::new(vocab[s].as_str(), r, leaf.clone(), vocab[o].as_str()).with_provenance("synthetic");
            let report = library.insert(candidate, Scope::Effective)?;
            if report.is_accepted() && report.details != "duplicate" {
                accepted += 1;
            }
        }
    }
    Ok(library)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Domain,
    Relation,
    Subject,
    Object,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Domain, Field::Relation, Field::Subject, Field::Object];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub noise: f64,
    pub fields: BTreeSet<Field>,
    pub seed: u64,
}

impl CorruptionSpec {
    fn check(&self) -> Result<(), DenoiseError> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(DenoiseError::InvalidSpec(format!("noise {} not in [0,1]", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tuple {
    pub s: String,
    pub r: RelationSymbol,
    pub d: DomainPath,
    pub o: String,
}

impl From<&Crystal> for Tuple {
    fn from(c: &Crystal) -> Self {
        Tuple {
            s: c.subject.clone(),
            r: c.relation.clone(),
            d: c.domain.clone(),
            o: c.object.clone(),
        }
    }
}

/// A crystal with masked fields set to `None`; `truth` is hidden ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRecord {
    pub truth: Tuple,
    pub domain: Option<DomainPath>,
    pub relation: Option<RelationSymbol>,
    pub subject: Option<String>,
    pub object: Option<String>,
}

impl MaskedRecord {
    pub fn new(truth: Tuple, masked: &BTreeSet<Field>) -> Self {
        let keep = |f: Field| !masked.contains(&f);
        MaskedRecord {
            domain: keep(Field::Domain).then(|| truth.d.clone()),
            relation: keep(Field::Relation).then(|| truth.r.clone()),
            subject: keep(Field::Subject).then(|| truth.s.clone()),
            object: keep(Field::Object).then(|| truth.o.clone()),
            truth,
        }
    }

    pub fn is_masked(&self, f: Field) -> bool {
        match f {
            Field::Domain => self.domain.is_none(),
            Field::Relation => self.relation.is_none(),
            Field::Subject => self.subject.is_none(),
            Field::Object => self.object.is_none(),
        }
    }

    pub fn masked(&self) -> Vec<Field> {
        Field::ALL.into_iter().filter(|f| self.is_masked(*f)).collect()
    }
}

fn corrupt_tuple<R: Rng>(truth: Tuple, noise: f64, fields: &BTreeSet<Field>, rng: &mut R) -> MaskedRecord {
    let masked: BTreeSet<Field> = fields.iter().copied().filter(|_| rng.gen_bool(noise)).collect();
    MaskedRecord::new(truth, &masked)
}

/// Masks each maskable field of every crystal independently with probability
/// `noise`, in canonical crystal order.
pub fn corrupt(library: &CrystalLibrary, spec: &CorruptionSpec) -> Result<Vec<MaskedRecord>, DenoiseError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(library
        .crystals()
        .map(|c| corrupt_tuple(Tuple::from(c), spec.noise, &spec.fields, &mut rng))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Structured,
    Random,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Structured => "structured",
            Schedule::Random => "random",
        }
    }
}

/// Fields after denoising; `None` marks a field left unresolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub domain: Option<DomainPath>,
    pub relation: Option<RelationSymbol>,
    pub subject: Option<String>,
    pub object: Option<String>,
    /// Order in which masked fields were resolved.
    pub order: Vec<Field>,
}

/// Candidate names with their probabilities.
type Distribution = (Vec<String>, Vec<f64>);

/// Per-library lookups shared by all resolvers.
pub struct LabIndex<'a> {
    library: &'a CrystalLibrary,
    space: Option<&'a EmbeddingSpace>,
    concepts: BTreeMap<DomainPath, BTreeSet<String>>,
    relations: BTreeMap<DomainPath, Vec<RelationSymbol>>,
    dists: BTreeMap<(DomainPath, Option<RelationSymbol>), Distribution>,
    global: Vec<String>,
    all_relations: Vec<RelationSymbol>,
}

impl<'a> LabIndex<'a> {
    pub fn new(library: &'a CrystalLibrary, space: Option<&'a EmbeddingSpace>) -> Self {
        let all_relations: Vec<RelationSymbol> = library.meta().relations().cloned().collect();
        let mut concepts = BTreeMap::new();
        let mut relations = BTreeMap::new();
        let mut dists = BTreeMap::new();
        for d in library.lattice().domains() {
            let visible: BTreeSet<String> = effective_concepts(d, library).into_iter().map(str::to_string).collect();
            if visible.is_empty() {
                continue;
            }
            let rels: Vec<RelationSymbol> = expand_relations(d, library).into_iter().map(|(r, _)| r).collect();
            for r in std::iter::once(None).chain(all_relations.iter().cloned().map(Some)) {
                if let Ok(dist) = concept_distribution(d, r.as_ref(), library, space, 1.0) {
                    dists.insert((d.clone(), r), dist.into_iter().unzip());
                }
            }
            concepts.insert(d.clone(), visible);
            relations.insert(d.clone(), rels);
        }
        let global = library.concepts().into_iter().map(str::to_string).collect();
        Self {
            library,
            space,
            concepts,
            relations,
            dists,
            global,
            all_relations,
        }
    }

    pub fn fiber_concepts(&self, d: &DomainPath) -> Option<&BTreeSet<String>> {
        self.concepts.get(d)
    }

    /// Most-overlapping domain for the observed concepts; ties are broken
    /// uniformly at random. `None` when nothing overlaps.
    fn resolve_domain<R: Rng>(&self, observed: &[&str], rng: &mut R) -> Option<DomainPath> {
        let mut best: Vec<&DomainPath> = Vec::new();
        let mut best_n = 0;
        for (d, cs) in &self.concepts {
            let n = observed.iter().filter(|c| cs.contains(**c)).count();
            if n == 0 || n < best_n {
                continue;
            }
            if n > best_n {
                best.clear();
                best_n = n;
            }
            best.push(d);
        }
        best.choose(rng).map(|d| (*d).clone())
    }

    fn resolve_relation<R: Rng>(&self, domain: Option<&DomainPath>, rng: &mut R) -> Option<RelationSymbol> {
        let local = domain.and_then(|d| self.relations.get(d)).filter(|rs| !rs.is_empty());
        local.unwrap_or(&self.all_relations).choose(rng).cloned()
    }

    fn sample_in_fiber<R: Rng>(&self, d: &DomainPath, r: Option<&RelationSymbol>, rng: &mut R) -> Option<String> {
        let key = (d.clone(), r.cloned());
        let owned;
        let (names, probs) = match self.dists.get(&key) {
            Some(x) => x,
            None => {
                let dist = concept_distribution(d, r, self.library, self.space, 1.0).ok()?;
                owned = dist.into_iter().unzip::<_, _, Vec<String>, Vec<f64>>();
                &owned
            }
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (name, p) in names.iter().zip(probs) {
            acc += p;
            if u < acc {
                return Some(name.clone());
            }
        }
        names.last().cloned()
    }

    /// Resolves the masked fields of `record` in `order` (unmasked entries of
    /// `order` are skipped).
    pub fn resolve<R: Rng>(&self, record: &MaskedRecord, order: &[Field], schedule: Schedule, rng: &mut R) -> Reconstruction {
        let observed: Vec<&str> = [record.subject.as_deref(), record.object.as_deref()]
            .into_iter()
            .flatten()
            .collect();
        let mut out = Reconstruction {
            domain: record.domain.clone(),
            relation: record.relation.clone(),
            subject: record.subject.clone(),
            object: record.object.clone(),
            order: Vec::new(),
        };
        for &f in order.iter().filter(|f| record.is_masked(**f)) {
            out.order.push(f);
            match f {
                Field::Domain => out.domain = self.resolve_domain(&observed, rng),
                Field::Relation => out.relation = self.resolve_relation(out.domain.as_ref(), rng),
                Field::Subject | Field::Object => {
                    let value = match (&out.domain, schedule) {
                        (Some(d), _) => self.sample_in_fiber(d, out.relation.as_ref(), rng),
                        (None, Schedule::Structured) => None,
                        (None, Schedule::Random) => self.global.choose(rng).cloned(),
                    };
                    if f == Field::Subject {
                        out.subject = value;
                    } else {
                        out.object = value;
                    }
                }
            }
        }
        out
    }

    pub fn resolve_with<R: Rng>(&self, record: &MaskedRecord, schedule: Schedule, rng: &mut R) -> Reconstruction {
        let mut order = Field::ALL;
        if schedule == Schedule::Random {
            order.shuffle(rng);
        }
        self.resolve(record, &order, schedule, rng)
    }

    fn score(&self, record: &MaskedRecord, rec: &Reconstruction) -> Score {
        let t = &record.truth;
        let reference = rec.domain.as_ref().unwrap_or(&t.d);
        let fiber = self.concepts.get(reference);
        let mut score = Score {
            domain_ok: u64::from(rec.domain.as_ref() == Some(&t.d)),
            relation_ok: u64::from(rec.relation.as_ref() == Some(&t.r)),
            concept_ok: u64::from(rec.subject.as_ref() == Some(&t.s)) + u64::from(rec.object.as_ref() == Some(&t.o)),
            ..Score::default()
        };
        for (f, value) in [(Field::Subject, &rec.subject), (Field::Object, &rec.object)] {
            if let (true, Some(c)) = (record.is_masked(f), value) {
                score.resolved_concepts += 1;
                if !fiber.is_some_and(|cs| cs.contains(c)) {
                    score.leaked += 1;
                }
            }
        }
        score
    }
}

fn denoise(
    records: &[MaskedRecord],
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    seed: u64,
    schedule: Schedule,
) -> Vec<Reconstruction> {
    let index = LabIndex::new(library, space);
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            index.resolve_with(rec, schedule, &mut rng)
        })
        .collect()
}

/// Resolves each record in the fixed order domain, relation, subject, object.
pub fn denoise_structured(
    records: &[MaskedRecord],
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    seed: u64,
) -> Vec<Reconstruction> {
    denoise(records, library, space, seed, Schedule::Structured)
}

/// Resolves each record in a uniformly random field order.
pub fn denoise_random(
    records: &[MaskedRecord],
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    seed: u64,
) -> Vec<Reconstruction> {
    denoise(records, library, space, seed, Schedule::Random)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Score {
    domain_ok: u64,
    relation_ok: u64,
    concept_ok: u64,
    resolved_concepts: u64,
    leaked: u64,
}

impl std::ops::AddAssign for Score {
    fn add_assign(&mut self, o: Score) {
        self.domain_ok += o.domain_ok;
        self.relation_ok += o.relation_ok;
        self.concept_ok += o.concept_ok;
        self.resolved_concepts += o.resolved_concepts;
        self.leaked += o.leaked;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRow {
    pub noise: f64,
    pub domain_acc: f64,
    pub relation_acc: f64,
    pub concept_acc: f64,
    /// Resolved masked concepts outside the fiber of the resolved domain
    /// (the true domain when the domain stayed unresolved), over all resolved
    /// masked concepts.
    pub leakage: f64,
    pub trials: usize,
}

impl DenoiseRow {
    fn from_score(noise: f64, s: Score, trials: usize) -> Self {
        let n = trials as f64;
        DenoiseRow {
            noise,
            domain_acc: s.domain_ok as f64 / n,
            relation_acc: s.relation_ok as f64 / n,
            concept_acc: s.concept_ok as f64 / (2.0 * n),
            leakage: if s.resolved_concepts == 0 {
                0.0
            } else {
                s.leaked as f64 / s.resolved_concepts as f64
            },
            trials,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResult {
    pub schedule: Schedule,
    pub rows: Vec<DenoiseRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: Vec<f64>,
    pub trials: usize,
    pub fields: BTreeSet<Field>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            trials: 1000,
            fields: Field::ALL.into_iter().collect(),
            seed: 0,
        }
    }
}

/// Runs both schedules on identical corrupted records at every noise level.
/// A trial samples one crystal, corrupts it, and denoises it twice. Results
/// depend only on the seed, not on `exec`.
pub fn experiment(
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    config: &ExperimentConfig,
    exec: Execution,
) -> Result<[DenoiseResult; 2], DenoiseError> {
    if config.grid.is_empty() || config.trials == 0 {
        return Err(DenoiseError::InvalidSpec("grid must be non-empty and trials positive".into()));
    }
    if let Some(bad) = config.grid.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(DenoiseError::InvalidSpec(format!("noise {bad} not in [0,1]")));
    }
    let tuples: Vec<Tuple> = library.crystals().map(Tuple::from).collect();
    if tuples.is_empty() {
        return Err(DenoiseError::EmptyLibrary);
    }
    let index = LabIndex::new(library, space);
    let mut structured = Vec::new();
    let mut random = Vec::new();
    for (gi, &noise) in config.grid.iter().enumerate() {
        let scores = par::map_range(exec, config.trials, |t| {
            let trial_seed = derive_seed(config.seed, ((gi as u64) << 32) | t as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let truth = tuples[rng.gen_range(0..tuples.len())].clone();
            let record = corrupt_tuple(truth, noise, &config.fields, &mut rng);
            let mut rs = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, 1));
            let mut rr = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, 2));
            let s = index.score(&record, &index.resolve_with(&record, Schedule::Structured, &mut rs));
            let r = index.score(&record, &index.resolve_with(&record, Schedule::Random, &mut rr));
            (s, r)
        });
        let (mut s_total, mut r_total) = (Score::default(), Score::default());
        for (s, r) in scores {
            s_total += s;
            r_total += r;
        }
        structured.push(DenoiseRow::from_score(noise, s_total, config.trials));
        random.push(DenoiseRow::from_score(noise, r_total, config.trials));
    }
    Ok([
        DenoiseResult {
            schedule: Schedule::Structured,
            rows: structured,
        },
        DenoiseResult {
            schedule: Schedule::Random,
            rows: random,
        },
    ])
}

pub const CSV_HEADER: [&str; 7] = [
    "schedule",
    "ε_noise",
    "domain_acc",
    "relation_acc",
    "concept_acc",
    "leakage",
    "trials",
];

pub fn write_csv<W: Write>(results: &[DenoiseResult], writer: W) -> Result<(), DenoiseError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for res in results {
        for row in &res.rows {
            w.write_record([
                res.schedule.as_str().to_string(),
                row.noise.to_string(),
                row.domain_acc.to_string(),
                row.relation_acc.to_string(),
                row.concept_acc.to_string(),
                row.leakage.to_string(),
                row.trials.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CrystalLibrary {
        synth_corpus(&CorpusSpec {
            root: None,
            depth: 1,
            branching: 3,
            concepts_per_fiber: 10,
            crystals_per_fiber: 20,
            shared_fraction: 0.0,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn corpus_meets_quota_and_is_deterministic() {
        let lib = small();
        assert_eq!(lib.len(), 60);
        assert_eq!(lib, small());
    }

    #[test]
    fn corrupt_extremes() {
        let lib = small();
        let all: BTreeSet<Field> = Field::ALL.into_iter().collect();
        let clean = corrupt(&lib, &CorruptionSpec { noise: 0.0, fields: all.clone(), seed: 1 }).unwrap();
        assert!(clean.iter().all(|r| r.masked().is_empty()));
        let dark = corrupt(&lib, &CorruptionSpec { noise: 1.0, fields: all, seed: 1 }).unwrap();
        assert!(dark.iter().all(|r| r.masked().len() == 4));
        assert!(corrupt(&lib, &CorruptionSpec { noise: 1.5, fields: BTreeSet::new(), seed: 1 }).is_err());
    }

    #[test]
    fn unmasked_record_is_unchanged() {
        let lib = small();
        let c = lib.crystals().next().unwrap();
        let rec = MaskedRecord::new(Tuple::from(c), &BTreeSet::new());
        let out = denoise_structured(std::slice::from_ref(&rec), &lib, None, 0);
        assert_eq!(out[0].subject.as_deref(), Some(c.subject.as_str()));
        assert_eq!(out[0].domain.as_ref(), Some(&c.domain));
        assert!(out[0].order.is_empty());
    }

    #[test]
    fn csv_header_is_fixed() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "schedule,ε_noise,domain_acc,relation_acc,concept_acc,leakage,trials\n"
        );
    }
}
