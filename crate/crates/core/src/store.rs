//! Fiber-partitioned crystal library with the insertion-time validation gate.
//!
//! Every candidate goes through three checks against its validation scope
//! before it may enter a fiber: a cycle check for acyclic relations, a
//! causal-reversal check over all causal relations, and a contradiction check
//! (opposite negation, functional conflict, exclusion rule). A rejected
//! candidate leaves the library untouched.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainLattice, DomainPath};
use crate::inference::effective_fiber;
use crate::meta::{MetaConfig, MetaError, MetaFiber, RelationSymbol};
use crate::par::{self, Execution};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("domain {0} is not registered and auto-registration is disabled")]
    UnregisteredDomain(DomainPath),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{location}: {message}")]
    Format { location: String, message: String },
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    Validated,
    Provisional,
}

/// One knowledge unit `⟨subject, relation@domain, object⟩`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Crystal {
    pub subject: String,
    pub relation: RelationSymbol,
    pub domain: DomainPath,
    pub object: String,
    pub negated: bool,
    pub status: Status,
    pub provenance: String,
}

impl Crystal {
    pub fn new(
        subject: impl Into<String>,
        relation: RelationSymbol,
        domain: DomainPath,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation,
            domain,
            object: object.into(),
            negated: false,
            status: Status::Validated,
            provenance: String::new(),
        }
    }

    pub fn negated(mut self) -> Self {
        self.negated = true;
        self
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn with_status(mut self, status: Status) -> Self {
        self.status = status;
        self
    }

    /// Identity within a fiber: (relation, subject, object, negated).
    pub fn key(&self) -> CrystalKey {
        CrystalKey {
            relation: self.relation.clone(),
            subject: self.subject.clone(),
            object: self.object.clone(),
            negated: self.negated,
        }
    }

    /// Canonical ordering key: (domain, relation, subject, object, negated).
    pub fn sort_key(&self) -> (&DomainPath, &RelationSymbol, &str, &str, bool) {
        (&self.domain, &self.relation, &self.subject, &self.object, self.negated)
    }

    /// Same tuple, ignoring status and provenance.
    pub fn same_tuple(&self, other: &Crystal) -> bool {
        self.domain == other.domain && self.key() == other.key()
    }

    pub fn to_record(&self) -> CrystalRecord {
        CrystalRecord {
            s: self.subject.clone(),
            r: self.relation.clone(),
            d: self.domain.clone(),
            o: self.object.clone(),
            neg: self.negated,
            status: Some(self.status),
            prov: self.provenance.clone(),
        }
    }
}

impl fmt::Display for Crystal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("¬")?;
        }
        write!(f, "{}({}, {}, {})", self.relation, self.subject, self.object, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CrystalKey {
    pub relation: RelationSymbol,
    pub subject: String,
    pub object: String,
    pub negated: bool,
}

/// The JSONL line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrystalRecord {
    pub s: String,
    pub r: RelationSymbol,
    pub d: DomainPath,
    pub o: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub neg: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Status>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub prov: String,
}

impl From<CrystalRecord> for Crystal {
    fn from(rec: CrystalRecord) -> Self {
        Crystal {
            subject: rec.s,
            relation: rec.r,
            domain: rec.d,
            object: rec.o,
            negated: rec.neg,
            status: rec.status.unwrap_or_default(),
            provenance: rec.prov,
        }
    }
}

/// Parses a JSONL stream into crystals. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<Crystal>, StoreError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CrystalRecord = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec.into());
    }
    Ok(out)
}

pub fn write_jsonl<'a, W: Write>(
    mut writer: W,
    crystals: impl IntoIterator<Item = &'a Crystal>,
) -> std::io::Result<()> {
    for c in crystals {
        serde_json::to_writer(&mut writer, &c.to_record())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// All crystals scoped to one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fiber {
    domain: DomainPath,
    crystals: BTreeMap<CrystalKey, Crystal>,
}

impl Fiber {
    pub fn new(domain: DomainPath) -> Self {
        Self {
            domain,
            crystals: BTreeMap::new(),
        }
    }

    pub fn domain(&self) -> &DomainPath {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.crystals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crystals.is_empty()
    }

    /// Members in canonical (relation, subject, object) order.
    pub fn iter(&self) -> impl Iterator<Item = &Crystal> {
        self.crystals.values()
    }

    pub fn contains(&self, key: &CrystalKey) -> bool {
        self.crystals.contains_key(key)
    }

    /// Concept identifiers appearing as subject or object.
    pub fn concepts(&self) -> BTreeSet<&str> {
        self.iter()
            .flat_map(|c| [c.subject.as_str(), c.object.as_str()])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Validate against `F(d)` only.
    #[default]
    Local,
    /// Validate against the effective fiber (local plus inherited).
    Effective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    None,
    Cycle,
    CausalReversal,
    Contradiction,
    Schema,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::None => "none",
            RejectReason::Cycle => "cycle",
            RejectReason::CausalReversal => "causal_reversal",
            RejectReason::Contradiction => "contradiction",
            RejectReason::Schema => "schema",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainSplitSuggestion {
    pub domain: DomainPath,
    pub conflicting: (CrystalRecord, CrystalRecord),
    pub proposed_children: (DomainPath, DomainPath),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub reason: RejectReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_suggestion: Option<DomainSplitSuggestion>,
    pub details: String,
}

impl ValidationReport {
    fn accepted(details: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Accepted,
            reason: RejectReason::None,
            split_suggestion: None,
            details: details.into(),
        }
    }

    fn rejected(reason: RejectReason, details: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Rejected,
            reason,
            split_suggestion: None,
            details: details.into(),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}

/// The single persistent store: lattice, meta-fiber, and fibers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalLibrary {
    lattice: DomainLattice,
    meta: MetaFiber,
    fibers: BTreeMap<DomainPath, Fiber>,
    provisional: Vec<Crystal>,
    /// Register unknown candidate domains on acceptance.
    pub auto_register: bool,
}

impl Default for CrystalLibrary {
    fn default() -> Self {
        Self::new(MetaFiber::default())
    }
}

impl CrystalLibrary {
    pub fn new(meta: MetaFiber) -> Self {
        Self {
            lattice: DomainLattice::new(),
            meta,
            fibers: BTreeMap::new(),
            provisional: Vec::new(),
            auto_register: true,
        }
    }

    pub fn lattice(&self) -> &DomainLattice {
        &self.lattice
    }

    pub fn meta(&self) -> &MetaFiber {
        &self.meta
    }

    pub fn register_domain(&mut self, d: &DomainPath) {
        self.lattice.register(d);
    }

    /// Exact local fiber contents; empty for domains with no crystals.
    pub fn fiber(&self, d: &DomainPath) -> impl Iterator<Item = &Crystal> {
        self.fibers.get(d).into_iter().flat_map(Fiber::iter)
    }

    pub fn fiber_ref(&self, d: &DomainPath) -> Option<&Fiber> {
        self.fibers.get(d)
    }

    /// Non-empty fibers in canonical domain order.
    pub fn fibers(&self) -> impl Iterator<Item = &Fiber> {
        self.fibers.values().filter(|f| !f.is_empty())
    }

    /// Every stored crystal in canonical order.
    pub fn crystals(&self) -> impl Iterator<Item = &Crystal> {
        self.fibers.values().flat_map(Fiber::iter)
    }

    pub fn len(&self) -> usize {
        self.fibers.values().map(Fiber::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concepts across all fibers, sorted.
    pub fn concepts(&self) -> BTreeSet<&str> {
        self.crystals()
            .flat_map(|c| [c.subject.as_str(), c.object.as_str()])
            .collect()
    }

    /// Provisional crystals awaiting submission. Never part of any fiber.
    pub fn provisional(&self) -> &[Crystal] {
        &self.provisional
    }

    pub fn stage_provisional(&mut self, crystal: Crystal) {
        let crystal = crystal.with_status(Status::Provisional);
        if !self.provisional.iter().any(|c| c.same_tuple(&crystal)) {
            self.provisional.push(crystal);
        }
    }

    /// Runs the validation gate and, on acceptance, stores the candidate with
    /// status `validated`.
    pub fn insert(&mut self, candidate: Crystal, scope: Scope) -> Result<ValidationReport, StoreError> {
        let candidate = self.normalize(candidate)?;
        let report = self.check(&candidate, scope, None);
        if report.is_accepted() && report.details != "duplicate" {
            self.commit(candidate);
        }
        Ok(report)
    }

    /// Submits a staged provisional crystal through the full gate. Removed from
    /// the sidecar only when accepted.
    pub fn submit_provisional(
        &mut self,
        index: usize,
        scope: Scope,
    ) -> Result<ValidationReport, StoreError> {
        let candidate = self.provisional[index].clone();
        let report = self.insert(candidate, scope)?;
        if report.is_accepted() {
            self.provisional.remove(index);
        }
        Ok(report)
    }

    /// Validates without mutating. The library's state is never touched.
    pub fn validate(&self, candidate: &Crystal, scope: Scope) -> Result<ValidationReport, StoreError> {
        let candidate = self.normalize(candidate.clone())?;
        Ok(self.check(&candidate, scope, None))
    }

    fn normalize(&self, mut candidate: Crystal) -> Result<Crystal, StoreError> {
        if !self.meta.declares(&candidate.relation) {
            return Err(StoreError::UnknownRelation(candidate.relation.to_string()));
        }
        if !self.auto_register && !self.lattice.contains(&candidate.domain) {
            return Err(StoreError::UnregisteredDomain(candidate.domain.clone()));
        }
        if self.meta.is_symmetric(&candidate.relation) && candidate.object < candidate.subject {
            std::mem::swap(&mut candidate.subject, &mut candidate.object);
        }
        Ok(candidate)
    }

    fn commit(&mut self, mut candidate: Crystal) {
        candidate.status = Status::Validated;
        self.lattice.register(&candidate.domain);
        self.fibers
            .entry(candidate.domain.clone())
            .or_insert_with(|| Fiber::new(candidate.domain.clone()))
            .crystals
            .insert(candidate.key(), candidate);
    }

    /// Crystals the candidate is checked against, optionally leaving one out.
    fn scope_members(&self, domain: &DomainPath, scope: Scope, exclude: Option<&Crystal>) -> Vec<&Crystal> {
        let keep = |c: &&Crystal| exclude.is_none_or(|x| !x.same_tuple(c));
        match scope {
            Scope::Local => self.fiber(domain).filter(keep).collect(),
            Scope::Effective => effective_fiber(domain, self)
                .into_iter()
                .map(|s| s.crystal)
                .filter(keep)
                .collect(),
        }
    }

    fn check(&self, candidate: &Crystal, scope: Scope, exclude: Option<&Crystal>) -> ValidationReport {
        if candidate.subject.is_empty() || candidate.object.is_empty() {
            return ValidationReport::rejected(RejectReason::Schema, "subject and object must be non-empty");
        }
        let members = self.scope_members(&candidate.domain, scope, exclude);
        if exclude.is_none()
            && members
                .iter()
                .any(|c| c.domain == candidate.domain && c.key() == candidate.key())
        {
            return ValidationReport::accepted("duplicate");
        }
        let gate = Gate {
            meta: &self.meta,
            members: &members,
        };
        let rel = &candidate.relation;
        if !candidate.negated && self.meta.is_acyclic(rel) {
            let edges = gate.edges(|r| r == rel);
            if let Some(path) = find_path(&edges, &candidate.object, &candidate.subject) {
                return ValidationReport::rejected(
                    RejectReason::Cycle,
                    format!("{candidate} closes the {rel} path {}", path.join(" -> ")),
                );
            }
        }
        if !candidate.negated && self.meta.is_causal(rel) {
            let edges = gate.edges(|r| self.meta.is_causal(r));
            if let Some(path) = find_path(&edges, &candidate.object, &candidate.subject) {
                return ValidationReport::rejected(
                    RejectReason::CausalReversal,
                    format!("{candidate} reverses the causal chain {}", path.join(" -> ")),
                );
            }
        }
        if let Some((existing, why)) = gate.contradiction(candidate) {
            let mut report = ValidationReport::rejected(
                RejectReason::Contradiction,
                format!("{candidate} contradicts {existing}: {why}"),
            );
            report.split_suggestion = Some(self.split_suggestion(candidate, existing));
            return report;
        }
        ValidationReport::accepted("")
    }

    fn split_suggestion(&self, candidate: &Crystal, existing: &Crystal) -> DomainSplitSuggestion {
        let domain = candidate.domain.clone();
        let mut n = 1usize;
        let children = loop {
            let a = domain.child(&format!("Split{n}_A")).expect("generated segment is valid");
            let b = domain.child(&format!("Split{n}_B")).expect("generated segment is valid");
            if !self.lattice.contains(&a) && !self.lattice.contains(&b) {
                break (a, b);
            }
            n += 1;
        };
        DomainSplitSuggestion {
            domain,
            conflicting: (existing.to_record(), candidate.to_record()),
            proposed_children: children,
        }
    }

    /// Re-validates every stored crystal against its own scope with itself
    /// removed. A library built through [`CrystalLibrary::insert`] with local
    /// scope is a fixed point: every entry is accepted.
    pub fn revalidate(&self, scope: Scope, exec: Execution) -> Vec<(Crystal, ValidationReport)> {
        let all: Vec<&Crystal> = self.crystals().collect();
        par::map(exec, &all, |c| {
            let report = self.check(c, scope, Some(c));
            ((*c).clone(), report)
        })
    }

    /// Canonical, byte-deterministic serialization of the crystals (validated
    /// fibers followed by provisional sidecar entries).
    pub fn save_crystals(&self) -> Vec<u8> {
        let mut provisional: Vec<&Crystal> = self.provisional.iter().collect();
        provisional.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut out = Vec::new();
        write_jsonl(&mut out, self.crystals().chain(provisional)).expect("writing to memory");
        out
    }

    /// The meta-fiber document, including lattice registrations so that a
    /// reload reproduces the lattice exactly.
    pub fn save_meta(&self) -> Vec<u8> {
        let mut config = self.meta.to_config();
        config.domains = self.lattice.leaves().filter(|d| !d.is_top()).cloned().collect();
        let mut out = serde_json::to_vec_pretty(&config).expect("config serializes");
        out.push(b'\n');
        out
    }

    /// Rebuilds a library from saved crystals and meta document. Crystals are
    /// taken as already validated; run [`CrystalLibrary::revalidate`] to audit.
    pub fn load(crystals: &[u8], meta: Option<&[u8]>) -> Result<Self, StoreError> {
        let (meta, domains) = match meta {
            Some(bytes) => {
                let config: MetaConfig = serde_json::from_slice(bytes).map_err(|e| StoreError::Format {
                    location: format!("meta config line {}", e.line()),
                    message: e.to_string(),
                })?;
                (MetaFiber::from_config(&config)?, config.domains)
            }
            None => (MetaFiber::default(), Vec::new()),
        };
        let mut lib = CrystalLibrary::new(meta);
        for d in &domains {
            lib.lattice.register(d);
        }
        let records = parse_jsonl(crystals).map_err(|e| match e {
            StoreError::Parse { line, message } => StoreError::Format {
                location: format!("crystal line {line}"),
                message,
            },
            other => other,
        })?;
        for (idx, c) in records.into_iter().enumerate() {
            if !lib.meta.declares(&c.relation) {
                return Err(StoreError::Format {
                    location: format!("crystal line {}", idx + 1),
                    message: format!("undeclared relation `{}`", c.relation),
                });
            }
            if c.subject.is_empty() || c.object.is_empty() {
                return Err(StoreError::Format {
                    location: format!("crystal line {}", idx + 1),
                    message: "empty subject or object".into(),
                });
            }
            match c.status {
                Status::Provisional => lib.stage_provisional(c),
                Status::Validated => {
                    let c = lib.normalize(c)?;
                    lib.commit(c);
                }
            }
        }
        Ok(lib)
    }

    /// Applies [`CrystalLibrary::insert`] to each record in order.
    pub fn bulk_ingest(
        &mut self,
        records: impl IntoIterator<Item = Crystal>,
        scope: Scope,
    ) -> Result<IngestSummary, StoreError> {
        let mut summary = IngestSummary::default();
        for (idx, c) in records.into_iter().enumerate() {
            let report = self.insert(c.clone(), scope)?;
            if report.is_accepted() {
                summary.accepted += 1;
            } else {
                *summary.rejected.entry(report.reason).or_default() += 1;
                if let Some(s) = &report.split_suggestion {
                    summary.suggestions.push(s.clone());
                }
                summary.rejections.push(Rejection {
                    record: idx + 1,
                    crystal: c.to_record(),
                    reason: report.reason,
                    details: report.details,
                });
            }
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
    pub suggestions: Vec<DomainSplitSuggestion>,
    pub rejections: Vec<Rejection>,
}

impl IngestSummary {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// 1-based position in the input stream.
    pub record: usize,
    pub crystal: CrystalRecord,
    pub reason: RejectReason,
    pub details: String,
}

struct Gate<'a> {
    meta: &'a MetaFiber,
    members: &'a [&'a Crystal],
}

impl Gate<'_> {
    /// Positive edges (subject → object) of relations selected by `pick`.
    fn edges(&self, pick: impl Fn(&RelationSymbol) -> bool) -> BTreeMap<&str, Vec<&str>> {
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for c in self.members.iter().filter(|c| !c.negated && pick(&c.relation)) {
            adj.entry(c.subject.as_str()).or_default().push(c.object.as_str());
        }
        adj
    }

    fn holds(&self, rel: &RelationSymbol, subject: &str, object: &str, negated: bool) -> Option<&Crystal> {
        let symmetric = self.meta.is_symmetric(rel);
        self.members
            .iter()
            .find(|c| {
                c.relation == *rel
                    && c.negated == negated
                    && ((c.subject == subject && c.object == object)
                        || (symmetric && c.subject == object && c.object == subject))
            })
            .copied()
    }

    fn contradiction(&self, cand: &Crystal) -> Option<(&Crystal, &'static str)> {
        if let Some(c) = self.holds(&cand.relation, &cand.subject, &cand.object, !cand.negated) {
            return Some((c, "opposite negation of the same tuple"));
        }
        if cand.negated {
            return None;
        }
        if self.meta.is_functional(&cand.relation) {
            if let Some(c) = self.members.iter().find(|c| {
                c.relation == cand.relation && !c.negated && c.subject == cand.subject && c.object != cand.object
            }) {
                return Some((c, "functional relation already has a different object"));
            }
        }
        for rule in &self.meta.exclusions {
            if let Some(partner) = rule.partner(&cand.relation) {
                let found = self.holds(partner, &cand.subject, &cand.object, false).or_else(|| {
                    self.meta
                        .is_symmetric(&cand.relation)
                        .then(|| self.holds(partner, &cand.object, &cand.subject, false))
                        .flatten()
                });
                if let Some(c) = found {
                    return Some((c, "mutually exclusive relations"));
                }
            }
        }
        None
    }
}

/// BFS for a directed path `from → ... → to`. Returns the node sequence.
fn find_path<'a>(adj: &BTreeMap<&'a str, Vec<&'a str>>, from: &'a str, to: &'a str) -> Option<Vec<&'a str>> {
    if from == to {
        return Some(vec![from]);
    }
    let mut prev: BTreeMap<&str, &str> = BTreeMap::new();
    let mut queue = VecDeque::from([from]);
    while let Some(node) = queue.pop_front() {
        for &next in adj.get(node).map(Vec::as_slice).unwrap_or_default() {
            if next == from || prev.contains_key(next) {
                continue;
            }
            prev.insert(next, node);
            if next == to {
                let mut path = vec![to];
                let mut cur = to;
                while let Some(&p) = prev.get(cur) {
                    path.push(p);
                    cur = p;
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back(next);
        }
    }
    None
}
