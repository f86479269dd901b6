//! τ-typed inheritance, domain-scoped queries and multi-perspective answers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DomainPath;
use crate::embeddings::EmbeddingSpace;
use crate::meta::{RelationSymbol, Tau};
use crate::store::{Crystal, CrystalKey, CrystalLibrary, CrystalRecord};

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("domain {0} has no embedding")]
    MissingEmbedding(DomainPath),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Local,
    Inherited(DomainPath),
}

impl Serialize for Origin {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Origin::Local => serializer.serialize_str("local"),
            Origin::Inherited(d) => serializer.collect_str(d),
        }
    }
}

/// A crystal as seen from some domain: stored locally or inherited.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopedCrystal<'a> {
    pub crystal: &'a Crystal,
    pub origin: Origin,
}

/// `F(d)` plus every crystal in a strict ancestor whose relation inherits
/// monotonically into `d`. Local crystals shadow identical inherited ones; an
/// inherited tuple present at several ancestors is reported from the nearest.
pub fn effective_fiber<'a>(d: &DomainPath, library: &'a CrystalLibrary) -> Vec<ScopedCrystal<'a>> {
    let meta = library.meta();
    let mut seen: BTreeSet<CrystalKey> = BTreeSet::new();
    let mut out = Vec::new();
    for c in library.fiber(d) {
        seen.insert(c.key());
        out.push(ScopedCrystal {
            crystal: c,
            origin: Origin::Local,
        });
    }
    for ancestor in d.ancestors() {
        for c in library.fiber(&ancestor) {
            let inherits = matches!(meta.tau_effective(&c.relation, &ancestor, d), Ok(Tau::Monotone));
            if inherits && seen.insert(c.key()) {
                out.push(ScopedCrystal {
                    crystal: c,
                    origin: Origin::Inherited(ancestor.clone()),
                });
            }
        }
    }
    out
}

/// Concepts (subjects and objects) of the effective fiber, sorted.
pub fn effective_concepts<'a>(d: &DomainPath, library: &'a CrystalLibrary) -> BTreeSet<&'a str> {
    effective_fiber(d, library)
        .into_iter()
        .flat_map(|s| [s.crystal.subject.as_str(), s.crystal.object.as_str()])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueryPattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<RelationSymbol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default = "default_true")]
    pub include_inherited: bool,
}

fn default_true() -> bool {
    true
}

impl QueryPattern {
    pub fn new(subject: Option<&str>, relation: Option<RelationSymbol>, object: Option<&str>) -> Self {
        Self {
            subject: subject.map(str::to_string),
            relation,
            object: object.map(str::to_string),
            include_inherited: true,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.subject.is_some() || self.relation.is_some() || self.object.is_some()
    }

    fn matches(&self, c: &Crystal, symmetric: bool) -> bool {
        if self.relation.as_ref().is_some_and(|r| *r != c.relation) {
            return false;
        }
        let fits = |s: &str, o: &str| {
            self.subject.as_deref().is_none_or(|x| x == s) && self.object.as_deref().is_none_or(|x| x == o)
        };
        fits(&c.subject, &c.object) || (symmetric && fits(&c.object, &c.subject))
    }
}

/// Crystals visible from `d` matching every present field, in canonical order.
pub fn query<'a>(pattern: &QueryPattern, d: &DomainPath, library: &'a CrystalLibrary) -> Vec<ScopedCrystal<'a>> {
    let meta = library.meta();
    let mut hits: Vec<ScopedCrystal<'a>> = if pattern.include_inherited {
        effective_fiber(d, library)
    } else {
        library
            .fiber(d)
            .map(|c| ScopedCrystal {
                crystal: c,
                origin: Origin::Local,
            })
            .collect()
    };
    hits.retain(|s| pattern.matches(s.crystal, meta.is_symmetric(&s.crystal.relation)));
    hits.sort_by(|a, b| {
        (&a.crystal.relation, &a.crystal.subject, &a.crystal.object, a.crystal.negated, &a.origin).cmp(&(
            &b.crystal.relation,
            &b.crystal.subject,
            &b.crystal.object,
            b.crystal.negated,
            &b.origin,
        ))
    });
    hits
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnswerRecord {
    #[serde(flatten)]
    pub crystal: CrystalRecord,
    pub origin: Origin,
}

impl From<&ScopedCrystal<'_>> for AnswerRecord {
    fn from(s: &ScopedCrystal<'_>) -> Self {
        AnswerRecord {
            crystal: s.crystal.to_record(),
            origin: s.origin.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerspectiveAnswer {
    pub domain: DomainPath,
    pub weight: f64,
    pub answers: Vec<AnswerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiPerspectiveResponse {
    pub query: QueryPattern,
    pub perspectives: Vec<PerspectiveAnswer>,
}

/// One independently computed answer per domain with weight above `epsilon`,
/// ordered by weight (descending) then domain.
pub fn multi_perspective_query(
    pattern: &QueryPattern,
    library: &CrystalLibrary,
    activations: &BTreeMap<DomainPath, f64>,
    epsilon: f64,
) -> MultiPerspectiveResponse {
    let mut active: Vec<(&DomainPath, f64)> = activations
        .iter()
        .filter(|(_, w)| **w > epsilon)
        .map(|(d, w)| (d, *w))
        .collect();
    active.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let perspectives = active
        .into_iter()
        .map(|(d, weight)| PerspectiveAnswer {
            domain: d.clone(),
            weight,
            answers: query(pattern, d, library).iter().map(AnswerRecord::from).collect(),
        })
        .collect();
    MultiPerspectiveResponse {
        query: pattern.clone(),
        perspectives,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bridge {
    pub a: DomainPath,
    pub b: DomainPath,
    pub similarity: f64,
}

/// Lattice-incomparable domain pairs whose embeddings are close:
/// `1 / (1 + dist) > theta`, sorted by similarity (descending).
pub fn bridge_candidates(
    library: &CrystalLibrary,
    space: &EmbeddingSpace,
    theta: f64,
) -> Result<Vec<Bridge>, InferenceError> {
    let domains: Vec<(&DomainPath, &[f64])> = library
        .lattice()
        .domains()
        .map(|d| {
            space
                .domain_vector(d)
                .map(|v| (d, v))
                .ok_or_else(|| InferenceError::MissingEmbedding(d.clone()))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, (a, va)) in domains.iter().enumerate() {
        for (b, vb) in &domains[i + 1..] {
            if a.comparable(b) {
                continue;
            }
            let dist = space.distance(va, vb).unwrap_or(f64::INFINITY);
            let similarity = 1.0 / (1.0 + dist);
            if similarity > theta {
                out.push(Bridge {
                    a: (*a).clone(),
                    b: (*b).clone(),
                    similarity,
                });
            }
        }
    }
    out.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then_with(|| (&x.a, &x.b).cmp(&(&y.a, &y.b)))
    });
    Ok(out)
}
