//! The `@Meta@Logic` bundle: relation typing (τ), structural relation
//! properties, and exclusion axioms, loaded from a JSON config document.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::domain::DomainPath;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error("invalid relation name `{0}` (expected [a-z_]+)")]
    InvalidRelationName(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("{context} references undeclared relation `{relation}`")]
    UnknownRelationReference { relation: String, context: String },
    #[error("relation `{0}` declared more than once")]
    DuplicateRelation(String),
    #[error("invalid score for {what}: {value}")]
    InvalidScore { what: String, value: f64 },
    #[error("relation `{0}` cannot be both symmetric and acyclic")]
    ConflictingProperties(String),
    #[error("exclusion pairs relation `{0}` with itself")]
    SelfExclusion(String),
    #[error("soft score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no soft τ table present")]
    MissingSoftTable,
    #[error("malformed meta config: {0}")]
    Parse(String),
}

/// A relation predicate name such as `is_a` or `part_of`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationSymbol(String);

impl RelationSymbol {
    pub fn new(name: impl Into<String>) -> Result<Self, MetaError> {
        let name = name.into();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            return Err(MetaError::InvalidRelationName(name));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RelationSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for RelationSymbol {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for RelationSymbol {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        RelationSymbol::new(name).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tau {
    Monotone,
    Nonmonotone,
}

impl Tau {
    /// Restrictive combination: nonmonotone wins.
    pub fn restrict(self, other: Tau) -> Tau {
        if self == Tau::Nonmonotone || other == Tau::Nonmonotone {
            Tau::Nonmonotone
        } else {
            Tau::Monotone
        }
    }

    fn hard_target(self) -> f64 {
        match self {
            Tau::Monotone => 1.0,
            Tau::Nonmonotone => 0.0,
        }
    }
}

pub const DEFAULT_TAU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TauTable {
    pub global: BTreeMap<RelationSymbol, Tau>,
    pub conditioned: BTreeMap<(RelationSymbol, DomainPath), Tau>,
    pub soft: BTreeMap<RelationSymbol, f64>,
    pub threshold: f64,
}

impl Default for TauTable {
    fn default() -> Self {
        Self {
            global: BTreeMap::new(),
            conditioned: BTreeMap::new(),
            soft: BTreeMap::new(),
            threshold: DEFAULT_TAU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationProperties {
    pub acyclic: BTreeSet<RelationSymbol>,
    pub symmetric: BTreeSet<RelationSymbol>,
    pub functional: BTreeSet<RelationSymbol>,
    pub causal: BTreeSet<RelationSymbol>,
}

/// Two relations that may not both hold on the same (subject, object, domain).
/// Stored with the smaller relation first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExclusionRule {
    a: RelationSymbol,
    b: RelationSymbol,
}

impl ExclusionRule {
    pub fn new(a: RelationSymbol, b: RelationSymbol) -> Result<Self, MetaError> {
        if a == b {
            return Err(MetaError::SelfExclusion(a.0));
        }
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        Ok(Self { a, b })
    }

    pub fn pair(&self) -> (&RelationSymbol, &RelationSymbol) {
        (&self.a, &self.b)
    }

    /// The relation excluded by `r` under this rule, if `r` participates.
    pub fn partner(&self, r: &RelationSymbol) -> Option<&RelationSymbol> {
        if *r == self.a {
            Some(&self.b)
        } else if *r == self.b {
            Some(&self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaFiber {
    pub tau: TauTable,
    pub properties: RelationProperties,
    pub exclusions: BTreeSet<ExclusionRule>,
    pub lambda_tau: f64,
}

impl Default for MetaFiber {
    fn default() -> Self {
        MetaFiber::from_config(&MetaConfig::default()).expect("default meta config is valid")
    }
}

impl MetaFiber {
    pub fn relations(&self) -> impl Iterator<Item = &RelationSymbol> {
        self.tau.global.keys()
    }

    pub fn relation(&self, name: &str) -> Result<RelationSymbol, MetaError> {
        let sym = RelationSymbol::new(name)?;
        if self.tau.global.contains_key(&sym) {
            Ok(sym)
        } else {
            Err(MetaError::UnknownRelation(name.to_string()))
        }
    }

    pub fn declares(&self, r: &RelationSymbol) -> bool {
        self.tau.global.contains_key(r)
    }

    pub fn is_acyclic(&self, r: &RelationSymbol) -> bool {
        self.properties.acyclic.contains(r)
    }

    pub fn is_symmetric(&self, r: &RelationSymbol) -> bool {
        self.properties.symmetric.contains(r)
    }

    pub fn is_functional(&self, r: &RelationSymbol) -> bool {
        self.properties.functional.contains(r)
    }

    pub fn is_causal(&self, r: &RelationSymbol) -> bool {
        self.properties.causal.contains(r)
    }

    /// Effective τ for inheriting `r` from `from` into `to` (`to ⊑ from`).
    /// Consults the conditioned entries at both endpoints and the global entry;
    /// any nonmonotone classification governs.
    pub fn tau_effective(
        &self,
        r: &RelationSymbol,
        from: &DomainPath,
        to: &DomainPath,
    ) -> Result<Tau, MetaError> {
        let global = *self
            .tau
            .global
            .get(r)
            .ok_or_else(|| MetaError::UnknownRelation(r.0.clone()))?;
        let lookup = |d: &DomainPath| {
            self.tau
                .conditioned
                .get(&(r.clone(), d.clone()))
                .copied()
                .unwrap_or(global)
        };
        Ok(lookup(from).restrict(lookup(to)))
    }

    /// `λ_τ · Σ_r (soft(r) − hard(r))²` over relations with a soft score.
    pub fn tau_regularizer(&self) -> Result<f64, MetaError> {
        if self.tau.soft.is_empty() {
            return Err(MetaError::MissingSoftTable);
        }
        let sum: f64 = self
            .tau
            .soft
            .iter()
            .map(|(r, s)| {
                let hard = self.tau.global[r].hard_target();
                (s - hard).powi(2)
            })
            .sum();
        Ok(self.lambda_tau * sum)
    }

    pub fn from_config(config: &MetaConfig) -> Result<Self, MetaError> {
        let mut tau = TauTable::default();
        let mut properties = RelationProperties::default();
        for (name, entry) in &config.relations.0 {
            let sym = RelationSymbol::new(name.clone())?;
            if tau.global.insert(sym.clone(), entry.tau).is_some() {
                return Err(MetaError::DuplicateRelation(name.clone()));
            }
            if let Some(score) = entry.soft {
                if !(0.0..=1.0).contains(&score) || score.is_nan() {
                    return Err(MetaError::InvalidScore {
                        what: format!("soft τ of `{name}`"),
                        value: score,
                    });
                }
                tau.soft.insert(sym.clone(), score);
            }
            if entry.acyclic && entry.symmetric {
                return Err(MetaError::ConflictingProperties(name.clone()));
            }
            let flags = [
                (entry.acyclic, &mut properties.acyclic),
                (entry.symmetric, &mut properties.symmetric),
                (entry.functional, &mut properties.functional),
                (entry.causal, &mut properties.causal),
            ];
            for (on, set) in flags {
                if on {
                    set.insert(sym.clone());
                }
            }
        }
        let declared = |name: &str, context: &str| -> Result<RelationSymbol, MetaError> {
            let sym = RelationSymbol::new(name)?;
            if tau.global.contains_key(&sym) {
                Ok(sym)
            } else {
                Err(MetaError::UnknownRelationReference {
                    relation: name.to_string(),
                    context: context.to_string(),
                })
            }
        };
        let mut conditioned = BTreeMap::new();
        for entry in &config.conditioned {
            let sym = declared(&entry.r, &format!("conditioned entry for {}", entry.d))?;
            if conditioned.insert((sym, entry.d.clone()), entry.tau).is_some() {
                return Err(MetaError::DuplicateRelation(format!("{}@{}", entry.r, entry.d)));
            }
        }
        let mut exclusions = BTreeSet::new();
        for [a, b] in &config.exclusions {
            let a = declared(a, "exclusion")?;
            let b = declared(b, "exclusion")?;
            exclusions.insert(ExclusionRule::new(a, b)?);
        }
        if !(config.threshold > 0.0 && config.threshold < 1.0) {
            return Err(MetaError::InvalidScore {
                what: "threshold".into(),
                value: config.threshold,
            });
        }
        if config.lambda_tau < 0.0 || !config.lambda_tau.is_finite() {
            return Err(MetaError::InvalidScore {
                what: "lambda_tau".into(),
                value: config.lambda_tau,
            });
        }
        tau.conditioned = conditioned;
        tau.threshold = config.threshold;
        Ok(MetaFiber {
            tau,
            properties,
            exclusions,
            lambda_tau: config.lambda_tau,
        })
    }

    pub fn to_config(&self) -> MetaConfig {
        let relations = self
            .tau
            .global
            .iter()
            .map(|(r, tau)| {
                let entry = RelationEntry {
                    tau: *tau,
                    soft: self.tau.soft.get(r).copied(),
                    acyclic: self.is_acyclic(r),
                    symmetric: self.is_symmetric(r),
                    functional: self.is_functional(r),
                    causal: self.is_causal(r),
                };
                (r.0.clone(), entry)
            })
            .collect();
        MetaConfig {
            relations: RelationMap(relations),
            conditioned: self
                .tau
                .conditioned
                .iter()
                .map(|((r, d), tau)| ConditionedEntry {
                    r: r.0.clone(),
                    d: d.clone(),
                    tau: *tau,
                })
                .collect(),
            exclusions: self
                .exclusions
                .iter()
                .map(|e| [e.a.0.clone(), e.b.0.clone()])
                .collect(),
            lambda_tau: self.lambda_tau,
            threshold: self.tau.threshold,
            domains: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, MetaError> {
        let config: MetaConfig =
            serde_json::from_str(text).map_err(|e| MetaError::Parse(e.to_string()))?;
        MetaFiber::from_config(&config)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.to_config()).expect("config serializes");
        out.push('\n');
        out
    }
}

/// `score > threshold` ⇒ monotone.
pub fn tau_from_soft(score: f64, threshold: f64) -> Result<Tau, MetaError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(MetaError::OutOfRange(score));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetaError::OutOfRange(threshold));
    }
    Ok(if score > threshold {
        Tau::Monotone
    } else {
        Tau::Nonmonotone
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationEntry {
    pub tau: Tau,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<f64>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub acyclic: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub symmetric: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub functional: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub causal: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl RelationEntry {
    fn new(tau: Tau) -> Self {
        Self {
            tau,
            soft: None,
            acyclic: false,
            symmetric: false,
            functional: false,
            causal: false,
        }
    }
}

/// Relation declarations in document order. Duplicate keys are kept so that
/// [`MetaFiber::from_config`] can reject them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationMap(pub Vec<(String, RelationEntry)>);

impl Serialize for RelationMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_map(self.0.iter().map(|(k, v)| (k, v)))
    }
}

impl<'de> Deserialize<'de> for RelationMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RelationMap;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of relation declarations")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, RelationEntry>()? {
                    entries.push((k, v));
                }
                Ok(RelationMap(entries))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionedEntry {
    pub r: String,
    pub d: DomainPath,
    pub tau: Tau,
}

/// The on-disk meta-fiber document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub relations: RelationMap,
    #[serde(default)]
    pub conditioned: Vec<ConditionedEntry>,
    #[serde(default)]
    pub exclusions: Vec<[String; 2]>,
    #[serde(default)]
    pub lambda_tau: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Lattice registrations carried alongside the library; not part of the
    /// meta-fiber itself.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<DomainPath>,
}

fn default_threshold() -> f64 {
    DEFAULT_TAU_THRESHOLD
}

impl Default for MetaConfig {
    /// The hard τ assignments for the core predicate family.
    fn default() -> Self {
        use Tau::*;
        let mut relations = Vec::new();
        let mut add = |name: &str, tau: Tau, f: fn(&mut RelationEntry)| {
            let mut entry = RelationEntry::new(tau);
            f(&mut entry);
            relations.push((name.to_string(), entry));
        };
        add("is_a", Monotone, |e| e.acyclic = true);
        add("part_of", Monotone, |e| e.acyclic = true);
        add("requires", Monotone, |_| {});
        add("enables", Monotone, |_| {});
        add("causes", Monotone, |e| e.causal = true);
        add("contrasts_with", Nonmonotone, |e| e.symmetric = true);
        add("analogous_to", Nonmonotone, |e| e.symmetric = true);
        MetaConfig {
            relations: RelationMap(relations),
            conditioned: Vec::new(),
            exclusions: Vec::new(),
            lambda_tau: 1.0,
            threshold: DEFAULT_TAU_THRESHOLD,
            domains: Vec::new(),
        }
    }
}
