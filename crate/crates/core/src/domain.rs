//! Hierarchical domain paths and the lattice algebra over them.
//!
//! A domain is written `@Seg1@Seg2...`; the top element is the bare `@`.
//! `d1 ⊑ d2` ("d1 specializes d2") holds when `d2`'s segments are a prefix
//! of `d1`'s.
//!
//! Naming follows the knowledge-engine convention rather than textbook order
//! theory: [`DomainPath::meet`] returns the most specific common
//! *generalization* (longest common prefix) and [`DomainPath::join`] the most
//! general common *specialization*. With ⊤ drawn on top these are the
//! order-theoretic join and meet respectively.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("domain `{0}` must start with '@'")]
    MissingLeadingAt(String),
    #[error("domain `{0}` contains an empty segment")]
    EmptySegment(String),
    #[error("domain `{text}` contains illegal character {ch:?}")]
    IllegalCharacter { text: String, ch: char },
    #[error("domain {0} is not registered in the lattice")]
    Unregistered(DomainPath),
    #[error("implication {from} -> {to} has {} incomparable maximal solutions", .candidates.len())]
    AmbiguousImplication {
        from: DomainPath,
        to: DomainPath,
        candidates: Vec<DomainPath>,
    },
}

fn valid_segment_char(ch: char) -> bool {
    ch.is_ascii_alphanumeric() || ch == '_'
}

/// A hierarchical domain identifier. The empty segment list is ⊤.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DomainPath {
    segments: Vec<String>,
}

impl DomainPath {
    pub fn top() -> Self {
        Self::default()
    }

    /// Builds a path from already-split segments, validating each one.
    pub fn from_segments<I, S>(segments: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        let path = Self { segments };
        for seg in &path.segments {
            if seg.is_empty() {
                return Err(DomainError::EmptySegment(path.to_string()));
            }
            if let Some(ch) = seg.chars().find(|c| !valid_segment_char(*c)) {
                return Err(DomainError::IllegalCharacter {
                    text: path.to_string(),
                    ch,
                });
            }
        }
        Ok(path)
    }

    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let rest = text
            .strip_prefix('@')
            .ok_or_else(|| DomainError::MissingLeadingAt(text.to_string()))?;
        if rest.is_empty() {
            return Ok(Self::top());
        }
        let mut segments = Vec::new();
        for seg in rest.split('@') {
            if seg.is_empty() {
                return Err(DomainError::EmptySegment(text.to_string()));
            }
            if let Some(ch) = seg.chars().find(|c| !valid_segment_char(*c)) {
                return Err(DomainError::IllegalCharacter {
                    text: text.to_string(),
                    ch,
                });
            }
            segments.push(seg.to_string());
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    pub fn is_top(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn parent(&self) -> Option<DomainPath> {
        if self.is_top() {
            None
        } else {
            Some(self.prefix(self.depth() - 1))
        }
    }

    /// The first `len` segments as a path.
    pub fn prefix(&self, len: usize) -> DomainPath {
        DomainPath {
            segments: self.segments[..len.min(self.depth())].to_vec(),
        }
    }

    /// Extends the path by one segment. The segment must be a valid token.
    pub fn child(&self, segment: &str) -> Result<DomainPath, DomainError> {
        let mut segments = self.segments.clone();
        segments.push(segment.to_string());
        DomainPath::from_segments(segments)
    }

    /// Strict ancestors, nearest first, ending at ⊤.
    pub fn ancestors(&self) -> impl Iterator<Item = DomainPath> + '_ {
        (0..self.depth()).rev().map(move |len| self.prefix(len))
    }

    /// `self ⊑ other`: `other` is a prefix of `self`.
    pub fn specializes(&self, other: &DomainPath) -> bool {
        other.depth() <= self.depth() && self.segments[..other.depth()] == other.segments[..]
    }

    pub fn strictly_specializes(&self, other: &DomainPath) -> bool {
        self.depth() > other.depth() && self.specializes(other)
    }

    pub fn comparable(&self, other: &DomainPath) -> bool {
        self.specializes(other) || other.specializes(self)
    }

    /// Longest common prefix: the most specific common generalization.
    pub fn meet(&self, other: &DomainPath) -> DomainPath {
        let shared = self
            .segments
            .iter()
            .zip(&other.segments)
            .take_while(|(a, b)| a == b)
            .count();
        self.prefix(shared)
    }

    /// The deeper of two comparable paths; `None` when incomparable.
    pub fn join(&self, other: &DomainPath) -> Option<DomainPath> {
        if self.specializes(other) {
            Some(self.clone())
        } else if other.specializes(self) {
            Some(other.clone())
        } else {
            None
        }
    }
}

impl fmt::Display for DomainPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.segments.is_empty() {
            return f.write_str("@");
        }
        for seg in &self.segments {
            write!(f, "@{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for DomainPath {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainPath::parse(s)
    }
}

impl Serialize for DomainPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DomainPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        DomainPath::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// The registry of known domains, closed under prefixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainLattice {
    known: BTreeSet<DomainPath>,
    children: BTreeMap<DomainPath, BTreeSet<DomainPath>>,
}

impl Default for DomainLattice {
    fn default() -> Self {
        let mut known = BTreeSet::new();
        known.insert(DomainPath::top());
        let mut children = BTreeMap::new();
        children.insert(DomainPath::top(), BTreeSet::new());
        Self { known, children }
    }
}

impl DomainLattice {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `d` and every prefix of it. Idempotent.
    pub fn register(&mut self, d: &DomainPath) {
        for len in 1..=d.depth() {
            let path = d.prefix(len);
            if self.known.insert(path.clone()) {
                self.children.entry(path.clone()).or_default();
                let parent = d.prefix(len - 1);
                self.children.entry(parent).or_default().insert(path);
            }
        }
    }

    pub fn contains(&self, d: &DomainPath) -> bool {
        self.known.contains(d)
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    /// All registered domains in canonical order (⊤ first).
    pub fn domains(&self) -> impl Iterator<Item = &DomainPath> {
        self.known.iter()
    }

    pub fn children(&self, d: &DomainPath) -> impl Iterator<Item = &DomainPath> {
        self.children.get(d).into_iter().flatten()
    }

    pub fn is_leaf(&self, d: &DomainPath) -> bool {
        self.children.get(d).is_none_or(|c| c.is_empty())
    }

    pub fn leaves(&self) -> impl Iterator<Item = &DomainPath> {
        self.known.iter().filter(|d| self.is_leaf(d))
    }

    /// Registered strict descendants of `d`.
    pub fn descendants<'a>(&'a self, d: &'a DomainPath) -> impl Iterator<Item = &'a DomainPath> {
        self.known.iter().filter(move |x| x.strictly_specializes(d))
    }

    pub fn max_depth(&self) -> usize {
        self.known.iter().map(DomainPath::depth).max().unwrap_or(0)
    }

    pub fn max_branching(&self) -> usize {
        self.children.values().map(BTreeSet::len).max().unwrap_or(0)
    }

    /// Heyting-style implication relative to the registered lattice: the
    /// ⊑-greatest registered `x` with `x.meet(from) ⊑ to`.
    ///
    /// Closed form of [`DomainLattice::implication_exhaustive`].
    pub fn implication(
        &self,
        from: &DomainPath,
        to: &DomainPath,
    ) -> Result<Option<DomainPath>, DomainError> {
        self.require(from)?;
        self.require(to)?;
        if to.is_top() {
            Ok(Some(DomainPath::top()))
        } else if from.specializes(to) {
            Ok(Some(to.clone()))
        } else {
            Ok(None)
        }
    }

    /// Brute-force implication: scans every registered domain.
    pub fn implication_exhaustive(
        &self,
        from: &DomainPath,
        to: &DomainPath,
    ) -> Result<Option<DomainPath>, DomainError> {
        self.require(from)?;
        self.require(to)?;
        let qualifying: Vec<&DomainPath> = self
            .known
            .iter()
            .filter(|x| x.meet(from).specializes(to))
            .collect();
        let maximal: Vec<DomainPath> = qualifying
            .iter()
            .filter(|x| !qualifying.iter().any(|y| x.strictly_specializes(y)))
            .map(|x| (*x).clone())
            .collect();
        match maximal.len() {
            0 => Ok(None),
            1 => Ok(maximal.into_iter().next()),
            _ => Err(DomainError::AmbiguousImplication {
                from: from.clone(),
                to: to.clone(),
                candidates: maximal,
            }),
        }
    }

    fn require(&self, d: &DomainPath) -> Result<(), DomainError> {
        if self.contains(d) {
            Ok(())
        } else {
            Err(DomainError::Unregistered(d.clone()))
        }
    }
}

impl<'a> FromIterator<&'a DomainPath> for DomainLattice {
    fn from_iter<T: IntoIterator<Item = &'a DomainPath>>(iter: T) -> Self {
        let mut lattice = DomainLattice::new();
        for d in iter {
            lattice.register(d);
        }
        lattice
    }
}
