//! Three-phase constrained generation: domain activation, τ-masked relation
//! expansion, then fiber-local concept generation.
//!
//! In closed-vocabulary mode the concept support is exactly the effective
//! fiber of the active domain, so out-of-fiber output cannot occur. Open mode
//! may add one provisional novel concept per (domain, relation) pair, drawn
//! from a character-trigram model of the fiber's concept names.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainLattice, DomainPath};
use crate::embeddings::{concept_scores, dot, softmax, EmbedError, EmbeddingSpace};
use crate::inference::{effective_concepts, effective_fiber};
use crate::meta::{RelationSymbol, Tau};
use crate::par::{derive_seed, stable_hash};
use crate::store::{Crystal, CrystalLibrary, CrystalRecord, Scope, Status, StoreError, ValidationReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("query has no concepts")]
    NoQueryConcepts,
    #[error("missing embedding: {0}")]
    MissingEmbedding(String),
    #[error("effective fiber of {0} has no concepts")]
    EmptyFiber(DomainPath),
    #[error("cannot fit a trigram model to the concept names of {0}")]
    DegenerateModel(DomainPath),
    #[error("trigram model of {0} produced no unseen name")]
    VocabularyExhausted(DomainPath),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vocabulary {
    #[default]
    Closed,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    #[default]
    Crystal,
    MultiPerspective,
    Verbalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSource {
    Embedding,
    #[default]
    Overlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub epsilon: f64,
    pub theta_novel: f64,
    pub vocabulary: Vocabulary,
    pub output_mode: OutputMode,
    pub max_concepts_per_pair: usize,
    pub seed: u64,
    pub activation_source: ActivationSource,
    /// Softmax temperature of the concept scorer.
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            theta_novel: 0.15,
            vocabulary: Vocabulary::Closed,
            output_mode: OutputMode::Crystal,
            max_concepts_per_pair: 3,
            seed: 0,
            activation_source: ActivationSource::Overlap,
            temperature: 1.0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(DecodeError::InvalidConfig(format!("epsilon {} not in [0,1)", self.epsilon)));
        }
        if !(self.theta_novel > 0.0 && self.theta_novel <= 1.0) {
            return Err(DecodeError::InvalidConfig(format!(
                "theta_novel {} not in (0,1]",
                self.theta_novel
            )));
        }
        if self.max_concepts_per_pair == 0 {
            return Err(DecodeError::InvalidConfig("max_concepts_per_pair must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodeError::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Domain weights above `epsilon`.
///
/// Embedding source: softmax over all registered domains of
/// `dot(e_d, h_q)/√dim`. Overlap source: `|q ∩ concepts(effective_fiber(d))|`
/// normalized over all domains; empty when no domain overlaps the query.
pub fn activate_domains<S: AsRef<str>>(
    query: &[S],
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    config: &GenerationConfig,
) -> Result<BTreeMap<DomainPath, f64>, DecodeError> {
    if query.is_empty() {
        return Err(DecodeError::NoQueryConcepts);
    }
    let weights: Vec<(DomainPath, f64)> = match config.activation_source {
        ActivationSource::Embedding => {
            let space = space.ok_or_else(|| DecodeError::MissingEmbedding("no embedding space".into()))?;
            let h_q = space.query_vector(query);
            let scale = (space.dim as f64).sqrt();
            let domains: Vec<&DomainPath> = library.lattice().domains().collect();
            let logits = domains
                .iter()
                .map(|d| {
                    space
                        .domain_vector(d)
                        .map(|e| dot(e, &h_q) / scale)
                        .ok_or_else(|| DecodeError::MissingEmbedding(d.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            domains.into_iter().cloned().zip(softmax(&logits)).collect()
        }
        ActivationSource::Overlap => {
            let wanted: BTreeSet<&str> = query.iter().map(AsRef::as_ref).collect();
            let counts: Vec<(DomainPath, usize)> = library
                .lattice()
                .domains()
                .map(|d| {
                    let n = effective_concepts(d, library).intersection(&wanted).count();
                    (d.clone(), n)
                })
                .filter(|(_, n)| *n > 0)
                .collect();
            let total: usize = counts.iter().map(|(_, n)| n).sum();
            counts
                .into_iter()
                .map(|(d, n)| (d, n as f64 / total as f64))
                .collect()
        }
    };
    Ok(weights.into_iter().filter(|(_, w)| *w > config.epsilon).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteResult {
    /// Best-scoring domains encountered, in rank order.
    pub domains: Vec<(DomainPath, f64)>,
    /// Number of domains scored during the descent.
    pub visited: usize,
}

fn rank(a: &(DomainPath, f64), b: &(DomainPath, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| b.0.depth().cmp(&a.0.depth()))
        .then_with(|| a.0.cmp(&b.0))
}

/// Beam descent from ⊤ keeping the `k` best children per level.
pub fn route_by_score<F, E>(lattice: &DomainLattice, k: usize, mut score: F) -> Result<RouteResult, E>
where
    F: FnMut(&DomainPath) -> Result<f64, E>,
{
    let k = k.max(1);
    let mut frontier = vec![DomainPath::top()];
    let mut seen: Vec<(DomainPath, f64)> = Vec::new();
    let mut visited = 0;
    loop {
        let mut level = Vec::new();
        for parent in &frontier {
            for child in lattice.children(parent) {
                level.push((child.clone(), score(child)?));
            }
        }
        if level.is_empty() {
            break;
        }
        visited += level.len();
        level.sort_by(rank);
        seen.extend(level.iter().cloned());
        frontier = level.into_iter().take(k).map(|(d, _)| d).collect();
    }
    seen.sort_by(rank);
    seen.truncate(k);
    Ok(RouteResult { domains: seen, visited })
}

/// [`route_by_score`] with scores `dot(e_child, h_q)`.
pub fn hierarchical_route<S: AsRef<str>>(
    query: &[S],
    library: &CrystalLibrary,
    space: &EmbeddingSpace,
    k: usize,
) -> Result<RouteResult, DecodeError> {
    let h_q = space.query_vector(query);
    route_by_score(library.lattice(), k, |d| {
        space
            .domain_vector(d)
            .map(|e| dot(e, &h_q))
            .ok_or_else(|| DecodeError::MissingEmbedding(d.to_string()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationOrigin {
    Native,
    Inherited,
}

/// Relations usable at `d`: those on local crystals (native), plus those on
/// ancestor crystals that inherit monotonically into `d`. Sorted by relation.
pub fn expand_relations(d: &DomainPath, library: &CrystalLibrary) -> Vec<(RelationSymbol, RelationOrigin)> {
    let mut out: BTreeMap<RelationSymbol, RelationOrigin> = library
        .fiber(d)
        .map(|c| (c.relation.clone(), RelationOrigin::Native))
        .collect();
    let meta = library.meta();
    for ancestor in d.ancestors() {
        for c in library.fiber(&ancestor) {
            if out.contains_key(&c.relation) {
                continue;
            }
            if let Ok(Tau::Monotone) = meta.tau_effective(&c.relation, &ancestor, d) {
                out.insert(c.relation.clone(), RelationOrigin::Inherited);
            }
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationContext {
    pub domain: DomainPath,
    pub relation: RelationSymbol,
    /// Best closed-vocabulary probability that fell below `theta_novel`.
    pub trigger: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCandidate {
    pub concept: String,
    pub probability: f64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<GenerationContext>,
}

/// Distribution over the effective-fiber concepts of `d`, in concept order.
///
/// Uses [`concept_scores`] when `space` carries vectors for `r`. Otherwise
/// scores by usage: logit `ln(1 + n)` where `n` counts visible `r`-crystals
/// with the concept as object (either side for symmetric relations).
/// Without a relation the distribution is uniform.
pub fn concept_distribution(
    d: &DomainPath,
    r: Option<&RelationSymbol>,
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    temperature: f64,
) -> Result<Vec<(String, f64)>, DecodeError> {
    if let (Some(r), Some(space)) = (r, space) {
        if space.relations.contains_key(r) && space.interactions.contains_key(r) {
            return Ok(concept_scores(d, r, library, space, temperature)?);
        }
    }
    let fiber = effective_fiber(d, library);
    let concepts: BTreeSet<&str> = fiber
        .iter()
        .flat_map(|s| [s.crystal.subject.as_str(), s.crystal.object.as_str()])
        .collect();
    if concepts.is_empty() {
        return Err(DecodeError::EmptyFiber(d.clone()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    if let Some(r) = r {
        let symmetric = library.meta().is_symmetric(r);
        for s in fiber.iter().filter(|s| s.crystal.relation == *r && !s.crystal.negated) {
            *counts.entry(s.crystal.object.as_str()).or_default() += 1;
            if symmetric {
                *counts.entry(s.crystal.subject.as_str()).or_default() += 1;
            }
        }
    }
    let logits: Vec<f64> = concepts
        .iter()
        .map(|c| (counts.get(c).copied().unwrap_or(0) as f64).ln_1p() / temperature)
        .collect();
    Ok(concepts.into_iter().map(str::to_string).zip(softmax(&logits)).collect())
}

fn pair_seed(seed: u64, d: &DomainPath, r: &RelationSymbol) -> u64 {
    derive_seed(seed, stable_hash(format!("{d}\u{0}{r}").as_bytes()))
}

/// Ranked concepts for `(d, r)`. Closed mode returns the top
/// `max_concepts_per_pair` (ties broken lexicographically), all validated.
/// Open mode additionally emits one provisional novel concept when the best
/// probability is below `theta_novel`.
pub fn generate_concepts(
    d: &DomainPath,
    r: &RelationSymbol,
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    config: &GenerationConfig,
) -> Result<Vec<ConceptCandidate>, DecodeError> {
    let dist = match concept_distribution(d, Some(r), library, space, config.temperature) {
        Ok(dist) => dist,
        Err(DecodeError::EmptyFiber(_)) if config.vocabulary == Vocabulary::Open => Vec::new(),
        Err(e) => return Err(e),
    };
    let mut ranked = dist;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let best = ranked.first().map_or(0.0, |(_, p)| *p);
    let mut out: Vec<ConceptCandidate> = ranked
        .into_iter()
        .take(config.max_concepts_per_pair)
        .map(|(concept, probability)| ConceptCandidate {
            concept,
            probability,
            status: Status::Validated,
            context: None,
        })
        .collect();
    if config.vocabulary == Vocabulary::Open && best < config.theta_novel {
        match open_vocab_fallback(d, r, library, config, best) {
            Ok((name, context)) => out.push(ConceptCandidate {
                concept: name,
                probability: 0.0,
                status: Status::Provisional,
                context: Some(context),
            }),
            // every name the model can spell is already known
            Err(DecodeError::VocabularyExhausted(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

const BOUNDARY_START: char = '^';
const BOUNDARY_END: char = '$';
const MAX_ATTEMPTS: usize = 256;

/// Character-trigram model over a set of names, with `^^` start padding and
/// `$` as terminator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrigramModel {
    transitions: BTreeMap<(char, char), BTreeMap<char, u32>>,
    max_len: usize,
}

impl TrigramModel {
    pub fn fit<S: AsRef<str>>(names: &[S]) -> Self {
        let mut transitions: BTreeMap<(char, char), BTreeMap<char, u32>> = BTreeMap::new();
        let mut max_len = 0;
        for name in names {
            let chars: Vec<char> = [BOUNDARY_START, BOUNDARY_START]
                .into_iter()
                .chain(name.as_ref().chars())
                .chain([BOUNDARY_END])
                .collect();
            max_len = max_len.max(chars.len());
            for w in chars.windows(3) {
                *transitions.entry((w[0], w[1])).or_default().entry(w[2]).or_default() += 1;
            }
        }
        Self {
            transitions,
            max_len: 2 * max_len,
        }
    }

    /// `true` if every transition of `name` was seen during fitting.
    pub fn supports(&self, name: &str) -> bool {
        let chars: Vec<char> = [BOUNDARY_START, BOUNDARY_START]
            .into_iter()
            .chain(name.chars())
            .chain([BOUNDARY_END])
            .collect();
        chars
            .windows(3)
            .all(|w| self.transitions.get(&(w[0], w[1])).is_some_and(|n| n.contains_key(&w[2])))
    }

    /// One name, or `None` if the walk exceeds the length cap.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Option<String> {
        let mut ctx = (BOUNDARY_START, BOUNDARY_START);
        let mut out = String::new();
        for _ in 0..self.max_len {
            let next = self.transitions.get(&ctx)?;
            let (chars, weights): (Vec<char>, Vec<u32>) = next.iter().map(|(c, n)| (*c, *n)).unzip();
            let pick = chars[WeightedIndex::new(&weights).ok()?.sample(rng)];
            if pick == BOUNDARY_END {
                return Some(out);
            }
            out.push(pick);
            ctx = (ctx.1, pick);
        }
        None
    }
}

/// Samples a concept name not already in the effective fiber of `d` from a
/// trigram model of that fiber's names. The result is never inserted.
pub fn open_vocab_fallback(
    d: &DomainPath,
    r: &RelationSymbol,
    library: &CrystalLibrary,
    config: &GenerationConfig,
    trigger: f64,
) -> Result<(String, GenerationContext), DecodeError> {
    let names: Vec<&str> = effective_concepts(d, library).into_iter().collect();
    if names.len() < 2 {
        return Err(DecodeError::DegenerateModel(d.clone()));
    }
    let model = TrigramModel::fit(&names);
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(config.seed, d, r));
    for _ in 0..MAX_ATTEMPTS {
        if let Some(name) = model.sample(&mut rng) {
            if !name.is_empty() && names.binary_search(&name.as_str()).is_err() {
                let context = GenerationContext {
                    domain: d.clone(),
                    relation: r.clone(),
                    trigger,
                };
                return Ok((name, context));
            }
        }
    }
    Err(DecodeError::VocabularyExhausted(d.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationGeneration {
    pub relation: RelationSymbol,
    pub origin: RelationOrigin,
    pub concepts: Vec<ConceptCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub domain: DomainPath,
    pub weight: f64,
    /// Query concept used as the subject of generated tuples.
    pub subject: String,
    pub relations: Vec<RelationGeneration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTuple {
    pub s: String,
    pub r: RelationSymbol,
    pub d: DomainPath,
    pub o: String,
    pub p: f64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offender {
    pub domain: DomainPath,
    pub relation: RelationSymbol,
    pub concept: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    /// Validated concepts emitted.
    pub total_concepts: usize,
    pub out_of_fiber: usize,
    pub leakage_rate: f64,
    pub provisional_count: usize,
    pub offenders: Vec<Offender>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedOutput {
    pub query: Vec<String>,
    pub mode: OutputMode,
    pub entries: Vec<DomainEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tuples: Vec<GeneratedTuple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered: Option<String>,
    pub audit: LeakageAudit,
}

impl GeneratedOutput {
    /// Every generated tuple, labeled with its domain, in entry order.
    pub fn all_tuples(&self) -> Vec<GeneratedTuple> {
        let mut out = Vec::new();
        for e in &self.entries {
            for rg in &e.relations {
                for c in &rg.concepts {
                    out.push(GeneratedTuple {
                        s: e.subject.clone(),
                        r: rg.relation.clone(),
                        d: e.domain.clone(),
                        o: c.concept.clone(),
                        p: c.probability,
                        status: c.status,
                    });
                }
            }
        }
        out
    }
}

pub fn gloss(r: &RelationSymbol) -> String {
    match r.as_str() {
        "is_a" => "is a".into(),
        "part_of" => "is part of".into(),
        "contrasts_with" => "contrasts with".into(),
        "analogous_to" => "is analogous to".into(),
        other => other.replace('_', " "),
    }
}

pub fn verbalize(tuples: &[GeneratedTuple]) -> String {
    tuples
        .iter()
        .map(|t| format!("In {}: {} {} {}.\n", t.d, t.s, gloss(&t.r), t.o))
        .collect()
}

/// Full pipeline: activation, relation expansion and concept generation for
/// every domain above `epsilon`, with a leakage audit attached.
pub fn generate<S: AsRef<str>>(
    query: &[S],
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    config: &GenerationConfig,
) -> Result<GeneratedOutput, DecodeError> {
    config.validate()?;
    let activations = activate_domains(query, library, space, config)?;
    generate_from_activations(query, &activations, library, space, config)
}

/// Generation over a given activation map: one entry per domain whose weight
/// exceeds `epsilon`, ordered by weight (descending) then domain.
pub fn generate_from_activations<S: AsRef<str>>(
    query: &[S],
    activations: &BTreeMap<DomainPath, f64>,
    library: &CrystalLibrary,
    space: Option<&EmbeddingSpace>,
    config: &GenerationConfig,
) -> Result<GeneratedOutput, DecodeError> {
    config.validate()?;
    if query.is_empty() {
        return Err(DecodeError::NoQueryConcepts);
    }
    let query: Vec<String> = query.iter().map(|q| q.as_ref().to_string()).collect();
    let mut active: Vec<(DomainPath, f64)> = activations
        .iter()
        .filter(|(_, w)| **w > config.epsilon)
        .map(|(d, w)| (d.clone(), *w))
        .collect();
    active.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut entries = Vec::with_capacity(active.len());
    for (domain, weight) in active {
        let visible = effective_concepts(&domain, library);
        let subject = query
            .iter()
            .find(|q| visible.contains(q.as_str()))
            .unwrap_or(&query[0])
            .clone();
        let mut relations = Vec::new();
        for (relation, origin) in expand_relations(&domain, library) {
            let concepts = generate_concepts(&domain, &relation, library, space, config)?;
            relations.push(RelationGeneration {
                relation,
                origin,
                concepts,
            });
        }
        entries.push(DomainEntry {
            domain,
            weight,
            subject,
            relations,
        });
    }
    let mut output = GeneratedOutput {
        query,
        mode: config.output_mode,
        entries,
        tuples: Vec::new(),
        rendered: None,
        audit: LeakageAudit {
            total_concepts: 0,
            out_of_fiber: 0,
            leakage_rate: 0.0,
            provisional_count: 0,
            offenders: Vec::new(),
        },
    };
    match config.output_mode {
        OutputMode::Crystal => output.tuples = output.all_tuples(),
        OutputMode::Verbalized => output.rendered = Some(verbalize(&output.all_tuples())),
        OutputMode::MultiPerspective => {}
    }
    output.audit = leakage_audit(&output, library);
    Ok(output)
}

/// Counts validated concepts that are not in their entry's effective fiber.
/// Provisional concepts are tallied separately.
pub fn leakage_audit(output: &GeneratedOutput, library: &CrystalLibrary) -> LeakageAudit {
    let mut total = 0;
    let mut provisional = 0;
    let mut offenders = Vec::new();
    for entry in &output.entries {
        let visible = effective_concepts(&entry.domain, library);
        for rg in &entry.relations {
            for c in &rg.concepts {
                match c.status {
                    Status::Provisional => provisional += 1,
                    Status::Validated => {
                        total += 1;
                        if !visible.contains(c.concept.as_str()) {
                            offenders.push(Offender {
                                domain: entry.domain.clone(),
                                relation: rg.relation.clone(),
                                concept: c.concept.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    let out_of_fiber = offenders.len();
    LeakageAudit {
        total_concepts: total,
        out_of_fiber,
        leakage_rate: if total == 0 { 0.0 } else { out_of_fiber as f64 / total as f64 },
        provisional_count: provisional,
        offenders,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Submission {
    pub crystal: CrystalRecord,
    pub context: GenerationContext,
    pub report: ValidationReport,
    /// Set when the proposed domain was unregistered and the crystal was
    /// re-scoped to its nearest registered ancestor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn nearest_registered(lattice: &DomainLattice, d: &DomainPath) -> DomainPath {
    std::iter::once(d.clone())
        .chain(d.ancestors())
        .find(|x| lattice.contains(x))
        .unwrap_or_else(DomainPath::top)
}

/// Stages every provisional concept of `output` as a provisional crystal
/// `⟨subject, relation@domain, concept⟩` and submits it through the full
/// validation gate. Accepted crystals enter their fiber as validated;
/// rejected ones stay in the provisional sidecar.
pub fn submit_provisional(
    output: &GeneratedOutput,
    library: &mut CrystalLibrary,
    scope: Scope,
) -> Result<Vec<Submission>, StoreError> {
    let mut out = Vec::new();
    for entry in &output.entries {
        for rg in &entry.relations {
            for c in rg.concepts.iter().filter(|c| c.status == Status::Provisional) {
                let context = c.context.clone().unwrap_or_else(|| GenerationContext {
                    domain: entry.domain.clone(),
                    relation: rg.relation.clone(),
                    trigger: 0.0,
                });
                let target = nearest_registered(library.lattice(), &context.domain);
                let warning = (target != context.domain).then(|| {
                    format!("novel domain {} re-scoped to {}", context.domain, target)
                });
                let crystal = Crystal::new(entry.subject.as_str(), rg.relation.clone(), target, c.concept.as_str())
                    .with_status(Status::Provisional)
                    .with_provenance("generated");
                library.stage_provisional(crystal.clone());
                let index = library
                    .provisional()
                    .iter()
                    .position(|p| p.same_tuple(&crystal))
                    .expect("just staged");
                let report = library.submit_provisional(index, scope)?;
                out.push(Submission {
                    crystal: crystal.to_record(),
                    context,
                    report,
                    warning,
                });
            }
        }
    }
    Ok(out)
}
