//! Lattice-structured domain embeddings (Euclidean or Poincaré ball) and the
//! concept/relation vectors used for fiber-local concept scoring.
//!
//! Domain vectors are trained with the margin triplet loss
//! `max(0, dist(e₁, e₂) − dist(e₁, e₃) + γ)` over sampled `(d₁ ⊑ d₂, d₃)`
//! triplets, where `d₃` is neither an ancestor of `d₁` nor below `d₂`.
//! Poincaré updates use the exact gradient of the hyperbolic distance
//! followed by a norm-clip back inside the ball.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainLattice, DomainPath};
use crate::inference::effective_concepts;
use crate::meta::RelationSymbol;
use crate::store::CrystalLibrary;

/// Maximum norm allowed for Poincaré vectors.
pub const BALL_RADIUS: f64 = 1.0 - 1e-5;
const INIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("vector with norm {0} lies outside the unit ball")]
    OutsideBall(f64),
    #[error("lattice has no valid (child, ancestor, off-path) triplet")]
    InsufficientLattice,
    #[error("no embedding for {0}")]
    MissingEmbedding(String),
    #[error("effective fiber of {0} has no concepts")]
    EmptyFiber(DomainPath),
    #[error("library has no crystals to train on")]
    EmptyLibrary,
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    #[default]
    Euclidean,
    Poincare,
}

impl Geometry {
    pub fn default_dim(self) -> usize {
        match self {
            Geometry::Euclidean => 32,
            Geometry::Poincare => 16,
        }
    }
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<(), EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(())
}

fn sq_norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn in_ball(u: &[f64]) -> Result<f64, EmbedError> {
    let n = sq_norm(u);
    if n >= 1.0 || n.is_nan() {
        return Err(EmbedError::OutsideBall(n.sqrt()));
    }
    Ok(n)
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    check_dims(u, v)?;
    Ok(sq_dist(u, v).sqrt())
}

/// `arcosh(1 + 2‖u−v‖² / ((1−‖u‖²)(1−‖v‖²)))`, evaluated as
/// `ln1p(t + √(t(t+2)))` for accuracy near zero.
pub fn poincare_distance(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    check_dims(u, v)?;
    let alpha = 1.0 - in_ball(u)?;
    let beta = 1.0 - in_ball(v)?;
    let t = 2.0 * sq_dist(u, v) / (alpha * beta);
    Ok((t + (t * (t + 2.0)).sqrt()).ln_1p())
}

/// Distance and its gradients with respect to `u` and `v`. The gradient is
/// taken as zero at `u = v`, where the distance is not differentiable.
pub fn poincare_distance_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), EmbedError> {
    check_dims(u, v)?;
    let su = in_ball(u)?;
    let sv = in_ball(v)?;
    let (alpha, beta) = (1.0 - su, 1.0 - sv);
    let delta = sq_dist(u, v);
    let t = 2.0 * delta / (alpha * beta);
    let root = (t * (t + 2.0)).sqrt();
    let dist = (t + root).ln_1p();
    if root == 0.0 {
        return Ok((dist, vec![0.0; u.len()], vec![0.0; v.len()]));
    }
    // d(arcosh x)/dx = 1/√(x²−1) with x = 1 + t.
    let scale = 1.0 / root;
    let cu = 4.0 / (alpha * beta);
    let du_self = 4.0 * delta / (alpha * alpha * beta);
    let dv_self = 4.0 * delta / (alpha * beta * beta);
    let gu = u
        .iter()
        .zip(v)
        .map(|(a, b)| scale * (cu * (a - b) + du_self * a))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(a, b)| scale * (cu * (b - a) + dv_self * b))
        .collect();
    Ok((dist, gu, gv))
}

fn euclidean_distance_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), EmbedError> {
    let dist = euclidean_distance(u, v)?;
    if dist == 0.0 {
        return Ok((0.0, vec![0.0; u.len()], vec![0.0; v.len()]));
    }
    let gu: Vec<f64> = u.iter().zip(v).map(|(a, b)| (a - b) / dist).collect();
    let gv = gu.iter().map(|g| -g).collect();
    Ok((dist, gu, gv))
}

pub fn distance(geometry: Geometry, u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    match geometry {
        Geometry::Euclidean => euclidean_distance(u, v),
        Geometry::Poincare => poincare_distance(u, v),
    }
}

fn distance_grad(geometry: Geometry, u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), EmbedError> {
    match geometry {
        Geometry::Euclidean => euclidean_distance_grad(u, v),
        Geometry::Poincare => poincare_distance_grad(u, v),
    }
}

pub fn lattice_loss(e1: &[f64], e2: &[f64], e3: &[f64], gamma: f64, geometry: Geometry) -> Result<f64, EmbedError> {
    let pos = distance(geometry, e1, e2)?;
    let neg = distance(geometry, e1, e3)?;
    Ok((pos - neg + gamma).max(0.0))
}

/// Loss and gradients `[∂/∂e₁, ∂/∂e₂, ∂/∂e₃]`. Zero gradients when the
/// hinge is inactive.
pub fn lattice_loss_grad(
    e1: &[f64],
    e2: &[f64],
    e3: &[f64],
    gamma: f64,
    geometry: Geometry,
) -> Result<(f64, [Vec<f64>; 3]), EmbedError> {
    let (pos, g1p, g2) = distance_grad(geometry, e1, e2)?;
    let (neg, g1n, g3) = distance_grad(geometry, e1, e3)?;
    let arg = pos - neg + gamma;
    if arg <= 0.0 {
        let z = vec![0.0; e1.len()];
        return Ok((0.0, [z.clone(), z.clone(), z]));
    }
    let g1 = g1p.iter().zip(&g1n).map(|(a, b)| a - b).collect();
    let g3 = g3.into_iter().map(|g| -g).collect();
    Ok((arg, [g1, g2, g3]))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub child: DomainPath,
    pub ancestor: DomainPath,
    pub off_path: DomainPath,
}

impl Triplet {
    /// `child ⊏ ancestor`, and `off_path` is neither an ancestor-or-self of
    /// `child` nor `⊑ ancestor`.
    pub fn is_valid(&self) -> bool {
        self.child.strictly_specializes(&self.ancestor)
            && !self.child.specializes(&self.off_path)
            && !self.off_path.specializes(&self.ancestor)
    }
}

/// Precomputed triplet support for one lattice.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    domains: Vec<DomainPath>,
    /// (child, ancestor, admissible off-path indices)
    pairs: Vec<(usize, usize, Vec<usize>)>,
}

impl TripletSampler {
    pub fn new(lattice: &DomainLattice) -> Result<Self, EmbedError> {
        let domains: Vec<DomainPath> = lattice.domains().cloned().collect();
        let mut pairs = Vec::new();
        for (i, child) in domains.iter().enumerate() {
            for (j, anc) in domains.iter().enumerate() {
                if !child.strictly_specializes(anc) {
                    continue;
                }
                let off: Vec<usize> = domains
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| !child.specializes(x) && !x.specializes(anc))
                    .map(|(k, _)| k)
                    .collect();
                if !off.is_empty() {
                    pairs.push((i, j, off));
                }
            }
        }
        if pairs.is_empty() {
            return Err(EmbedError::InsufficientLattice);
        }
        Ok(Self { domains, pairs })
    }

    pub fn domains(&self) -> &[DomainPath] {
        &self.domains
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    fn sample_indices<R: Rng>(&self, rng: &mut R) -> (usize, usize, usize) {
        let (c, a, off) = &self.pairs[rng.gen_range(0..self.pairs.len())];
        (*c, *a, off[rng.gen_range(0..off.len())])
    }

    fn negative_for<R: Rng>(&self, pair: usize, rng: &mut R) -> usize {
        let off = &self.pairs[pair].2;
        off[rng.gen_range(0..off.len())]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Triplet {
        let (c, a, o) = self.sample_indices(rng);
        Triplet {
            child: self.domains[c].clone(),
            ancestor: self.domains[a].clone(),
            off_path: self.domains[o].clone(),
        }
    }
}

pub fn sample_triplets<R: Rng>(lattice: &DomainLattice, count: usize, rng: &mut R) -> Result<Vec<Triplet>, EmbedError> {
    let sampler = TripletSampler::new(lattice)?;
    Ok((0..count).map(|_| sampler.sample(rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub margin: f64,
    pub negatives_per_positive: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub geometry: Geometry,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 500,
            margin: 1.0,
            negatives_per_positive: 5,
            batch_size: 32,
            seed: 0,
            geometry: Geometry::Euclidean,
            dim: Geometry::Euclidean.default_dim(),
        }
    }
}

impl TrainConfig {
    pub fn for_geometry(geometry: Geometry) -> Self {
        Self {
            geometry,
            dim: geometry.default_dim(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    /// Mean loss on a fixed evaluation sample before any update.
    pub initial_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of fresh triplets with `dist(child, ancestor) ≤ dist(child, off_path)`.
    pub constraint_satisfaction: f64,
}

const EVAL_TRIPLETS: usize = 2000;

/// Domain/concept/relation vectors plus interaction vectors and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpace {
    pub geometry: Geometry,
    pub dim: usize,
    pub domains: BTreeMap<DomainPath, Vec<f64>>,
    pub concepts: BTreeMap<String, Vec<f64>>,
    pub relations: BTreeMap<RelationSymbol, Vec<f64>>,
    /// Relation-domain interaction vectors `v_r`.
    #[serde(rename = "v")]
    pub interactions: BTreeMap<RelationSymbol, Vec<f64>>,
    pub bias: BTreeMap<String, f64>,
    pub seed: u64,
}

fn init_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE)).collect()
}

fn clip_to_ball(v: &mut [f64]) {
    let n = sq_norm(v).sqrt();
    if n > BALL_RADIUS {
        let s = BALL_RADIUS / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
}

impl EmbeddingSpace {
    pub fn new(geometry: Geometry, dim: usize, seed: u64) -> Self {
        Self {
            geometry,
            dim,
            domains: BTreeMap::new(),
            concepts: BTreeMap::new(),
            relations: BTreeMap::new(),
            interactions: BTreeMap::new(),
            bias: BTreeMap::new(),
            seed,
        }
    }

    pub fn domain_vector(&self, d: &DomainPath) -> Option<&[f64]> {
        self.domains.get(d).map(Vec::as_slice)
    }

    pub fn distance(&self, u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
        distance(self.geometry, u, v)
    }

    pub fn domain_distance(&self, a: &DomainPath, b: &DomainPath) -> Result<f64, EmbedError> {
        let va = self.domain_vector(a).ok_or_else(|| EmbedError::MissingEmbedding(a.to_string()))?;
        let vb = self.domain_vector(b).ok_or_else(|| EmbedError::MissingEmbedding(b.to_string()))?;
        self.distance(va, vb)
    }

    /// Mean concept vector over the query concepts present in the space; zero
    /// when none are present.
    pub fn query_vector<S: AsRef<str>>(&self, concepts: &[S]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for c in concepts {
            if let Some(v) = self.concepts.get(c.as_ref()) {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                n += 1;
            }
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }

    /// `h_r + e_d ⊙ v_r`: the relation read in a domain context.
    pub fn relation_in_domain(&self, r: &RelationSymbol, d: &DomainPath) -> Result<Vec<f64>, EmbedError> {
        let h = self.relations.get(r).ok_or_else(|| EmbedError::MissingEmbedding(r.to_string()))?;
        let v = self.interactions.get(r).ok_or_else(|| EmbedError::MissingEmbedding(format!("v[{r}]")))?;
        let e = self.domain_vector(d).ok_or_else(|| EmbedError::MissingEmbedding(d.to_string()))?;
        Ok(h.iter().zip(e).zip(v).map(|((h, e), v)| h + e * v).collect())
    }

    fn ensure_domains<'a, R: Rng>(&mut self, domains: impl Iterator<Item = &'a DomainPath>, rng: &mut R) {
        for d in domains {
            if !self.domains.contains_key(d) {
                let v = init_vector(self.dim, rng);
                self.domains.insert(d.clone(), v);
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("space serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EmbedError> {
        let space: EmbeddingSpace = serde_json::from_str(text).map_err(|e| EmbedError::Snapshot(e.to_string()))?;
        space.check()?;
        Ok(space)
    }

    fn check(&self) -> Result<(), EmbedError> {
        let vectors = self
            .domains
            .values()
            .chain(self.concepts.values())
            .chain(self.relations.values())
            .chain(self.interactions.values());
        for v in vectors {
            if v.len() != self.dim {
                return Err(EmbedError::DimensionMismatch(v.len(), self.dim));
            }
        }
        if self.geometry == Geometry::Poincare {
            for v in self.domains.values() {
                in_ball(v)?;
            }
        }
        Ok(())
    }
}

/// Trains domain vectors for every registered domain with mini-batch gradient
/// descent on the mean triplet loss.
pub fn train_domain_embeddings(
    lattice: &DomainLattice,
    config: &TrainConfig,
) -> Result<(EmbeddingSpace, TrainingReport), EmbedError> {
    let sampler = TripletSampler::new(lattice)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let n = sampler.domains.len();
    let dim = config.dim;
    let mut vecs: Vec<Vec<f64>> = (0..n).map(|_| init_vector(dim, &mut rng)).collect();

    let eval: Vec<(usize, usize, usize)> = (0..EVAL_TRIPLETS).map(|_| sampler.sample_indices(&mut eval_rng)).collect();
    let mean_loss = |vecs: &[Vec<f64>]| -> Result<f64, EmbedError> {
        let mut total = 0.0;
        for &(c, a, o) in &eval {
            total += lattice_loss(&vecs[c], &vecs[a], &vecs[o], config.margin, config.geometry)?;
        }
        Ok(total / eval.len() as f64)
    };
    let initial_loss = mean_loss(&vecs)?;

    let batch_size = config.batch_size.max(1);
    let negatives = config.negatives_per_positive.max(1);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..sampler.pairs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut triplets = Vec::with_capacity(order.len() * negatives);
        for &p in &order {
            let (c, a, _) = sampler.pairs[p];
            for _ in 0..negatives {
                triplets.push((c, a, sampler.negative_for(p, &mut rng)));
            }
        }
        let mut epoch_total = 0.0;
        for batch in triplets.chunks(batch_size) {
            let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let scale = 1.0 / batch.len() as f64;
            for &(c, a, o) in batch {
                let (loss, [g1, g2, g3]) = lattice_loss_grad(&vecs[c], &vecs[a], &vecs[o], config.margin, config.geometry)?;
                epoch_total += loss;
                for (idx, g) in [(c, g1), (a, g2), (o, g3)] {
                    let acc = grads.entry(idx).or_insert_with(|| vec![0.0; dim]);
                    acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y * scale);
                }
            }
            for (idx, g) in grads {
                let v = &mut vecs[idx];
                v.iter_mut().zip(&g).for_each(|(x, y)| *x -= config.learning_rate * y);
                if config.geometry == Geometry::Poincare {
                    clip_to_ball(v);
                }
            }
        }
        epoch_losses.push(epoch_total / triplets.len().max(1) as f64);
    }

    let mut space = EmbeddingSpace::new(config.geometry, dim, config.seed);
    for (d, v) in sampler.domains.iter().zip(vecs) {
        space.domains.insert(d.clone(), v);
    }
    let constraint_satisfaction = constraint_satisfaction(&space, &sampler, EVAL_TRIPLETS, &mut eval_rng)?;
    Ok((
        space,
        TrainingReport {
            initial_loss,
            epoch_losses,
            constraint_satisfaction,
        },
    ))
}

/// Fraction of `count` freshly sampled triplets satisfying the ordering
/// constraint `dist(child, ancestor) ≤ dist(child, off_path)`.
pub fn constraint_satisfaction<R: Rng>(
    space: &EmbeddingSpace,
    sampler: &TripletSampler,
    count: usize,
    rng: &mut R,
) -> Result<f64, EmbedError> {
    let mut ok = 0usize;
    for _ in 0..count {
        let t = sampler.sample(rng);
        if space.domain_distance(&t.child, &t.ancestor)? <= space.domain_distance(&t.child, &t.off_path)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / count.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Softmax over `{dot(h_{r@d}, h_c)/T + b_c : c ∈ concepts(effective_fiber(d))}`.
/// Returns `(concept, probability)` in concept order; concepts outside the
/// effective fiber are not in the support at all.
pub fn concept_scores(
    d: &DomainPath,
    r: &RelationSymbol,
    library: &CrystalLibrary,
    space: &EmbeddingSpace,
    temperature: f64,
) -> Result<Vec<(String, f64)>, EmbedError> {
    let concepts = effective_concepts(d, library);
    if concepts.is_empty() {
        return Err(EmbedError::EmptyFiber(d.clone()));
    }
    let u = space.relation_in_domain(r, d)?;
    let mut logits = Vec::with_capacity(concepts.len());
    for c in &concepts {
        let h = space.concepts.get(*c).ok_or_else(|| EmbedError::MissingEmbedding((*c).to_string()))?;
        let b = space.bias.get(*c).copied().unwrap_or(0.0);
        logits.push(dot(&u, h) / temperature + b);
    }
    let probs = softmax(&logits);
    Ok(concepts.into_iter().map(str::to_string).zip(probs).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradients of one completion cross-entropy term.
struct CompletionGrad {
    loss: f64,
    d_relation: Vec<f64>,
    d_interaction: Vec<f64>,
    d_concepts: Vec<Vec<f64>>,
    d_bias: Vec<f64>,
}

/// Cross-entropy of the target concept under the fiber-local softmax.
/// `candidates[i]` are concept vectors with biases `biases[i]`.
fn completion_loss_grad(
    h_r: &[f64],
    v_r: &[f64],
    e_d: &[f64],
    candidates: &[&[f64]],
    biases: &[f64],
    target: usize,
    temperature: f64,
) -> CompletionGrad {
    let u: Vec<f64> = h_r.iter().zip(e_d).zip(v_r).map(|((h, e), v)| h + e * v).collect();
    let logits: Vec<f64> = candidates
        .iter()
        .zip(biases)
        .map(|(h, b)| dot(&u, h) / temperature + b)
        .collect();
    let probs = softmax(&logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let resid: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| p - if i == target { 1.0 } else { 0.0 })
        .collect();
    let mut du = vec![0.0; u.len()];
    for (h, g) in candidates.iter().zip(&resid) {
        du.iter_mut().zip(*h).for_each(|(a, x)| *a += g * x / temperature);
    }
    let d_interaction = du.iter().zip(e_d).map(|(g, e)| g * e).collect();
    let d_concepts = resid
        .iter()
        .map(|g| u.iter().map(|x| g * x / temperature).collect())
        .collect();
    CompletionGrad {
        loss,
        d_relation: du,
        d_interaction,
        d_concepts,
        d_bias: resid,
    }
}

/// Full-batch gradient descent on the mean cross-entropy of predicting each
/// crystal's object from `(domain, relation)` over the effective-fiber
/// concept softmax. Updates concept, relation and interaction vectors and
/// concept biases; domain vectors are left untouched (missing ones are
/// initialized).
pub fn train_completion(
    library: &CrystalLibrary,
    space: &EmbeddingSpace,
    config: &CompletionConfig,
) -> Result<(EmbeddingSpace, CompletionReport), EmbedError> {
    let examples: Vec<_> = library.crystals().filter(|c| !c.negated).collect();
    if examples.is_empty() {
        return Err(EmbedError::EmptyLibrary);
    }
    let mut space = space.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = space.dim;
    space.ensure_domains(library.lattice().domains(), &mut rng);
    for c in library.concepts() {
        if !space.concepts.contains_key(c) {
            space.concepts.insert(c.to_string(), init_vector(dim, &mut rng));
        }
        space.bias.entry(c.to_string()).or_insert(0.0);
    }
    for r in library.meta().relations() {
        if !space.relations.contains_key(r) {
            space.relations.insert(r.clone(), init_vector(dim, &mut rng));
        }
        if !space.interactions.contains_key(r) {
            space.interactions.insert(r.clone(), init_vector(dim, &mut rng));
        }
    }

    // Per-domain support, computed once.
    let mut support: BTreeMap<&DomainPath, Vec<String>> = BTreeMap::new();
    for c in &examples {
        support
            .entry(&c.domain)
            .or_insert_with(|| effective_concepts(&c.domain, library).into_iter().map(str::to_string).collect());
    }

    let n = examples.len() as f64;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut final_loss = mean_completion_loss(&space, &examples, &support, config.temperature);
    for _ in 0..config.epochs {
        let mut g_rel: BTreeMap<RelationSymbol, Vec<f64>> = BTreeMap::new();
        let mut g_int: BTreeMap<RelationSymbol, Vec<f64>> = BTreeMap::new();
        let mut g_con: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut g_bias: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0;
        for c in &examples {
            let names = &support[&c.domain];
            let target = names.binary_search(&c.object).expect("object is in its own fiber");
            let cands: Vec<&[f64]> = names.iter().map(|x| space.concepts[x].as_slice()).collect();
            let biases: Vec<f64> = names.iter().map(|x| space.bias[x]).collect();
            let g = completion_loss_grad(
                &space.relations[&c.relation],
                &space.interactions[&c.relation],
                &space.domains[&c.domain],
                &cands,
                &biases,
                target,
                config.temperature,
            );
            total += g.loss;
            add_into(g_rel.entry(c.relation.clone()).or_insert_with(|| vec![0.0; dim]), &g.d_relation);
            add_into(g_int.entry(c.relation.clone()).or_insert_with(|| vec![0.0; dim]), &g.d_interaction);
            for ((name, gc), gb) in names.iter().zip(&g.d_concepts).zip(&g.d_bias) {
                add_into(g_con.entry(name.clone()).or_insert_with(|| vec![0.0; dim]), gc);
                *g_bias.entry(name.clone()).or_default() += gb;
            }
        }
        epoch_losses.push(total / n);
        let step = config.learning_rate / n;
        for (r, g) in g_rel {
            sub_scaled(space.relations.get_mut(&r).unwrap(), &g, step);
        }
        for (r, g) in g_int {
            sub_scaled(space.interactions.get_mut(&r).unwrap(), &g, step);
        }
        for (c, g) in g_con {
            sub_scaled(space.concepts.get_mut(&c).unwrap(), &g, step);
        }
        for (c, g) in g_bias {
            *space.bias.get_mut(&c).unwrap() -= step * g;
        }
        final_loss = mean_completion_loss(&space, &examples, &support, config.temperature);
    }
    Ok((space, CompletionReport { epoch_losses, final_loss }))
}

fn mean_completion_loss(
    space: &EmbeddingSpace,
    examples: &[&crate::store::Crystal],
    support: &BTreeMap<&DomainPath, Vec<String>>,
    temperature: f64,
) -> f64 {
    let mut total = 0.0;
    for c in examples {
        let names = &support[&c.domain];
        let target = names.binary_search(&c.object).expect("object is in its own fiber");
        let cands: Vec<&[f64]> = names.iter().map(|x| space.concepts[x].as_slice()).collect();
        let biases: Vec<f64> = names.iter().map(|x| space.bias[x]).collect();
        total += completion_loss_grad(
            &space.relations[&c.relation],
            &space.interactions[&c.relation],
            &space.domains[&c.domain],
            &cands,
            &biases,
            target,
            temperature,
        )
        .loss;
    }
    total / examples.len() as f64
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
}

fn sub_scaled(v: &mut [f64], g: &[f64], step: f64) {
    v.iter_mut().zip(g).for_each(|(a, x)| *a -= step * x);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckTarget {
    Lattice(Geometry),
    Completion,
    PoincareDistance,
}

/// Relative error used by the gradient checks: `|a − n| / max(|a|, |n|)`,
/// falling back to the absolute error when both are below `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let hi = f(&probe);
            probe[i] = orig - step;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

fn random_ball_point<R: Rng>(dim: usize, max_norm: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = sq_norm(&v).sqrt().max(1e-12);
    let r = rng.gen_range(0.05..max_norm);
    v.into_iter().map(|x| x * r / n).collect()
}

/// Analytic gradient and function for a flat parameter vector.
type Objective = (Box<dyn Fn(&[f64]) -> f64>, Box<dyn Fn(&[f64]) -> Vec<f64>>);

fn objective(target: GradCheckTarget, dim: usize, extra: Option<(Vec<f64>, usize)>) -> Objective {
    match target {
        GradCheckTarget::Lattice(geometry) => {
            let f = move |x: &[f64]| lattice_loss(&x[..dim], &x[dim..2 * dim], &x[2 * dim..], 1.0, geometry).unwrap();
            let g = move |x: &[f64]| {
                let (_, [a, b, c]) = lattice_loss_grad(&x[..dim], &x[dim..2 * dim], &x[2 * dim..], 1.0, geometry).unwrap();
                [a, b, c].concat()
            };
            (Box::new(f), Box::new(g))
        }
        GradCheckTarget::PoincareDistance => {
            let f = move |x: &[f64]| poincare_distance(&x[..dim], &x[dim..]).unwrap();
            let g = move |x: &[f64]| {
                let (_, a, b) = poincare_distance_grad(&x[..dim], &x[dim..]).unwrap();
                [a, b].concat()
            };
            (Box::new(f), Box::new(g))
        }
        GradCheckTarget::Completion => {
            // Layout: h_r | v_r | h_c * k | b * k ; e_d fixed.
            let (e_d, k) = extra.expect("completion check needs a domain vector and concept count");
            let e_f = e_d.clone();
            let split = move |x: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
                let h_r = x[..dim].to_vec();
                let v_r = x[dim..2 * dim].to_vec();
                let hs = (0..k).map(|i| x[(2 + i) * dim..(3 + i) * dim].to_vec()).collect();
                let b = x[(2 + k) * dim..].to_vec();
                (h_r, v_r, hs, b)
            };
            let split_g = split;
            let f = move |x: &[f64]| {
                let (h_r, v_r, hs, b) = split(x);
                let refs: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
                completion_loss_grad(&h_r, &v_r, &e_f, &refs, &b, 0, 1.0).loss
            };
            let g = move |x: &[f64]| {
                let (h_r, v_r, hs, b) = split_g(x);
                let refs: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
                let g = completion_loss_grad(&h_r, &v_r, &e_d, &refs, &b, 0, 1.0);
                let mut out = g.d_relation;
                out.extend(g.d_interaction);
                out.extend(g.d_concepts.concat());
                out.extend(g.d_bias);
                out
            };
            (Box::new(f), Box::new(g))
        }
    }
}

/// Max relative error between analytic gradient and central differences at
/// `point` (flat layout: `[e1|e2|e3]` for lattice, `[u|v]` for distance).
pub fn grad_check_at(target: GradCheckTarget, dim: usize, point: &[f64]) -> f64 {
    let (f, g) = objective(target, dim, None);
    let step = match target {
        GradCheckTarget::Lattice(Geometry::Poincare) | GradCheckTarget::PoincareDistance => 1e-6,
        _ => 1e-5,
    };
    let analytic = g(point);
    let numeric = central_difference(&*f, point, step);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Samples a random valid point for `target` (away from hinge kinks) and
/// returns the max relative gradient error there.
pub fn grad_check<R: Rng>(target: GradCheckTarget, dim: usize, rng: &mut R) -> f64 {
    match target {
        GradCheckTarget::Lattice(geometry) => loop {
            let point: Vec<f64> = match geometry {
                Geometry::Euclidean => (0..3 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                Geometry::Poincare => (0..3).flat_map(|_| random_ball_point(dim, 0.9, rng)).collect(),
            };
            let (e1, e2, e3) = (&point[..dim], &point[dim..2 * dim], &point[2 * dim..]);
            let arg = distance(geometry, e1, e2).unwrap() - distance(geometry, e1, e3).unwrap() + 1.0;
            if arg > 1e-3 {
                return grad_check_at(target, dim, &point);
            }
        },
        GradCheckTarget::PoincareDistance => {
            let point: Vec<f64> = (0..2).flat_map(|_| random_ball_point(dim, 0.9, rng)).collect();
            grad_check_at(target, dim, &point)
        }
        GradCheckTarget::Completion => {
            let k = 4;
            let e_d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let point: Vec<f64> = (0..(2 + k) * dim + k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (f, g) = objective(target, dim, Some((e_d, k)));
            let analytic = g(&point);
            let numeric = central_difference(&*f, &point, 1e-5);
            analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| relative_error(*a, *n))
                .fold(0.0, f64::max)
        }
    }
}

/// Domains in `lattice` lacking a vector in `space`.
pub fn missing_domains<'a>(lattice: &'a DomainLattice, space: &EmbeddingSpace) -> BTreeSet<&'a DomainPath> {
    lattice.domains().filter(|d| !space.domains.contains_key(*d)).collect()
}
