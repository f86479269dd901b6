#![allow(dead_code)]

use dalm_core::embeddings::{EmbeddingSpace, Geometry};
use dalm_core::{Crystal, CrystalLibrary, DomainLattice, DomainPath, RelationSymbol, Scope};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn d(s: &str) -> DomainPath {
    DomainPath::parse(s).unwrap()
}

pub fn r(s: &str) -> RelationSymbol {
    RelationSymbol::new(s).unwrap()
}

/// Random tree lattice with exactly `n` domains (⊤ included) and depth at
/// most `max_depth`; the first `max_depth` insertions form a chain so the
/// depth bound is reached.
pub fn random_lattice<R: Rng>(n: usize, max_depth: usize, rng: &mut R) -> DomainLattice {
    let mut lattice = DomainLattice::new();
    let mut known = vec![DomainPath::top()];
    let mut next = 0usize;
    while known.len() < n {
        let parent = if known.len() <= max_depth {
            known.last().unwrap().clone()
        } else {
            loop {
                let p = known.choose(rng).unwrap();
                if p.depth() < max_depth {
                    break p.clone();
                }
            }
        };
        let child = parent.child(&format!("N{next}")).unwrap();
        next += 1;
        lattice.register(&child);
        known.push(child);
    }
    lattice
}

pub fn insert(lib: &mut CrystalLibrary, rel: &str, s: &str, o: &str, dom: &str) -> dalm_core::ValidationReport {
    lib.insert(Crystal::new(s, r(rel), d(dom), o), Scope::Local).unwrap()
}

/// Random library over a random lattice: each domain draws from its own
/// vocabulary plus a small pool shared by every domain.
pub fn random_library<R: Rng>(rng: &mut R, n_domains: usize, max_depth: usize, crystals: usize) -> CrystalLibrary {
    let lattice = random_lattice(n_domains, max_depth, rng);
    let domains: Vec<DomainPath> = lattice.domains().filter(|d| !d.is_top()).cloned().collect();
    let mut lib = CrystalLibrary::default();
    for dom in &domains {
        lib.register_domain(dom);
    }
    let relations: Vec<RelationSymbol> = lib.meta().relations().cloned().collect();
    let concept = |rng: &mut R, dom: &DomainPath| {
        if rng.gen_bool(0.1) {
            format!("shared{}", rng.gen_range(0..4))
        } else {
            format!("{}_{}", dom.segments().join("."), rng.gen_range(0..6))
        }
    };
    for _ in 0..crystals {
        let dom = domains.choose(rng).unwrap().clone();
        let rel = relations.choose(rng).unwrap().clone();
        let s = concept(rng, &dom);
        let o = concept(rng, &dom);
        lib.insert(Crystal::new(s, rel, dom, o), Scope::Local).unwrap();
    }
    lib
}

/// Untrained space with random vectors for every domain, concept and relation
/// of `lib`.
pub fn random_space(lib: &CrystalLibrary, dim: usize, seed: u64) -> EmbeddingSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut space = EmbeddingSpace::new(Geometry::Euclidean, dim, seed);
    for d in lib.lattice().domains() {
        space.domains.insert(d.clone(), v(&mut rng));
    }
    for c in lib.concepts() {
        space.concepts.insert(c.to_string(), v(&mut rng));
        space.bias.insert(c.to_string(), rng.gen_range(-0.5..0.5));
    }
    for r in lib.meta().relations() {
        space.relations.insert(r.clone(), v(&mut rng));
        space.interactions.insert(r.clone(), v(&mut rng));
    }
    space
}
