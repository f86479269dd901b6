//! Domain-scoped knowledge store with typed inheritance, lattice embeddings
//! and fiber-constrained generation.
//!
//! Knowledge lives in *crystals*, four-tuples `⟨subject, relation@domain,
//! object⟩` partitioned into per-domain *fibers* over a lattice of
//! hierarchical domain paths such as `@Physics@Quantum`. Relations are typed
//! monotone (inherited by sub-domains) or nonmonotone (blocked at domain
//! boundaries), and every insertion passes a validation gate that rejects
//! cycles, causal reversals and contradictions.

pub mod decoder;
pub mod denoise;
pub mod domain;
pub mod embeddings;
pub mod inference;
pub mod meta;
pub mod par;
pub mod store;

pub use domain::{DomainError, DomainLattice, DomainPath};
pub use meta::{MetaConfig, MetaError, MetaFiber, RelationSymbol, Tau};
pub use par::Execution;
pub use store::{Crystal, CrystalLibrary, RejectReason, Scope, Status, StoreError, ValidationReport, Verdict};
