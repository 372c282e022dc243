//! Joint entity set expansion and synonym discovery.
//!
//! A seed set of entity synsets is grown iteratively: an SVM ensemble over
//! bag-of-embedding features ranks the vocabulary, a boosted-tree synonym
//! model is fine-tuned on pseudo labels drawn from that ranking, and the
//! synonym scores are fused back into the ranking. Once expansion finishes,
//! the synonym graph over the expanded set is partitioned with Louvain to
//! produce synsets.
//!
//! Module map:
//!
//! - [`store`]: vocabulary, embedding spaces, seed queries, distant supervision, PCA
//! - [`pairfeat`]: lexical and semantic features of a term pair
//! - [`gbdt`]: gradient boosted trees with logistic loss and additive fine-tuning
//! - [`expansion`]: entity features, negative sampling, SVM ensemble
//! - [`joint`]: the iterative expansion loop with synonym-score fusion
//! - [`synset`]: synonym graph, modularity and Louvain
//! - [`eval`]: ranking/classification metrics and dataset difficulty
//! - [`synthbench`]: planted synthetic worlds for end-to-end checks
//! - [`cli`]: configuration and the command implementations behind the binary

pub mod cli;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod gbdt;
pub mod joint;
pub mod pairfeat;
pub mod rank;
pub mod seed;
pub mod store;
pub mod synset;
pub mod synthbench;

pub use error::{Error, Result};
pub use store::TermId;
