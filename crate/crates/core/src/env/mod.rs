//! Synthetic multi-hop retrieval environment.

pub mod metrics;
pub mod oracle;
pub mod query;
pub mod retrieval;
pub mod world;

pub use metrics::{exact_match, token_f1};
pub use oracle::{
    gold_progress, oracle_judge, oracle_next_block, oracle_trajectory, oracle_trajectory_k, Preference, DEFAULT_K_DOCS,
};
pub use query::{gen_query, gen_query_set, read_queries, write_queries, QueryInstance};
pub use retrieval::retrieve;
pub use world::{gen_world, verbalize, Document, Fact, World, WorldConfig};
