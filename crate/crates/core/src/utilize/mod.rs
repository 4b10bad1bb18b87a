//! Knowledge utilization: query generation, retrieval, personalized
//! adaptation and injection.

mod adapt;
mod inject;
mod query;
mod retrieve;

pub use adapt::{adapt, projection_rows, Adaptation, AdaptationUnit};
pub use inject::{direct_predict, inject_concat, inject_tower};
pub use query::{gen_queries, Query, QueryPlan};
pub use retrieve::{retrieve, RetrievedKnowledge};
