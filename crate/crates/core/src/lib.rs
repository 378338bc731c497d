//! Schema-driven extraction of oncology entities from clinical notes,
//! with collation and evaluation against adjudicated ground truth.

pub mod collation;
pub mod corpus;
pub mod evaluation;
pub mod pipeline;
pub mod retrieval;
pub mod schema;
pub mod synthesis;
