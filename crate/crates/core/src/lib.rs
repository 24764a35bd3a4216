//! Knowledge-graph question answering with a Transformer encoder that reasons
//! over a serialized subgraph under a structure-aware attention mask.

pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod head;
pub mod kg;
pub mod mask;
pub mod pipeline;
pub mod retrieval;
pub mod sequencer;
pub mod serialize;
pub mod train;

pub use datagen::{Dataset, QaRecord, Split};
pub use encoder::{ModelConfig, ModelParameters};
pub use error::{Error, Result};
pub use kg::{EntityId, KnowledgeGraph, RelationId, Triple};
pub use mask::GraphAttention;
pub use sequencer::Vocabulary;
pub use serialize::{serialize_subgraph, NodeToken, SerializedSubgraph, Subgraph};
