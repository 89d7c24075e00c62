//! Iterative fusion of text-side speaker prediction and image-side character
//! identification for comics.
//!
//! The loop alternates between labeling dialogue with a speaker backend, propagating
//! those labels onto character regions through a relationship matrix, training a
//! classifier on the propagated labels, and feeding the classifier's predictions back as
//! speaker candidates. Relationship scores are rescored after each half-step.

pub mod classifier;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod propagation;
pub mod relationship;
pub mod seed;
pub mod speaker;
pub mod synthgen;

pub use error::{CorpusError, ValidationError};
pub use model::{
    BoundingBox, CharacterRegion, ComicDocument, Confidence, Label, LabelAssignment, NameRoster, Page,
    RelationshipMatrix, TextRegion,
};
