pub mod checkpoint;
pub mod embeddings;
pub mod manifest;
pub mod png;
pub mod stain;
