//! Desk-scale digital atlas engine for labeled histopathology patch embeddings.
//!
//! The pipeline runs from annotated slides to an immutable, searchable atlas:
//!
//! - [`annotation`]: ASAP polygon XML, label tables, containment and area.
//! - [`patching`]: area-adaptive patch grids, H&E deconvolution, cellularity filtering.
//! - [`embedding_io`]: the EMB1 container, CSV import and the HTTP extractor client.
//! - [`atlas_index`]: the ATL1 atlas file and exact Euclidean k-NN.
//! - [`evaluation`]: top-n / majority-n scoring, confusion matrices, top-3@top-n tables.
//! - [`analytics`]: class centroids, intra-class spread, single linkage, PCA, validity indices.
//! - [`projection`]: exact t-SNE and atlas/test overlays.

pub mod analytics;
pub mod annotation;
pub mod atlas_index;
pub mod embedding_io;
pub mod error;
pub mod evaluation;
pub mod patching;
pub mod projection;
pub mod svg;

pub use error::{Error, Result};
