//! Persistence: datasets, token caches, checkpoints, reports and images.

mod cache;
mod checkpoint;
mod dataset;
mod image_io;
mod report;

pub use cache::{build_token_cache, hex, load_token_cache, save_token_cache, TokenCache, CACHE_HEADER_LEN, CACHE_MAGIC, CACHE_VERSION};
pub use checkpoint::{
    load_checkpoint, load_store_arrays, save_checkpoint, store_arrays, ArrayDtype, CheckpointContainer, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{ingest_dataset, synthetic_shapes, DataSource, Dataset, Split};
pub use image_io::{image_grid, write_image_grid};
pub use report::{read_report, validate_report_json, write_report, DiagnosticsReport, Record, SummaryStat};
