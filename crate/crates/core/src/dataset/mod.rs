//! Sample types, the binary tile format, JSON-lines manifests and batching.

mod batching;
mod manifest;
mod tile;

pub use batching::{make_batches, BatchPlan};
pub use manifest::{
    load_manifest, parse_manifest, write_manifest, ChannelStats, Manifest, Record, Split,
    DEFAULT_MAX_MAGNITUDE,
};
pub use tile::{
    read_tile, write_tile, SarTile, SarTilePair, TILE_HEADER_LEN, TILE_MAGIC, TILE_VERSION,
};

/// One bi-temporal observation with its magnitude label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pair: SarTilePair,
    pub magnitude: f64,
    pub split: Split,
}
