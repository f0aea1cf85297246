//! Attention sublayers and the Transformer layer that combines them.

mod cga;
mod layer;
mod twla;
mod window;

pub use cga::CgaBlock;
pub use layer::{LayerParts, TransformerLayer};
pub use twla::{
    attention_weights, neighborhood_attention, GeoMlp, TwlaBlock, TwlaConfig, TwlaGeometry,
};
pub use window::{build_triangle_windows, edge_angle, group_of, min_group_size, TriangleWindow};
