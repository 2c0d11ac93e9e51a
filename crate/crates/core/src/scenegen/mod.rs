//! Synthetic relational scene episodes: object catalog, placement sampler,
//! template instruction grammar, rasterizer and the dataset directory format.

mod catalog;
mod dataset;
mod grammar;
mod render;
mod scene;

pub use catalog::{Catalog, Color, ObjectType, Shape, BACKGROUND_RGB};
pub use dataset::{
    episode_id, episode_seed, manifest_hash, Dataset, EpisodeRecord, Manifest, Palette, Split,
    Splits, DATASET_FORMAT_VERSION,
};
pub(crate) use dataset::{read_json, write_json};
pub use grammar::{
    grammar_tokens, oracle_parse_instruction, realize_instruction, AbsoluteCue, Anchor,
    AnchorPhrase, Horizontal, ParsedInstruction, Placement, Relation, Vertical, TIE_TOLERANCE,
};
pub use render::{render_scene, template_detect, TemplateMatch};
pub use scene::{sample_episode, Episode, EpisodeStep, GenConfig, ObjectInstance, Scene};
