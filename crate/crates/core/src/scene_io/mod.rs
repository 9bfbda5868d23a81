//! Synthetic scene generation, COCO-style JSON IO, rasterization and
//! SVG/GeoJSON export.

mod coco;
mod export;
mod generate;
mod raster;

pub use coco::{
    load_predictions, load_scenes, load_scenes_with, predictions_to_json, save_predictions,
    save_scenes, scenes_from_json, scenes_to_json, write_atomic, LoadOptions, PredictedInstance,
    PredictionSet,
};
pub use export::{export, import_geojson, ExportFormat};
pub use generate::{generate_scenes, perturb_scene, stream_rng, GenParams};
pub use raster::{distance_transform, rasterize, RasterImage};
