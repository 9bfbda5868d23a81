//! COCO-like scene and prediction files.
//!
//! Stock COCO has no open shapes, so every annotation carries a
//! `"structure"` field and a flat normalized `"points"` array
//! `[x1, y1, x2, y2, ...]`. Floats are written in shortest round-trip
//! decimal form, so save → load is bit-exact.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_instance, Config, Point, Scene, StructureKind, VectorInstance};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    structure: StructureKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    structure: String,
    points: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoint_prob: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    /// Full M-point decoded sequence before key-point filtering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence_keypoint_prob: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Input coordinates are pixels; divide by the image size.
    pub pixel_coords: bool,
}

/// One extracted prediction with its decoder provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub instance: VectorInstance,
    pub score: f64,
    /// Per kept point.
    pub keypoint_prob: Vec<f64>,
    pub layer: usize,
    pub sequence: Option<Vec<Point>>,
    pub sequence_keypoint_prob: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub image_id: u64,
    pub raster_size: u32,
    pub instances: Vec<PredictedInstance>,
}

impl PredictionSet {
    pub fn to_scene(&self) -> Scene {
        Scene {
            image_id: self.image_id,
            raster_size: self.raster_size,
            instances: self.instances.iter().map(|p| p.instance.clone()).collect(),
        }
    }
}

fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(id: u64, flat: &[f64], scale: f64) -> Result<Vec<Point>> {
    if !flat.len().is_multiple_of(2) {
        return Err(Error::InvalidAnnotation {
            id,
            reason: "odd number of coordinates".into(),
        });
    }
    Ok(flat
        .chunks_exact(2)
        .map(|c| Point::new(c[0] / scale, c[1] / scale))
        .collect())
}

fn categories(cfg: &Config) -> Vec<CocoCategory> {
    cfg.class_table
        .iter()
        .map(|(id, name, structure)| CocoCategory {
            id,
            name: name.to_string(),
            structure,
        })
        .collect()
}

fn base_annotation(image_id: u64, v: &VectorInstance) -> CocoAnnotation {
    CocoAnnotation {
        id: v.id,
        image_id,
        category_id: v.class_id,
        structure: v.kind.as_str().to_string(),
        points: flatten(&v.points),
        score: None,
        keypoint_prob: None,
        layer: None,
        sequence: None,
        sequence_keypoint_prob: None,
    }
}

fn image_of(image_id: u64, size: u32) -> CocoImage {
    CocoImage {
        id: image_id,
        width: size,
        height: size,
    }
}

pub fn scenes_to_json(scenes: &[Scene]) -> Result<String> {
    let file = CocoFile {
        images: scenes.iter().map(|s| image_of(s.image_id, s.raster_size)).collect(),
        annotations: scenes
            .iter()
            .flat_map(|s| s.instances.iter().map(|v| base_annotation(s.image_id, v)))
            .collect(),
        categories: categories(&Config::default()),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn predictions_to_json(sets: &[PredictionSet]) -> Result<String> {
    let file = CocoFile {
        images: sets.iter().map(|s| image_of(s.image_id, s.raster_size)).collect(),
        annotations: sets
            .iter()
            .flat_map(|s| {
                s.instances.iter().map(|p| CocoAnnotation {
                    score: Some(p.score),
                    keypoint_prob: Some(p.keypoint_prob.clone()),
                    layer: Some(p.layer),
                    sequence: p.sequence.as_deref().map(flatten),
                    sequence_keypoint_prob: p.sequence_keypoint_prob.clone(),
                    ..base_annotation(s.image_id, &p.instance)
                })
            })
            .collect(),
        categories: categories(&Config::default()),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::Schema(format!("not a file path: {}", path.display())))?;
    let tmp_name = format!(".{}.tmp{}", name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    write_atomic(path, scenes_to_json(scenes)?.as_bytes())
}

pub fn save_predictions(sets: &[PredictionSet], path: &Path) -> Result<()> {
    write_atomic(path, predictions_to_json(sets)?.as_bytes())
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    load_scenes_with(path, LoadOptions::default())
}

pub fn load_scenes_with(path: &Path, opts: LoadOptions) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path)?;
    Ok(parse(&text, opts)?
        .into_iter()
        .map(|set| set.to_scene())
        .collect())
}

pub fn scenes_from_json(text: &str) -> Result<Vec<Scene>> {
    Ok(parse(text, LoadOptions::default())?
        .into_iter()
        .map(|set| set.to_scene())
        .collect())
}

/// Loads a prediction file. Plain scene files are accepted too, with score
/// and key-point probabilities defaulting to 1.
pub fn load_predictions(path: &Path, opts: LoadOptions) -> Result<Vec<PredictionSet>> {
    let text = fs::read_to_string(path)?;
    parse(&text, opts)
}

fn parse(text: &str, opts: LoadOptions) -> Result<Vec<PredictionSet>> {
    let file: CocoFile = serde_json::from_str(text)?;
    let cfg = Config::default();
    let mut order = Vec::new();
    let mut sets: BTreeMap<u64, PredictionSet> = BTreeMap::new();
    for img in &file.images {
        if img.width != img.height {
            return Err(Error::Schema(format!(
                "image {} is not square ({}x{})",
                img.id, img.width, img.height
            )));
        }
        if sets.contains_key(&img.id) {
            return Err(Error::Schema(format!("duplicate image id {}", img.id)));
        }
        order.push(img.id);
        sets.insert(
            img.id,
            PredictionSet {
                image_id: img.id,
                raster_size: img.width,
                instances: Vec::new(),
            },
        );
    }
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    for ann in file.annotations {
        let id = ann.id;
        let kind = StructureKind::parse(&ann.structure).ok_or_else(|| Error::UnknownStructure {
            id,
            structure: ann.structure.clone(),
        })?;
        let set = sets.get_mut(&ann.image_id).ok_or_else(|| {
            Error::Schema(format!("annotation {id} references unknown image {}", ann.image_id))
        })?;
        if !seen.insert((ann.image_id, id)) {
            return Err(Error::Schema(format!(
                "duplicate annotation id {id} in image {}",
                ann.image_id
            )));
        }
        let scale = if opts.pixel_coords {
            set.raster_size as f64
        } else {
            1.0
        };
        let points = unflatten(id, &ann.points, scale)?;
        if points
            .iter()
            .any(|p| !p.is_finite() || !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y))
        {
            return Err(Error::CoordinateOutOfRange { id });
        }
        let instance = VectorInstance::new(id, ann.category_id, kind, points);
        let violations = validate_instance(&instance, &cfg);
        if let Some(v) = violations.first() {
            return Err(Error::InvalidAnnotation {
                id,
                reason: v.to_string(),
            });
        }
        let n = instance.points.len();
        let keypoint_prob = ann.keypoint_prob.unwrap_or_else(|| vec![1.0; n]);
        if keypoint_prob.len() != n {
            return Err(Error::InvalidAnnotation {
                id,
                reason: "keypoint_prob length differs from point count".into(),
            });
        }
        let sequence = ann
            .sequence
            .as_deref()
            .map(|s| unflatten(id, s, scale))
            .transpose()?;
        if let (Some(seq), Some(probs)) = (&sequence, &ann.sequence_keypoint_prob) {
            if seq.len() != probs.len() {
                return Err(Error::InvalidAnnotation {
                    id,
                    reason: "sequence_keypoint_prob length differs from sequence".into(),
                });
            }
        }
        set.instances.push(PredictedInstance {
            instance,
            score: ann.score.unwrap_or(1.0),
            keypoint_prob,
            layer: ann.layer.unwrap_or(0),
            sequence,
            sequence_keypoint_prob: ann.sequence_keypoint_prob,
        });
    }
    Ok(order
        .into_iter()
        .map(|id| sets.remove(&id).expect("inserted above"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{generate_scenes, GenParams};

    #[test]
    fn round_trip_is_bit_exact() {
        let scenes = generate_scenes(&GenParams {
            seed: 4,
            n_scenes: 3,
            ..GenParams::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scenes(&scenes, &path).unwrap();
        let back = load_scenes(&path).unwrap();
        assert_eq!(scenes, back);
        for (a, b) in scenes.iter().zip(&back) {
            for (u, v) in a.instances.iter().zip(&b.instances) {
                for (p, q) in u.points.iter().zip(&v.points) {
                    assert_eq!(p.x.to_bits(), q.x.to_bits());
                    assert_eq!(p.y.to_bits(), q.y.to_bits());
                }
            }
        }
    }

    #[test]
    fn unknown_structure_rejected() {
        let text = r#"{"images":[{"id":1,"width":8,"height":8}],
            "annotations":[{"id":5,"image_id":1,"category_id":1,"structure":"arc","points":[0.1,0.1,0.2,0.2]}],
            "categories":[]}"#;
        let err = scenes_from_json(text).unwrap_err();
        assert!(err.to_string().contains("unknown structure"));
    }

    #[test]
    fn empty_file_gives_no_scenes() {
        let text = r#"{"images":[],"annotations":[],"categories":[]}"#;
        assert!(scenes_from_json(text).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_names_annotation() {
        let text = r#"{"images":[{"id":1,"width":8,"height":8}],
            "annotations":[{"id":42,"image_id":1,"category_id":1,"structure":"polyline","points":[0.1,0.1,1.5,0.2]}]}"#;
        match scenes_from_json(text).unwrap_err() {
            Error::CoordinateOutOfRange { id } => assert_eq!(id, 42),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_is_an_error() {
        assert!(matches!(scenes_from_json("{not json"), Err(Error::Json(_))));
    }

    #[test]
    fn pixel_coordinates_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.json");
        fs::write(
            &path,
            r#"{"images":[{"id":1,"width":100,"height":100}],
            "annotations":[{"id":1,"image_id":1,"category_id":2,"structure":"segment","points":[10,20,50,100]}]}"#,
        )
        .unwrap();
        let s = load_scenes_with(&path, LoadOptions { pixel_coords: true }).unwrap();
        assert_eq!(s[0].instances[0].points, vec![Point::new(0.1, 0.2), Point::new(0.5, 1.0)]);
    }

    #[test]
    fn scene_files_load_as_predictions() {
        let scenes = generate_scenes(&GenParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        save_scenes(&scenes, &path).unwrap();
        let preds = load_predictions(&path, LoadOptions::default()).unwrap();
        assert_eq!(preds[0].to_scene(), scenes[0]);
        assert!(preds[0].instances.iter().all(|p| p.score == 1.0));
    }
}
