use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{Point, Scene, StructureKind, VectorInstance};
use crate::scene_io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Svg,
    GeoJson,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Svg => "svg",
            ExportFormat::GeoJson => "geojson",
        }
    }
}

fn class_color(class_id: u32) -> &'static str {
    match class_id {
        0 => "#e6550d",
        1 => "#3182bd",
        2 => "#31a354",
        _ => "#636363",
    }
}

/// Writes one file per scene, named `scene_<image_id>.<ext>`, and returns the paths.
pub fn export(scenes: &[Scene], format: ExportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    scenes
        .iter()
        .map(|s| {
            let path = dir.join(format!("scene_{}.{}", s.image_id, format.extension()));
            let body = match format {
                ExportFormat::Svg => to_svg(s),
                ExportFormat::GeoJson => serde_json::to_string_pretty(&to_geojson(s))?,
            };
            write_atomic(&path, body.as_bytes())?;
            Ok(path)
        })
        .collect()
}

fn to_svg(scene: &Scene) -> String {
    let s = scene.raster_size as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        scene.raster_size
    );
    let coords = |pts: &[Point]| {
        pts.iter()
            .map(|p| format!("{},{}", p.x * s, p.y * s))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for v in &scene.instances {
        let color = class_color(v.class_id);
        let _ = match v.kind {
            StructureKind::Polygon => writeln!(
                out,
                r#"  <polygon id="v{}" points="{}" stroke="{color}" fill="{color}" fill-opacity="0.3"/>"#,
                v.id,
                coords(&v.points)
            ),
            StructureKind::Polyline => writeln!(
                out,
                r#"  <polyline id="v{}" points="{}" stroke="{color}" fill="none"/>"#,
                v.id,
                coords(&v.points)
            ),
            StructureKind::Segment => writeln!(
                out,
                r#"  <line id="v{}" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}"/>"#,
                v.id,
                v.points[0].x * s,
                v.points[0].y * s,
                v.points[1].x * s,
                v.points[1].y * s
            ),
        };
    }
    out.push_str("</svg>\n");
    out
}

fn to_geojson(scene: &Scene) -> Value {
    let pos = |p: &Point| json!([p.x, p.y]);
    let features: Vec<Value> = scene
        .instances
        .iter()
        .map(|v| {
            let geometry = if v.kind.is_closed() {
                let mut ring: Vec<Value> = v.points.iter().map(pos).collect();
                ring.push(pos(&v.points[0]));
                json!({"type": "Polygon", "coordinates": [ring]})
            } else {
                json!({"type": "LineString", "coordinates": v.points.iter().map(pos).collect::<Vec<_>>()})
            };
            json!({
                "type": "Feature",
                "geometry": geometry,
                "properties": {"id": v.id, "class_id": v.class_id, "structure": v.kind.as_str()},
            })
        })
        .collect();
    json!({
        "type": "FeatureCollection",
        "image_id": scene.image_id,
        "raster_size": scene.raster_size,
        "features": features,
    })
}

pub fn import_geojson(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    let root: Value = serde_json::from_str(&text)?;
    let bad = |m: &str| Error::Schema(format!("{}: {m}", path.display()));
    let image_id = root["image_id"].as_u64().ok_or_else(|| bad("missing image_id"))?;
    let raster_size = root["raster_size"].as_u64().ok_or_else(|| bad("missing raster_size"))? as u32;
    let features = root["features"].as_array().ok_or_else(|| bad("missing features"))?;
    let mut instances = Vec::with_capacity(features.len());
    for f in features {
        let props = &f["properties"];
        let id = props["id"].as_u64().ok_or_else(|| bad("feature without id"))?;
        let class_id = props["class_id"].as_u64().ok_or_else(|| bad("feature without class_id"))? as u32;
        let structure = props["structure"].as_str().unwrap_or("");
        let kind = StructureKind::parse(structure).ok_or_else(|| Error::UnknownStructure {
            id,
            structure: structure.to_string(),
        })?;
        let geom = &f["geometry"];
        let positions = if kind.is_closed() {
            &geom["coordinates"][0]
        } else {
            &geom["coordinates"]
        };
        let mut points = positions
            .as_array()
            .ok_or_else(|| bad("bad coordinates"))?
            .iter()
            .map(|p| match (p[0].as_f64(), p[1].as_f64()) {
                (Some(x), Some(y)) => Ok(Point::new(x, y)),
                _ => Err(bad("bad position")),
            })
            .collect::<Result<Vec<_>>>()?;
        if kind.is_closed() && points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        instances.push(VectorInstance::new(id, class_id, kind, points));
    }
    Ok(Scene {
        image_id,
        raster_size,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CLASS_BUILDING, CLASS_CENTER_LINE};
    use crate::scene_io::{generate_scenes, GenParams};

    fn one(v: VectorInstance) -> Scene {
        Scene {
            image_id: 9,
            raster_size: 64,
            instances: vec![v],
        }
    }

    #[test]
    fn square_becomes_one_polygon_element() {
        let sq = VectorInstance::new(
            1,
            CLASS_BUILDING,
            StructureKind::Polygon,
            vec![
                Point::new(0.2, 0.2),
                Point::new(0.4, 0.2),
                Point::new(0.4, 0.4),
                Point::new(0.2, 0.4),
            ],
        );
        let svg = to_svg(&one(sq));
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<polyline").count() + svg.matches("<line").count(), 0);
    }

    #[test]
    fn segment_becomes_two_position_linestring() {
        let seg = VectorInstance::new(
            1,
            CLASS_CENTER_LINE,
            StructureKind::Segment,
            vec![Point::new(0.1, 0.2), Point::new(0.3, 0.4)],
        );
        let g = to_geojson(&one(seg));
        let geom = &g["features"][0]["geometry"];
        assert_eq!(geom["type"], "LineString");
        assert_eq!(geom["coordinates"].as_array().unwrap().len(), 2);
        assert_eq!(g["features"][0]["properties"]["class_id"], 2);
    }

    #[test]
    fn geojson_round_trip() {
        let scenes = generate_scenes(&GenParams {
            seed: 12,
            n_scenes: 10,
            ..GenParams::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export(&scenes, ExportFormat::GeoJson, dir.path()).unwrap();
        let mut worst = 0.0f64;
        for (s, p) in scenes.iter().zip(&paths) {
            let back = import_geojson(p).unwrap();
            assert_eq!(back.instances.len(), s.instances.len());
            for (a, b) in s.instances.iter().zip(&back.instances) {
                assert_eq!((a.id, a.class_id, a.kind), (b.id, b.class_id, b.kind));
                for (u, v) in a.points.iter().zip(&b.points) {
                    worst = worst.max((u.x - v.x).abs()).max((u.y - v.y).abs());
                }
            }
        }
        assert!(worst < 1e-12);
    }
}
