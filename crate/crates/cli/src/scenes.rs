//! JSON serialization of synthetic scenes: points inline, boxes as
//! 8-number arrays `[cx, cy, cz, l, w, h, yaw, class]`.

use std::path::Path;

use mmfusion_core::cloud::PointCloud;
use mmfusion_core::synth::{ObjectBox, SyntheticScene};
use serde::{Deserialize, Serialize};

use crate::errors::{CliError, CliResult};
use crate::formats::write_atomic;

#[derive(Serialize, Deserialize)]
struct SceneJson {
    points: Vec<[f32; 4]>,
    boxes: Vec<[f64; 8]>,
}

#[derive(Serialize, Deserialize)]
struct SceneFileJson {
    scenes: Vec<SceneJson>,
}

fn to_json(scene: &SyntheticScene) -> SceneJson {
    SceneJson {
        points: scene.cloud.points.clone(),
        boxes: scene
            .boxes
            .iter()
            .map(|b| {
                [
                    b.center[0],
                    b.center[1],
                    b.center[2],
                    b.size[0],
                    b.size[1],
                    b.size[2],
                    b.yaw,
                    b.class_id as f64,
                ]
            })
            .collect(),
    }
}

fn from_json(scene: SceneJson) -> CliResult<SyntheticScene> {
    let boxes = scene
        .boxes
        .into_iter()
        .map(|b| {
            if !b.iter().all(|v| v.is_finite()) {
                return Err(CliError::Format("scene box contains non-finite values".into()));
            }
            Ok(ObjectBox {
                center: [b[0], b[1], b[2]],
                size: [b[3], b[4], b[5]],
                yaw: b[6],
                class_id: b[7] as u32,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(SyntheticScene {
        cloud: PointCloud::new(scene.points),
        boxes,
    })
}

pub fn save_scenes(path: &Path, scenes: &[SyntheticScene]) -> CliResult<()> {
    let file = SceneFileJson {
        scenes: scenes.iter().map(to_json).collect(),
    };
    let bytes = serde_json::to_vec_pretty(&file)
        .map_err(|e| CliError::Format(format!("scene encoding failed: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn load_scenes(path: &Path) -> CliResult<Vec<SyntheticScene>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let file: SceneFileJson = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    file.scenes.into_iter().map(from_json).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmfusion_core::synth::synth_scene;

    #[test]
    fn scene_roundtrip_via_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.json");
        let scenes = vec![
            synth_scene(1, 2, 30).unwrap(),
            synth_scene(2, 1, 10).unwrap(),
        ];
        save_scenes(&path, &scenes).unwrap();
        let back = load_scenes(&path).unwrap();
        assert_eq!(scenes, back);
    }
}
