//! Scene-set files: line-delimited JSON, one scene per line, schema
//! versioned. Seeds are `base_seed + index`, so disjoint seed ranges give
//! disjoint train/holdout splits.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::sim::{generate_scene, Difficulty, Scene, SimConfig, SCENE_SCHEMA_VERSION};

use super::PipelineError;

/// Generate `count` scenes with seeds `base_seed..base_seed+count` and
/// write them as JSONL. Refuses to overwrite unless `force`.
pub fn write_scenes(
    path: &Path,
    count: usize,
    difficulty: Difficulty,
    base_seed: u64,
    horizon_s: f64,
    dt: f64,
    sim_cfg: &SimConfig,
    force: bool,
) -> Result<Vec<Scene>, PipelineError> {
    if path.exists() && !force {
        return Err(PipelineError::WouldOverwrite(path.to_path_buf()));
    }
    let scenes = generate_scenes(count, difficulty, base_seed, horizon_s, dt, sim_cfg)?;
    let file = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for scene in &scenes {
        serde_json::to_writer(&mut w, scene).map_err(|e| PipelineError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| PipelineError::io(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(scenes)
}

pub fn generate_scenes(
    count: usize,
    difficulty: Difficulty,
    base_seed: u64,
    horizon_s: f64,
    dt: f64,
    sim_cfg: &SimConfig,
) -> Result<Vec<Scene>, PipelineError> {
    (0..count)
        .map(|i| {
            generate_scene(base_seed + i as u64, difficulty, horizon_s, dt, sim_cfg)
                .map_err(|e| PipelineError::Format(e.to_string()))
        })
        .collect()
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut scenes = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| {
            PipelineError::Parse { file: path.display().to_string(), line: lineno + 1, what: e.to_string() }
        })?;
        if scene.schema_version != SCENE_SCHEMA_VERSION {
            return Err(PipelineError::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                what: format!("unsupported scene schema version {}", scene.schema_version),
            });
        }
        scenes.push(scene);
    }
    Ok(scenes)
}
