//! Writes synthetic scenes to disk as frames, masks, a manifest and ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{FrameLabels, LayerLabel};
use crate::imaging::{synth_scene, SceneSpec};
use crate::io::{write_frame, write_mask, Manifest, ManifestRecord};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLayer {
    pub velocity: [f64; 2],
    pub height: f64,
    pub visible: bool,
}

/// Ground truth of one frame, upper layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub frame: usize,
    pub layers: Vec<TruthLayer>,
}

impl TruthFrame {
    pub fn labels(&self) -> FrameLabels {
        FrameLabels {
            layers: self
                .layers
                .iter()
                .map(|l| LayerLabel {
                    height: l.height,
                    speed: l.velocity[0].hypot(l.velocity[1]),
                    direction: l.velocity[1].atan2(l.velocity[0]),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SceneSpec,
    pub overlapping_temperatures: bool,
    pub frames: Vec<TruthFrame>,
}

impl GroundTruth {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Renders `spec` and writes `frames/`, `masks/`, the manifest and
/// `truth.json` under `out`. Returns the manifest path.
pub fn write_synthetic(spec: &SceneSpec, out: &Path) -> Result<PathBuf> {
    if spec.layers.is_empty() {
        return Err(Error::invalid("scene spec declares no cloud layers"));
    }
    let scene = synth_scene(spec)?;
    if scene.overlapping_temperatures {
        log::warn!("layer temperature ranges overlap; layers may be indistinguishable");
    }
    let mut order: Vec<usize> = (0..spec.layers.len()).collect();
    order.sort_by(|&a, &b| spec.layers[b].height_m.total_cmp(&spec.layers[a].height_m));

    let mut records = Vec::with_capacity(scene.frames.len());
    let mut truth = Vec::with_capacity(scene.frames.len());
    for (k, f) in scene.frames.iter().enumerate() {
        let frame_rel = PathBuf::from(format!("frames/frame_{k:04}.tsky"));
        let mask_rel = PathBuf::from(format!("masks/mask_{k:04}.tsky"));
        write_frame(&out.join(&frame_rel), &f.frame.centikelvin())?;
        write_mask(&out.join(&mask_rel), &f.mask)?;
        records.push(ManifestRecord {
            frame_path: frame_rel,
            timestamp: f.frame.timestamp,
            sun_elevation_deg: f.frame.sun_elevation.to_degrees(),
            sun_azimuth_deg: f.frame.sun_azimuth.to_degrees(),
            air_temp_k: f.frame.air_temp,
            mask_path: Some(mask_rel),
        });
        truth.push(TruthFrame {
            frame: k,
            layers: order
                .iter()
                .map(|&c| TruthLayer {
                    velocity: f.velocities[c],
                    height: f.heights[c],
                    visible: f.visible[c],
                })
                .collect(),
        });
    }
    let manifest_path = out.join(MANIFEST_FILE);
    Manifest {
        base_dir: out.to_path_buf(),
        records,
    }
    .write(&manifest_path)?;
    let gt = GroundTruth {
        spec: spec.clone(),
        overlapping_temperatures: scene.overlapping_temperatures,
        frames: truth,
    };
    let path = out.join(TRUTH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&gt)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest_path)
}
