//! On-disk formats: `TSKY` frames, `TFLD` field grids and the JSON sequence
//! manifest.
//!
//! Both binary formats are a 4-byte magic, little-endian `u32` rows and
//! columns, then little-endian `f32` payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{CloudMask, ThermalFrame};

pub const FRAME_MAGIC: &[u8; 4] = b"TSKY";
pub const FIELD_MAGIC: &[u8; 4] = b"TFLD";

fn encode_grids(magic: &[u8; 4], grids: &[&Array2<f64>]) -> Vec<u8> {
    let (m, n) = grids[0].dim();
    let mut out = Vec::with_capacity(12 + 4 * m * n * grids.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for g in grids {
        for v in g.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_grids(
    kind: &'static str,
    magic: &[u8; 4],
    bytes: &[u8],
    count: usize,
    path: &Path,
) -> Result<Vec<Array2<f64>>> {
    let bad = |reason: String| Error::Format {
        kind,
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad("missing magic header".into()));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * m * n * count;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for {m}x{n}, found {}", bytes.len())));
    }
    let mut values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    (0..count)
        .map(|_| {
            let data: Vec<f64> = values.by_ref().take(m * n).collect();
            Array2::from_shape_vec((m, n), data).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Encodes a grid of centi-kelvin temperatures.
pub fn encode_frame(temps_ck: &Array2<f64>) -> Vec<u8> {
    encode_grids(FRAME_MAGIC, &[temps_ck])
}

pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    Ok(decode_grids("TSKY", FRAME_MAGIC, bytes, 1, path)?.remove(0))
}

pub fn write_frame(path: &Path, temps_ck: &Array2<f64>) -> Result<()> {
    write_bytes(path, &encode_frame(temps_ck))
}

/// Reads a centi-kelvin grid.
pub fn read_frame(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes, path)
}

/// Masks are stored as `TSKY` grids of 0/1.
pub fn write_mask(path: &Path, mask: &CloudMask) -> Result<()> {
    write_frame(path, &mask.bits.mapv(|b| if b { 1.0 } else { 0.0 }))
}

pub fn read_mask(path: &Path) -> Result<CloudMask> {
    let grid = read_frame(path)?;
    if grid.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Format {
            kind: "mask",
            path: path.to_path_buf(),
            reason: "mask values must be 0 or 1".into(),
        });
    }
    Ok(CloudMask::new(grid.mapv(|v| v == 1.0)))
}

/// The four per-layer output grids of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrids {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub phi: Array2<f64>,
    pub psi: Array2<f64>,
}

pub fn encode_field(f: &FieldGrids) -> Vec<u8> {
    encode_grids(FIELD_MAGIC, &[&f.u, &f.v, &f.phi, &f.psi])
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<FieldGrids> {
    let mut g = decode_grids("TFLD", FIELD_MAGIC, bytes, 4, path)?.into_iter();
    Ok(FieldGrids {
        u: g.next().unwrap(),
        v: g.next().unwrap(),
        phi: g.next().unwrap(),
        psi: g.next().unwrap(),
    })
}

pub fn write_field(path: &Path, f: &FieldGrids) -> Result<()> {
    write_bytes(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<FieldGrids> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub frame_path: PathBuf,
    pub timestamp: f64,
    pub sun_elevation_deg: f64,
    pub sun_azimuth_deg: f64,
    pub air_temp_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

/// Ordered frame records; relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<ManifestRecord> = serde_json::from_str(&text)?;
        Ok(Self {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.records)?;
        write_bytes(path, text.as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_frame(&self, index: usize) -> Result<(ThermalFrame, Option<CloudMask>)> {
        let rec = &self.records[index];
        let temps = read_frame(&self.resolve(&rec.frame_path))?;
        let frame = ThermalFrame::from_centikelvin(&temps, rec.air_temp_k)?
            .with_index(index, rec.timestamp)
            .with_sun(rec.sun_elevation_deg.to_radians(), rec.sun_azimuth_deg.to_radians());
        let mask = match &rec.mask_path {
            Some(p) => {
                let mask = read_mask(&self.resolve(p))?;
                if mask.dim() != frame.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: frame.dim(),
                        got: mask.dim(),
                    });
                }
                Some(mask)
            }
            None => None,
        };
        Ok((frame, mask))
    }
}
