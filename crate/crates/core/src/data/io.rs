//! Little-endian volume files:
//!
//! ```text
//! "HFTV" | version u8 | dtype u8 (1 = f32, 2 = u8) | rank u8 | extents u64 × rank
//! | spacing f32 × 3 | payload
//! ```
//!
//! Intensities (`[N, W, H, D]`, f32) and labels (`[W, H, D]`, u8) live in
//! separate files; a manifest lists `<sample-id> <intensities> <labels>` per line.

use std::path::{Path, PathBuf};

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::model::checkpoint::ByteReader;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"HFTV";
pub const VOLUME_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;

fn header(dtype: u8, shape: &[usize], spacing: [f64; 3]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VOLUME_MAGIC);
    out.push(VOLUME_VERSION);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

pub fn write_intensities(path: &Path, t: &Tensor<f32>, spacing: [f64; 3]) -> Result<()> {
    let mut out = header(DTYPE_F32, t.shape(), spacing);
    out.reserve(4 * t.numel());
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let mut out = header(DTYPE_U8, &labels.extents, labels.spacing);
    out.extend_from_slice(&labels.labels);
    std::fs::write(path, out)?;
    Ok(())
}

struct Header {
    shape: Vec<usize>,
    spacing: [f64; 3],
}

fn read_header(r: &mut ByteReader, dtype: u8, rank: usize) -> Result<Header> {
    r.magic(VOLUME_MAGIC)?;
    r.version(VOLUME_VERSION)?;
    let found = r.u8("dtype")?;
    if found != dtype {
        return r.fail(format!("dtype code {found}, expected {dtype}"));
    }
    let found = r.u8("rank")? as usize;
    if found != rank {
        return r.fail(format!("rank {found}, expected {rank}"));
    }
    let shape = (0..rank)
        .map(|_| r.u64("extent").map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return r.fail(format!("zero extent in {shape:?}"));
    }
    let s = r.f32s(3, "spacing")?;
    Ok(Header {
        shape,
        spacing: [s[0] as f64, s[1] as f64, s[2] as f64],
    })
}

pub fn read_intensities(path: &Path) -> Result<(Tensor<f32>, [f64; 3])> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let h = read_header(&mut r, DTYPE_F32, 4)?;
    let data = r.f32s(h.shape.iter().product(), "intensities")?;
    if !r.at_end() {
        return r.fail("trailing bytes after payload");
    }
    Ok((Tensor::new(h.shape, data)?, h.spacing))
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let h = read_header(&mut r, DTYPE_U8, 3)?;
    let labels = r.take(h.shape.iter().product(), "labels")?.to_vec();
    if !r.at_end() {
        return r.fail("trailing bytes after payload");
    }
    LabelVolume::new([h.shape[0], h.shape[1], h.shape[2]], h.spacing, labels)
}

pub fn write_sample(sample: &VolumeSample, intensities: &Path, labels: &Path) -> Result<()> {
    write_intensities(intensities, &sample.modalities, sample.spacing())?;
    write_labels(labels, &sample.labels)
}

pub fn read_sample(intensities: &Path, labels: &Path) -> Result<VolumeSample> {
    let (t, spacing) = read_intensities(intensities)?;
    let l = read_labels(labels)?;
    if spacing != l.spacing {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            detail: format!(
                "spacing {:?} differs from intensities {spacing:?}",
                l.spacing
            ),
        });
    }
    VolumeSample::new(t, l)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub intensities: PathBuf,
    pub labels: PathBuf,
}

/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, ip, lp] = fields[..] else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "line {}: expected `<id> <intensities> <labels>`",
                    lineno + 1
                ),
            });
        };
        out.push(ManifestEntry {
            id: id.to_string(),
            intensities: base.join(ip),
            labels: base.join(lp),
        });
    }
    Ok(out)
}

/// Writes entries with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let text: String = entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.id, rel(&e.intensities), rel(&e.labels)))
        .collect();
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<(String, VolumeSample)>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| Ok((e.id, read_sample(&e.intensities, &e.labels)?)))
        .collect()
}
