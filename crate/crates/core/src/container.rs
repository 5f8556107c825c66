//! On-disk volume formats: the QVOL1 container and binary PGM slice stacks.
//!
//! A QVOL1 file is one header line of compact JSON followed by the raw
//! little-endian payload, slice-major then row-major:
//!
//! ```text
//! {"magic":"QVOL1","dims":[w,h,n],"voxel_size_mm":[x,y,z],"dtype":"u16","byte_order":"little"}\n
//! <w*h*n samples>
//! ```
//!
//! The header must be byte-for-byte the canonical serialisation, so that a
//! loaded container always saves back to identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{Slice, Volume, VoxelSize};

pub const MAGIC: &str = "QVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ByteOrder {
    Little,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    dtype: Dtype,
    byte_order: ByteOrder,
}

/// Serialises `volume` as a QVOL1 container.
///
/// `u16` requires every value to be an integer in `0..=65535`; `f32` rounds
/// to the nearest single-precision value.
pub fn encode_container(volume: &Volume, dtype: Dtype) -> Result<Vec<u8>> {
    let (w, h, n) = volume.dims();
    let header = Header {
        magic: MAGIC.to_string(),
        dims: [w, h, n],
        voxel_size_mm: volume.voxel_size().0,
        dtype,
        byte_order: ByteOrder::Little,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(w * h * n * dtype.size());
    for (index, value) in volume.iter_pixels().enumerate() {
        match dtype {
            Dtype::U16 => {
                if value.fract() != 0.0 || value > u16::MAX as f64 {
                    return Err(Error::NotRepresentable { index, value });
                }
                out.extend_from_slice(&(value as u16).to_le_bytes());
            }
            Dtype::F32 => {
                let v = value as f32;
                if !v.is_finite() {
                    return Err(Error::NotRepresentable { index, value });
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a QVOL1 container.
pub fn decode_container(bytes: &[u8]) -> Result<(Volume, Dtype)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line".into()))?;
    let line = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    if !line.starts_with('{') {
        return Err(Error::MalformedHeader(format!(
            "expected a {MAGIC} JSON header line"
        )));
    }
    let header: Header =
        serde_json::from_str(line).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "magic is {:?}, expected {MAGIC:?}",
            header.magic
        )));
    }
    let canonical = serde_json::to_string(&header)?;
    if canonical != line {
        return Err(Error::MalformedHeader(format!(
            "header is not in canonical form; expected {canonical}"
        )));
    }
    let [w, h, n] = header.dims;
    if w == 0 || h == 0 || n == 0 {
        return Err(Error::MalformedHeader(format!(
            "dims must be positive, got {:?}",
            header.dims
        )));
    }
    let voxel = VoxelSize(header.voxel_size_mm);
    if !voxel.0.iter().all(|c| c.is_finite() && *c > 0.0) {
        return Err(Error::MalformedHeader(format!(
            "voxel_size_mm must be positive, got {:?}",
            voxel.0
        )));
    }

    let payload = &bytes[newline + 1..];
    let expected = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(n))
        .and_then(|p| p.checked_mul(header.dtype.size()))
        .ok_or_else(|| Error::MalformedHeader(format!("dims {:?} overflow", header.dims)))?;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    if let Some((index, &value)) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::InvalidPixel { index, value });
    }
    Ok((Volume::from_raw(w, h, n, data, voxel)?, header.dtype))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_container(volume: &Volume, dtype: Dtype, path: &Path) -> Result<()> {
    write_atomic(path, &encode_container(volume, dtype)?)
}

/// Decodes one binary (P5) PGM image. Samples are one byte when
/// `maxval < 256` and two big-endian bytes otherwise.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Slice> {
    let bad = |reason: &str| Error::MalformedPgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("no whitespace after maxval"));
    }
    pos += 1;

    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(bad("zero width or height"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let raster = &bytes[pos..];
    if raster.len() != w * h * sample {
        return Err(bad(&format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            w * h * sample
        )));
    }
    let pixels: Vec<f64> = if sample == 1 {
        raster.iter().map(|&b| b as f64).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    if pixels.iter().any(|&v| v > maxval as f64) {
        return Err(bad("sample exceeds maxval"));
    }
    Slice::new(w, h, pixels)
}

/// Encodes a slice as a 16-bit binary PGM.
pub fn encode_pgm16(slice: &Slice) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", slice.width(), slice.height()).into_bytes();
    for (index, &value) in slice.pixels().iter().enumerate() {
        if value.fract() != 0.0 || value > 65535.0 {
            return Err(Error::NotRepresentable { index, value });
        }
        out.extend_from_slice(&(value as u16).to_be_bytes());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceFormat {
    Qvol1 { dtype: Dtype },
    PgmStack { slices: usize },
}

#[derive(Debug, Clone)]
pub struct LoadedVolume {
    pub volume: Volume,
    pub format: SourceFormat,
    /// Lowercase hex SHA-256 of the input bytes.
    pub digest: String,
    pub warnings: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

const PGM_VOXEL_WARNING: &str =
    "PGM input carries no voxel geometry; assuming 1 mm isotropic voxels";

/// Loads a QVOL1 container, a single `.pgm` file, or a directory of `.pgm`
/// slices stacked in lexicographic file-name order.
pub fn load_volume(path: &Path) -> Result<LoadedVolume> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        return load_pgm_stack(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_pgm(path) {
        let slice = decode_pgm(&bytes, path)?;
        return Ok(LoadedVolume {
            volume: Volume::new(vec![slice], VoxelSize::ISOTROPIC_1MM)?,
            format: SourceFormat::PgmStack { slices: 1 },
            digest: sha256_hex(&bytes),
            warnings: vec![PGM_VOXEL_WARNING.into()],
        });
    }
    let (volume, dtype) = decode_container(&bytes)?;
    Ok(LoadedVolume {
        volume,
        format: SourceFormat::Qvol1 { dtype },
        digest: sha256_hex(&bytes),
        warnings: vec![],
    })
}

fn load_pgm_stack(dir: &Path) -> Result<LoadedVolume> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_pgm(p))
        .collect();
    if files.is_empty() {
        return Err(Error::EmptyStack(dir.to_path_buf()));
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    // The digest covers each file's name and content, in stack order.
    let mut hasher = Sha256::new();
    let mut slices: Vec<Slice> = Vec::with_capacity(files.len());
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        let slice = decode_pgm(&bytes, file)?;
        if let Some(first) = slices.first() {
            if (slice.width(), slice.height()) != (first.width(), first.height()) {
                return Err(Error::PgmDimensionMismatch {
                    path: file.clone(),
                    expected: (first.width(), first.height()),
                    found: (slice.width(), slice.height()),
                });
            }
        }
        let name = file.file_name().unwrap_or_default().as_encoded_bytes();
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        slices.push(slice);
    }
    let n = slices.len();
    Ok(LoadedVolume {
        volume: Volume::new(slices, VoxelSize::ISOTROPIC_1MM)?,
        format: SourceFormat::PgmStack { slices: n },
        digest: hex(&hasher.finalize()),
        warnings: vec![PGM_VOXEL_WARNING.into()],
    })
}
