//! Dataset file formats: binary PPM images, PFM disparity maps, and
//! JSON-lines manifests.
//!
//! PPM is `P6`, maxval 255, rows top to bottom, values quantized
//! round-to-nearest from [0, 1]. PFM is grayscale `Pf` with scale `-1.0`
//! (little-endian), rows bottom to top, 32-bit floats — float-exact for
//! disparities. A manifest holds one JSON object per line with fields
//! `left`, `right`, optional `gt_disparity`, optional `baseline`/`focal`;
//! paths are resolved relative to the manifest's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{CameraModel, StereoSample};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Writes a 3xHxW image in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut payload = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                payload.push((image.at3(ch, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    (|| -> std::io::Result<()> {
        write!(out, "P6\n{w} {h}\n255\n")?;
        out.write_all(&payload)?;
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

fn read_token(reader: &mut impl Read, path: &Path) -> Result<String> {
    // whitespace-delimited token, skipping `#` comment lines
    let mut token = String::new();
    let mut in_comment = false;
    let mut byte = [0u8; 1];
    loop {
        let n = reader.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            if token.is_empty() {
                return Err(Error::format(path, "malformed header: unexpected end of file"));
            }
            return Ok(token);
        }
        let ch = byte[0] as char;
        if in_comment {
            if ch == '\n' {
                in_comment = false;
            }
            continue;
        }
        if ch == '#' && token.is_empty() {
            in_comment = true;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
    }
}

/// Reads a binary PPM into a 3xHxW tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let magic = read_token(&mut reader, path)?;
    if magic != "P6" {
        return Err(Error::format(path, format!("malformed header: magic {magic:?}, expected \"P6\"")));
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| Error::format(path, format!("malformed header: bad integer {tok:?}")))
    };
    let w = parse(read_token(&mut reader, path)?)?;
    let h = parse(read_token(&mut reader, path)?)?;
    let maxval = parse(read_token(&mut reader, path)?)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    let mut payload = vec![0u8; 3 * h * w];
    reader.read_exact(&mut payload).map_err(|_| {
        Error::format(path, format!("truncated payload: expected {} bytes", 3 * h * w))
    })?;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[(c * h + i) * w + j] = payload[(i * w + j) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

/// Writes an HxW map as grayscale PFM (little-endian, rows bottom to top).
pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.dims2()?;
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    (|| -> std::io::Result<()> {
        write!(out, "Pf\n{w} {h}\n-1.0\n")?;
        for i in (0..h).rev() {
            for j in 0..w {
                out.write_all(&(map.at2(i, j) as f32).to_le_bytes())?;
            }
        }
        out.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Reads a grayscale PFM into an HxW tensor.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let magic = read_token(&mut reader, path)?;
    if magic != "Pf" {
        return Err(Error::format(path, format!("malformed header: magic {magic:?}, expected \"Pf\"")));
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| Error::format(path, format!("malformed header: bad integer {tok:?}")))
    };
    let w = parse(read_token(&mut reader, path)?)?;
    let h = parse(read_token(&mut reader, path)?)?;
    let scale_tok = read_token(&mut reader, path)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::format(path, format!("malformed header: bad scale {scale_tok:?}")))?;
    if scale == 0.0 {
        return Err(Error::format(path, "malformed header: zero scale"));
    }
    let little_endian = scale < 0.0;
    let mut payload = vec![0u8; 4 * h * w];
    reader.read_exact(&mut payload).map_err(|_| {
        Error::format(path, format!("truncated payload: expected {} bytes", 4 * h * w))
    })?;
    let mut data = vec![0.0; h * w];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        if !v.is_finite() {
            return Err(Error::format(path, format!("non-finite value at index {k}")));
        }
        // rows are stored bottom to top
        let i = h - 1 - k / w;
        let j = k % w;
        data[i * w + j] = v as f64;
    }
    Ok(Tensor::from_parts(vec![h, w], data))
}

/// One dataset entry; paths are relative to the manifest file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub left: String,
    pub right: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_disparity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a JSON-lines manifest; parse failures name the line number.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads every sample referenced by a manifest. Missing files and
/// dimension mismatches between paired files are reported with the
/// manifest line that declared them.
pub fn load_samples(manifest_path: &Path) -> Result<Vec<StereoSample>> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        let line = idx + 1;
        let ctx = |message: String| Error::Manifest {
            path: manifest_path.to_path_buf(),
            line,
            message,
        };
        let resolve = |rel: &str| -> PathBuf { base.join(rel) };
        let left = read_ppm(&resolve(&entry.left)).map_err(|e| ctx(e.to_string()))?;
        let right = read_ppm(&resolve(&entry.right)).map_err(|e| ctx(e.to_string()))?;
        if left.shape() != right.shape() {
            return Err(ctx(format!(
                "dimension mismatch: left {:?} vs right {:?}",
                left.shape(),
                right.shape()
            )));
        }
        let gt_disparity_left = match &entry.gt_disparity {
            Some(rel) => {
                let gt = read_pfm(&resolve(rel)).map_err(|e| ctx(e.to_string()))?;
                let (h, w) = (left.shape()[1], left.shape()[2]);
                if gt.shape() != [h, w] {
                    return Err(ctx(format!(
                        "dimension mismatch: disparity {:?} vs image {h}x{w}",
                        gt.shape()
                    )));
                }
                Some(gt)
            }
            None => None,
        };
        let width = left.shape()[2];
        let default_cam = CameraModel::default_for_width(width);
        let camera = CameraModel::new(
            entry.baseline.unwrap_or(default_cam.baseline),
            entry.focal.unwrap_or(default_cam.focal),
        )
        .map_err(|e| ctx(e.to_string()))?;
        samples.push(StereoSample {
            left,
            right,
            gt_disparity_left,
            camera,
        });
    }
    Ok(samples)
}
