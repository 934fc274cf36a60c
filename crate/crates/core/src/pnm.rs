//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples, mapped to
//! `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |d: &str| Error::Format { path: path.to_path_buf(), detail: d.to_string() };
    let mut at = 0;
    let mut token = || -> Option<String> {
        loop {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < bytes.len() && bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
                continue;
            }
            break;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        (at > start).then(|| String::from_utf8_lossy(&bytes[start..at]).into_owned())
    };
    let channels = match token().as_deref() {
        Some("P5") => 1,
        Some("P6") => 3,
        _ => return Err(fail("not a binary PGM or PPM file")),
    };
    let mut num = || token().and_then(|t| t.parse::<usize>().ok());
    let (w, h, max) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(fail("malformed header")),
    };
    if w == 0 || h == 0 {
        return Err(fail("empty image"));
    }
    if max != 255 {
        return Err(fail("only 8-bit images (maxval 255) are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = &bytes[(at + 1).min(bytes.len())..];
    let n = h * w * channels;
    if data.len() < n {
        return Err(fail("truncated raster"));
    }
    let values = data[..n].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_vec(Shape::new(h, w, channels), values)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Quantises to 8 bits after clamping to `[0, 1]`.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    let magic = match s.c {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::dim("pnm_encode", format!("{c} channels, need 1 or 3"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode(img)?).map_err(|e| Error::io(path, e))
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm"))
}

/// Image files of a directory, sorted by name.
pub fn list_dir(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_image_path(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}
