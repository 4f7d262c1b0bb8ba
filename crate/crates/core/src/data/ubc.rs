//! UBC-style patch container.
//!
//! A directory holds `info.txt`, one line `point_id other` per patch, and
//! bitmaps `patches0000.bmp`, `patches0001.bmp`, … of 1024×1024 grayscale
//! pixels. Each bitmap is a 16×16 grid of 64×64 patches filled row by row.
//! Patches are box-averaged 2×2 down to 32×32 on load.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat};

use super::PatchBatch;
use crate::error::{Error, Result};

/// Side of a stored patch in pixels.
pub const UBC_PATCH: usize = 64;
/// Patches per bitmap row and column.
pub const UBC_TILES: usize = 16;

const SHEET: usize = UBC_PATCH * UBC_TILES;
const PER_SHEET: usize = UBC_TILES * UBC_TILES;
const INFO: &str = "info.txt";

fn sheet_name(k: usize) -> String {
    format!("patches{k:04}.bmp")
}

fn parse_info(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let bad = || Error::format(path, format!("line {}: expected `point_id value`, got {line:?}", lineno + 1));
        let id: u32 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let _: i64 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::format(path, "no patches listed"));
    }
    Ok(ids)
}

/// Reads a container directory into 32×32 patches.
pub fn read_ubc(dir: &Path) -> Result<PatchBatch> {
    if !dir.is_dir() {
        return Err(Error::format(dir, "not a patch container directory"));
    }
    let info = dir.join(INFO);
    if !info.is_file() {
        return Err(Error::format(dir, format!("missing {INFO}")));
    }
    let ids = parse_info(&info)?;
    let out = UBC_PATCH / 2;
    let mut patches = Vec::with_capacity(ids.len() * out * out);
    for sheet in 0..ids.len().div_ceil(PER_SHEET) {
        let path = dir.join(sheet_name(sheet));
        if !path.is_file() {
            return Err(Error::format(
                &path,
                format!("missing bitmap for patch offset {}", sheet * PER_SHEET),
            ));
        }
        let img = image::open(&path)
            .map_err(|e| Error::format(&path, format!("unreadable bitmap: {e}")))?
            .to_luma8();
        if img.width() as usize != SHEET || img.height() as usize != SHEET {
            return Err(Error::format(
                &path,
                format!(
                    "tile grid must be {SHEET}x{SHEET}, got {}x{} (patch offset {})",
                    img.width(),
                    img.height(),
                    sheet * PER_SHEET
                ),
            ));
        }
        let raw = img.as_raw();
        let count = (ids.len() - sheet * PER_SHEET).min(PER_SHEET);
        for t in 0..count {
            let (y0, x0) = ((t / UBC_TILES) * UBC_PATCH, (t % UBC_TILES) * UBC_PATCH);
            for i in 0..out {
                for j in 0..out {
                    let at = |y: usize, x: usize| raw[(y0 + y) * SHEET + x0 + x] as u32;
                    let s = at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1);
                    patches.push(s as f32 / (4.0 * 255.0));
                }
            }
        }
    }
    PatchBatch::new(out, patches, ids, dir.display().to_string())
}

/// Writes 64×64 patches into a container, quantizing to 8 bits.
pub fn write_ubc(dir: &Path, batch: &PatchBatch) -> Result<()> {
    if batch.size != UBC_PATCH {
        return Err(Error::invalid(format!(
            "container patches are {UBC_PATCH}x{UBC_PATCH}, batch has {}",
            batch.size
        )));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut info = String::new();
    for &id in &batch.identity {
        info.push_str(&format!("{id} 0\n"));
    }
    let info_path = dir.join(INFO);
    fs::write(&info_path, info).map_err(|e| Error::io(&info_path, e))?;
    for sheet in 0..batch.len().div_ceil(PER_SHEET) {
        let mut buf = vec![0u8; SHEET * SHEET];
        let count = (batch.len() - sheet * PER_SHEET).min(PER_SHEET);
        for t in 0..count {
            let p = batch.patch(sheet * PER_SHEET + t);
            let (y0, x0) = ((t / UBC_TILES) * UBC_PATCH, (t % UBC_TILES) * UBC_PATCH);
            for y in 0..UBC_PATCH {
                for x in 0..UBC_PATCH {
                    buf[(y0 + y) * SHEET + x0 + x] = (p[y * UBC_PATCH + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let path = dir.join(sheet_name(sheet));
        GrayImage::from_raw(SHEET as u32, SHEET as u32, buf)
            .expect("buffer sized to sheet")
            .save_with_format(&path, ImageFormat::Bmp)
            .map_err(|e| Error::format(&path, format!("cannot write bitmap: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_info_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_ubc(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(INFO), "1 0\n2\n").unwrap();
        let err = read_ubc(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_sheet_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(INFO), "1 0\n").unwrap();
        let err = read_ubc(dir.path()).unwrap_err().to_string();
        assert!(err.contains("patches0000.bmp") && err.contains("offset 0"), "{err}");
    }
}
