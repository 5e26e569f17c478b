//! Image files and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use painterly::image::{BinaryMask, Image};
use tempfile::NamedTempFile;

use crate::CliError;

pub fn read_image(path: &Path) -> Result<Image, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Io(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    Ok(BinaryMask::from_image(&read_image(path)?))
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pnm")
    )
}

/// 8-bit RGB; binary PPM when the extension asks for it, PNG otherwise.
pub fn encode_rgb(width: usize, height: usize, rgb: &[u8], path: &Path) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    let (w, h) = (width as u32, height as u32);
    let res = if is_pnm(path) {
        PnmEncoder::new(&mut buf)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(rgb, w, h, ExtendedColorType::Rgb8)
    } else {
        PngEncoder::new(&mut buf).write_image(rgb, w, h, ExtendedColorType::Rgb8)
    };
    res.map_err(|e| CliError::Io(format!("cannot encode {}: {e}", path.display())))?;
    Ok(buf)
}

pub fn encode_gray(width: usize, height: usize, luma: &[u8], path: &Path) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(luma, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| CliError::Io(format!("cannot encode {}: {e}", path.display())))?;
    Ok(buf)
}

pub fn write_image(img: &Image, path: &Path) -> Result<(), CliError> {
    let bytes = encode_rgb(img.width(), img.height(), &img.to_rgb8(), path)?;
    write_atomic(path, &bytes)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}
