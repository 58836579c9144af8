//! File helpers: JSON/TOML, PNG and digests.

use std::fs;
use std::path::Path;

use comface_core::config::ExperimentConfig;
use comface_core::image::Image;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            create_dir(parent)?;
        }
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::parse(path, e))
}

/// TOML for `.toml` files, JSON otherwise.
pub fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::parse(path, e))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

/// Parses and validates an experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = read_structured(path)?;
    config.validate()?;
    Ok(config)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_rgb8(h as usize, w as usize, img.as_raw()))
}

pub fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| Error::Invalid("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: "<memory>".into(), source })?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &png_bytes(img)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 5 * 4).map(|i| (i as f32 * 0.37).fract()).collect();
        let img = Image::from_planar(5, 4, data).quantized();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
