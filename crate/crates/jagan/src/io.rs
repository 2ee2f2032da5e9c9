//! PNG frames and frame directories.

use std::fs;
use std::path::{Path, PathBuf};

use jagan_core::Image;

use crate::error::{Error, Result};

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    Ok(Image::from_rgb8(
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
    ))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(
        path,
        &img.to_rgb8(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Name of frame `index` inside a frame directory.
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Numeric part of a frame file stem, e.g. `frame_00012` -> 12.
pub fn frame_number(stem: &str) -> Option<u64> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

/// PNG files of a directory in frame order: by trailing number when every
/// stem has one, by name otherwise.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    let numbers: Option<Vec<u64>> = paths.iter().map(|p| frame_number(&stem(p))).collect();
    if numbers.is_some() {
        paths.sort_by_key(|p| (frame_number(&stem(p)), p.clone()));
    } else {
        paths.sort();
    }
    Ok(paths)
}

/// Subdirectories of `dir`, sorted by name.
pub fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_frames(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Image>)> {
    let paths = list_pngs(dir)?;
    let frames = paths.iter().map(|p| read_png(p)).collect::<Result<_>>()?;
    Ok((paths, frames))
}

pub fn write_frames(dir: &Path, frames: &[Image]) -> Result<Vec<PathBuf>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(frame_name(i));
            write_png(&path, f).map(|_| path)
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}
