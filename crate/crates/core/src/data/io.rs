use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use walkdir::WalkDir;

use super::sample::{GrayImage, Mask, Sample, Source};
use crate::error::{Error, Result};

/// File that marks a directory as generator output: unmasked images in it
/// load as [`Source::Synthetic`].
pub const SYNTHETIC_MANIFEST: &str = "synthetic.toml";

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Mask files are `<stem><suffix>.<ext>` or `<stem><suffix>_<n>.<ext>`.
    pub mask_suffix: String,
    /// Target `(width, height)`; `None` keeps the native size.
    pub size: Option<(usize, usize)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            mask_suffix: "_mask".into(),
            size: Some((256, 256)),
        }
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Returns the image stem a mask file belongs to, if `stem` names a mask.
fn mask_owner<'a>(stem: &'a str, suffix: &str) -> Option<&'a str> {
    if let Some(base) = stem.strip_suffix(suffix) {
        return Some(base);
    }
    let (head, tail) = stem.rsplit_once('_')?;
    if !tail.is_empty() && tail.bytes().all(|b| b.is_ascii_digit()) {
        return head.strip_suffix(suffix);
    }
    None
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|m| Error::item(path, m))
}

/// Decodes any supported raster format from memory.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<DynamicImage, String> {
    image::load_from_memory(bytes).map_err(|e| e.to_string())
}

/// Luminance in `[0, 1]`.
pub fn to_gray(img: &DynamicImage) -> GrayImage {
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    GrayImage {
        width: w as usize,
        height: h as usize,
        data: luma.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

/// Binarizes a mask image: 0/1-valued files keep their values, 8-bit
/// masks threshold at 128.
pub fn to_mask(img: &DynamicImage) -> Mask {
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    let raw = luma.into_raw();
    let max = raw.iter().copied().max().unwrap_or(0);
    let threshold = if max <= 1 { 1 } else { 128 };
    Mask {
        width: w as usize,
        height: h as usize,
        data: raw.into_iter().map(|v| (v >= threshold) as u8).collect(),
    }
}

/// Bilinear resize.
pub fn resize_image(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if (img.width, img.height) == (width, height) {
        return img.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("buffer matches dimensions");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    GrayImage {
        width,
        height,
        data: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

/// Nearest-neighbour resize, so masks stay binary.
pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    if (mask.width, mask.height) == (width, height) {
        return mask.clone();
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, mask.data.clone())
            .expect("buffer matches dimensions");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Nearest);
    Mask {
        width,
        height,
        data: out.into_raw(),
    }
}

struct Entry {
    image: Option<PathBuf>,
    masks: Vec<PathBuf>,
}

/// Loads every image under `root` (recursively) with its masks.
///
/// Multiple masks for one image are OR-merged. Images with at least one
/// mask are labeled; images without one are unlabeled, or synthetic when
/// their directory holds a [`SYNTHETIC_MANIFEST`]. Ids are file stems and
/// must be unique; the result is sorted by id.
pub fn load_directory(root: &Path, opts: &LoadOptions) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for item in WalkDir::new(root).sort_by_file_name() {
        let item = item.map_err(|e| Error::item(root, e.to_string()))?;
        let path = item.path();
        if !item.file_type().is_file() || !is_image_file(path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::item(path, "file name is not valid UTF-8"))?;
        match mask_owner(stem, &opts.mask_suffix) {
            Some(owner) => entries
                .entry(owner.to_string())
                .or_insert(Entry {
                    image: None,
                    masks: Vec::new(),
                })
                .masks
                .push(path.to_path_buf()),
            None => {
                let e = entries.entry(stem.to_string()).or_insert(Entry {
                    image: None,
                    masks: Vec::new(),
                });
                if let Some(prev) = &e.image {
                    return Err(Error::item(
                        path,
                        format!("duplicate image id {stem} (also {})", prev.display()),
                    ));
                }
                e.image = Some(path.to_path_buf());
            }
        }
    }
    let mut samples = Vec::with_capacity(entries.len());
    for (id, entry) in entries {
        let Some(image_path) = entry.image else {
            let orphan = &entry.masks[0];
            return Err(Error::item(orphan, format!("mask has no image named {id}")));
        };
        let image = to_gray(&open_image(&image_path)?);
        let mut mask: Option<Mask> = None;
        for mpath in &entry.masks {
            let m = to_mask(&open_image(mpath)?);
            if (m.width, m.height) != (image.width, image.height) {
                return Err(Error::item(
                    mpath,
                    format!(
                        "mask is {}x{} but image is {}x{}",
                        m.width, m.height, image.width, image.height
                    ),
                ));
            }
            mask = Some(match mask {
                Some(acc) => acc.union(&m)?,
                None => m,
            });
        }
        let (image, mask) = match opts.size {
            Some((w, h)) => (resize_image(&image, w, h), mask.map(|m| resize_mask(&m, w, h))),
            None => (image, mask),
        };
        let source = if mask.is_some() {
            Source::RealLabeled
        } else if image_path
            .parent()
            .map(|d| d.join(SYNTHETIC_MANIFEST).is_file())
            .unwrap_or(false)
        {
            Source::Synthetic
        } else {
            Source::RealUnlabeled
        };
        samples.push(Sample::new(id, image, mask, source)?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    Ok(samples)
}

/// 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    image::save_buffer(path, pixels, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::item(path, e.to_string()))
}

/// Writes `<id>.png` and, when present, `<id><suffix>.png` (0/255) into `dir`.
pub fn write_sample(dir: &Path, sample: &Sample, mask_suffix: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = sample.size();
    save_gray_png(&dir.join(format!("{}.png", sample.id)), w, h, &sample.image.to_u8())?;
    if let Some(m) = &sample.mask {
        let px: Vec<u8> = m.data.iter().map(|&v| v * 255).collect();
        save_gray_png(&dir.join(format!("{}{mask_suffix}.png", sample.id)), w, h, &px)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_names() {
        assert_eq!(mask_owner("benign (1)_mask", "_mask"), Some("benign (1)"));
        assert_eq!(mask_owner("benign (1)_mask_2", "_mask"), Some("benign (1)"));
        assert_eq!(mask_owner("benign (1)", "_mask"), None);
        assert_eq!(mask_owner("a_b", "_mask"), None);
        assert_eq!(mask_owner("x_seg", "_seg"), Some("x"));
    }

    #[test]
    fn nearest_resize_keeps_masks_binary() {
        let m = Mask::new(4, 4, (0..16).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let r = resize_mask(&m, 7, 9);
        assert_eq!((r.width, r.height), (7, 9));
        assert!(r.data.iter().all(|&v| v <= 1));
    }
}
