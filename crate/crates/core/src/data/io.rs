use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::{resize_bilinear, resize_nearest, Dataset, ImageSample, SyntheticSpec, Task};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0,
    ))
}

fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = decode(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[0]) / 255.0
    }))
}

/// Loads `images_dir/*.{png,jpg}` paired with `masks_dir/<stem>.*` by filename stem.
///
/// Images are resized bilinearly and masks by nearest neighbour to `resolution`.
pub fn load_paired_dataset(
    images_dir: &Path,
    masks_dir: &Path,
    resolution: (usize, usize),
    task: Task,
) -> Result<Dataset> {
    let images = list_by_stem(images_dir)?;
    if images.is_empty() {
        return Err(Error::EmptyDirectory(images_dir.to_path_buf()));
    }
    let masks = list_by_stem(masks_dir)?;
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| Error::MissingMask { stem: stem.clone() })?;
        let image = resize_bilinear(&read_rgb(image_path)?, resolution).mapv(|v| v.clamp(0.0, 1.0));
        let mask = resize_nearest(&read_gray(mask_path)?, resolution);
        samples.push(ImageSample::new(stem.clone(), image, mask)?);
    }
    Dataset::new(samples, task)
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `root/images/<id>.png` and `root/masks/<id>.png`.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&masks_dir)?;
    for s in dataset.samples() {
        let (h, w) = s.resolution();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                to_u8(s.image[[y, x, 0]]),
                to_u8(s.image[[y, x, 1 % s.image.dim().2]]),
                to_u8(s.image[[y, x, 2 % s.image.dim().2]]),
            ])
        });
        let mask = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(s.mask[[y as usize, x as usize]])])
        });
        let img_path = images_dir.join(format!("{}.png", s.id));
        rgb.save(&img_path).map_err(|source| Error::Image {
            path: img_path,
            source,
        })?;
        let mask_path = masks_dir.join(format!("{}.png", s.id));
        mask.save(&mask_path).map_err(|source| Error::Image {
            path: mask_path,
            source,
        })?;
    }
    Ok(())
}

pub fn write_manifest(spec: &SyntheticSpec, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let text = serde_json::to_string_pretty(spec)?;
    fs::write(root.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}
