use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Sample;

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 3×H×W in [0, 1]; 8- and 16-bit inputs are normalized by their full range.
pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open(path.as_ref())?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c]
    }))
}

/// 1×H×W in [0, 1].
pub fn read_png_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open(path.as_ref())?.to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new([1, h, w], img.into_raw())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape(
            "write_rgb_png",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| to_u8(t.data()[ch * h * w + p])))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes channel 0 of a 1×H×W map as 8-bit grayscale.
pub fn write_gray_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (_, h, w) = t.dims3()?;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(t.data()[y as usize * w + x as usize])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `(image, gt)` path pairs, resolved against the manifest's directory.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(img), Some(gt), None) if !img.is_empty() && !gt.is_empty() => {
                pairs.push((base.join(img), base.join(gt)));
            }
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: expected `image<TAB>gt`, got {line:?}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(pairs)
}

/// Decodes every pair of a manifest. Ground truth is binarized at 0.5.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (img_path, gt_path) in read_manifest(manifest)? {
        for p in [&img_path, &gt_path] {
            if !p.is_file() {
                return Err(Error::Data(format!("missing file {}", p.display())));
            }
        }
        let image = read_png_rgb(&img_path)?;
        let gt = read_png_gray(&gt_path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        if gt.shape()[1..] != image.shape()[1..] {
            return Err(Error::Data(format!(
                "{}: gt is {:?} but image {} is {:?}",
                gt_path.display(),
                &gt.shape()[1..],
                img_path.display(),
                &image.shape()[1..]
            )));
        }
        let id = img_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        samples.push(Sample::new(image, gt, id)?);
    }
    Ok(samples)
}

/// Writes `images/<id>.png`, `gt/<id>.png` and a `manifest.tsv` listing them.
/// Returns the manifest path.
pub fn write_samples(samples: &[Sample], out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    for sub in ["images", "gt"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let written: Vec<Result<()>> = crate::par::map_slice(samples, |s| {
        write_rgb_png(
            &s.image,
            out_dir.join("images").join(format!("{}.png", s.id)),
        )?;
        write_gray_png(&s.gt, out_dir.join("gt").join(format!("{}.png", s.id)))
    });
    written.into_iter().collect::<Result<()>>()?;
    let mut manifest = String::new();
    for s in samples {
        let _ = writeln!(manifest, "images/{0}.png\tgt/{0}.png", s.id);
    }
    let path = out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
