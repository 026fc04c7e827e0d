use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

use super::{AugmentPlan, Flip, Sample};

fn columns(t: &Tensor, x0: usize, x1: usize) -> Tensor {
    let (c, h, w) = t.dims3().expect("rank-3 tensor");
    let nw = x1 - x0;
    Tensor::from_fn([c, h, nw], |i| {
        let (ch, y, x) = (i / (h * nw), i / nw % h, i % nw);
        t.data()[(ch * h + y) * w + x0 + x]
    })
}

/// Left `[0, W/2)` and right `[W/2, W)` halves.
pub fn split_halves(sample: &Sample) -> Result<[Sample; 2]> {
    let w = sample.width();
    if w < 2 {
        return Err(Error::Data(format!(
            "{}: width {w} cannot be split",
            sample.id
        )));
    }
    let mid = w / 2;
    let half = |x0, x1, k| Sample {
        image: columns(&sample.image, x0, x1),
        gt: columns(&sample.gt, x0, x1),
        id: format!("{}#{k}", sample.id),
    };
    Ok([half(0, mid, 0), half(mid, w, 1)])
}

/// `(cos, sin)` with exact values at multiples of 90°.
fn cos_sin(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    match a {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let r = a.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// Rotates about the center of the central `crop × crop` window and returns
/// that window. The image is sampled bilinearly and the gt by nearest
/// neighbor; anything that maps outside the source is 0.
pub fn rotate_center_crop(sample: &Sample, angle_deg: f64, crop: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if crop == 0 || crop > h.min(w) {
        return Err(Error::Config(format!(
            "crop {crop} does not fit a {h}×{w} image"
        )));
    }
    let top = (h - crop) / 2;
    let left = (w - crop) / 2;
    let half = (crop as f64 - 1.0) / 2.0;
    let (cy, cx) = (top as f64 + half, left as f64 + half);
    let (cos, sin) = cos_sin(angle_deg);

    // Output pixel (y, x) reads the source at center + R(-θ)·offset.
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - half, x as f64 - half);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    };
    let read = |t: &Tensor, ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            t.data()[(ch * h + y as usize) * w + x as usize] as f64
        }
    };

    let image = Tensor::from_fn([3, crop, crop], |i| {
        let (ch, y, x) = (i / (crop * crop), i / crop % crop, i % crop);
        let (sy, sx) = source(y, x);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut v = 0.0;
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wy * wx != 0.0 {
                    v += wy * wx * read(&sample.image, ch, y0 + oy, x0 + ox);
                }
            }
        }
        v as f32
    });
    let gt = Tensor::from_fn([1, crop, crop], |i| {
        let (sy, sx) = source(i / crop, i % crop);
        read(&sample.gt, 0, sy.round() as isize, sx.round() as isize) as f32
    });
    Ok(Sample {
        image,
        gt,
        id: sample.id.clone(),
    })
}

/// `in^g` elementwise.
pub fn gamma_correct(image: &Tensor, g: f64) -> Tensor {
    image.map(|v| (v as f64).powf(g) as f32)
}

pub fn flip(t: &Tensor, f: Flip) -> Tensor {
    let (c, h, w) = t.dims3().expect("rank-3 tensor");
    match f {
        Flip::Identity => t.clone(),
        Flip::Horizontal => Tensor::from_fn([c, h, w], |i| {
            let (row, x) = (i / w, i % w);
            t.data()[row * w + (w - 1 - x)]
        }),
        Flip::Vertical => Tensor::from_fn([c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), i / w % h, i % w);
            t.data()[(ch * h + (h - 1 - y)) * w + x]
        }),
    }
}

/// All `plan.factor()` variants of one source, in a fixed order.
pub fn expand(sample: &Sample, plan: &AugmentPlan) -> Result<Vec<Sample>> {
    plan.validate()?;
    let parts = if plan.split {
        split_halves(sample)?.to_vec()
    } else {
        vec![Sample {
            id: format!("{}#0", sample.id),
            ..sample.clone()
        }]
    };
    let mut out = Vec::with_capacity(plan.factor());
    for part in &parts {
        let base = rotate_center_crop(part, 0.0, plan.crop_size)?;
        let mut variants = vec![(format!("{}.orig", part.id), base.clone())];
        for &angle in &plan.rotations {
            variants.push((
                format!("{}.rot{angle}", part.id),
                rotate_center_crop(part, angle, plan.crop_size)?,
            ));
        }
        for &g in &plan.gammas {
            let image = gamma_correct(&base.image, g);
            variants.push((
                format!("{}.gamma{g:.4}", part.id),
                Sample {
                    image,
                    ..base.clone()
                },
            ));
        }
        for (id, v) in variants {
            for &f in &plan.flips {
                out.push(Sample {
                    image: flip(&v.image, f),
                    gt: flip(&v.gt, f),
                    id: format!("{id}.flip{}", f.tag()),
                });
            }
        }
    }
    Ok(out)
}

/// [`expand`] over many sources, one source per task.
pub fn expand_all(sources: &[Sample], plan: &AugmentPlan) -> Result<Vec<Sample>> {
    plan.validate()?;
    let parts = par::map_slice(sources, |s| expand(s, plan));
    let mut out = Vec::with_capacity(sources.len() * plan.factor());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
