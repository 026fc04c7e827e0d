use super::EdgeMap;

/// Gradients with squared magnitude below this count as "no orientation".
const FLAT: f64 = 1e-18;

/// Sobel derivatives `(d/dy, d/dx)` with replicated borders.
pub fn sobel(map: &EdgeMap) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (map.height, map.width);
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        map.get(y, x) as f64
    };
    let mut gy = vec![0.0; h * w];
    let mut gx = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gy, gx)
}

/// Bilinear sample; zero outside the map.
fn sample(map: &EdgeMap, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= map.height as f64 || xx >= map.width as f64 {
            0.0
        } else {
            map.get(yy as usize, xx as usize) as f64
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * px(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Non-maximum suppression along the Sobel gradient direction.
///
/// A pixel survives unless one of its two interpolated neighbors one pixel
/// away along the gradient is strictly larger. Exact ties survive, and pixels
/// with no gradient (flat neighborhoods, ridge centers) always survive.
/// Survivors keep their value; suppressed pixels become 0.
pub fn nms_thin(map: &EdgeMap) -> EdgeMap {
    let (gy, gx) = sobel(map);
    let w = map.width;
    let mut out = map.clone();
    for y in 0..map.height {
        for x in 0..w {
            let i = y * w + x;
            let mag2 = gy[i] * gy[i] + gx[i] * gx[i];
            if mag2 <= FLAT {
                continue;
            }
            let mag = mag2.sqrt();
            let (dy, dx) = (gy[i] / mag, gx[i] / mag);
            let v = map.data[i] as f64;
            let ahead = sample(map, y as f64 + dy, x as f64 + dx);
            let behind = sample(map, y as f64 - dy, x as f64 - dx);
            if ahead > v || behind > v {
                out.data[i] = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> EdgeMap {
        EdgeMap::from_fn(h, w, f)
    }

    #[test]
    fn one_pixel_ridge_is_unchanged() {
        let m = map(7, 7, |_, x| if x == 3 { 1.0 } else { 0.0 });
        assert_eq!(nms_thin(&m), m);
        let diag = map(7, 7, |y, x| if y == x { 0.8 } else { 0.0 });
        assert_eq!(nms_thin(&diag), diag);
    }

    #[test]
    fn peaked_wide_ridge_thins_to_its_crest() {
        let profile = [0.0, 0.2, 0.6, 1.0, 0.6, 0.2, 0.0, 0.0];
        let m = map(6, 8, |_, x| profile[x]);
        let t = nms_thin(&m);
        for y in 0..6 {
            let kept: Vec<usize> = (0..8).filter(|&x| t.get(y, x) > 0.0).collect();
            assert_eq!(kept, vec![3]);
        }
    }

    #[test]
    fn constant_map_is_retained() {
        let m = map(5, 5, |_, _| 0.7);
        assert_eq!(nms_thin(&m), m);
    }

    #[test]
    fn flat_topped_ridge_keeps_its_plateau() {
        // Ties survive: the three plateau pixels all stay.
        let profile = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let m = map(5, 7, |_, x| profile[x]);
        assert_eq!(nms_thin(&m), m);
    }

    #[test]
    fn binary_maps_are_fixed_points() {
        let m = map(
            6,
            6,
            |y, x| if (y * 7 + x * 3) % 5 == 0 { 1.0 } else { 0.0 },
        );
        assert_eq!(nms_thin(&m), m);
    }
}
