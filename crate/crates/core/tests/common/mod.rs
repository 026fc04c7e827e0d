//! Naive reference implementations and a finite-difference checker shared by
//! the integration suites.
#![allow(dead_code)]

use edgemix::evalkit::{BinaryMap, EdgeMap, EvalConfig, MatchCounts};
use edgemix::params::{Bound, ParamStore};
use edgemix::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}

// ---------------------------------------------------------------- kernels

/// Cross-correlation with zero padding, one output element at a time.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for p in 0..k {
                        for q in 0..k {
                            let y = (i * stride + p) as isize - pad as isize;
                            let xx = (j * stride + q) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += w.data()[((o * ci + c) * k + p) * k + q]
                                    * x.data()[(c * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new([co, oh, ow], out).unwrap()
}

/// Bilinear resize with half-pixel centers, source index clamped at 0 and
/// at the last row/column.
pub fn naive_upsample(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let coord = |o: usize, n: usize| {
        let src = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = vec![0.0; c * h * s * w * s];
    for ch in 0..c {
        for oy in 0..h * s {
            let (y0, y1, fy) = coord(oy, h);
            for ox in 0..w * s {
                let (x0, x1, fx) = coord(ox, w);
                let at = |y: usize, xx: usize| x.data()[(ch * h + y) * w + xx];
                out[(ch * h * s + oy) * w * s + ox] = (1.0 - fy)
                    * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    Tensor::new([c, h * s, w * s], out).unwrap()
}

/// Per-pixel, per-head windowed attention. Returns the C×H×W output and the
/// weights laid out `[pixel][head][slot]`, zero at clipped slots.
pub fn naive_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    radius: usize,
) -> (Tensor<f64>, Vec<f64>) {
    let (c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let d = c / heads;
    let side = 2 * radius + 1;
    let r = radius as isize;
    let at = |t: &Tensor<f64>, ch: usize, y: usize, x: usize| t.data()[(ch * h + y) * w + x];
    let mut out = vec![0.0; c * h * w];
    let mut weights = vec![0.0; h * w * heads * side * side];
    for i in 0..h {
        for j in 0..w {
            for n in 0..heads {
                let mut logits = Vec::new();
                for a in -r..=r {
                    for b in -r..=r {
                        let (y, x) = (i as isize + a, j as isize + b);
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        let (y, x) = (y as usize, x as usize);
                        let dot: f64 = (0..d)
                            .map(|t| at(q, n * d + t, i, j) * at(k, n * d + t, y, x))
                            .sum();
                        let slot = ((a + r) as usize) * side + (b + r) as usize;
                        logits.push((slot, y, x, dot / (d as f64).sqrt()));
                    }
                }
                let z: f64 = logits.iter().map(|l| l.3.exp()).sum();
                for &(slot, y, x, l) in &logits {
                    let a = l.exp() / z;
                    weights[((i * w + j) * heads + n) * side * side + slot] = a;
                    for t in 0..d {
                        out[((n * d + t) * h + i) * w + j] += a * at(v, n * d + t, y, x);
                    }
                }
            }
        }
    }
    (Tensor::new([c, h, w], out).unwrap(), weights)
}

// ----------------------------------------------------- finite differences

fn project_to_scalar(tape: &mut Tape<f64>, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(0xfeed);
    let weights = tape.constant(Tensor::rand_uniform(shape, -1.0, 1.0, &mut r));
    let prod = tape.mul(out, weights).unwrap();
    tape.sum(prod)
}

/// Relative error (vector norm) between analytic and central-difference
/// gradients of `sum(f(inputs) * R)` for a fixed random `R`, one entry per input.
pub fn fd_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> Vec<f64> {
    const EPS: f64 = 1e-3;
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let loss = project_to_scalar(&mut tape, out);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().data().to_vec())
        .collect();

    let mut errs = Vec::new();
    for (n, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[n].data_mut()[e] += EPS;
            let (t, _, l) = eval(&xs);
            let up = t.value(l).data()[0];
            xs[n].data_mut()[e] -= 2.0 * EPS;
            let (t, _, l) = eval(&xs);
            let down = t.value(l).data()[0];
            *slot = (up - down) / (2.0 * EPS);
        }
        errs.push(rel_err(&analytic[n], &numeric));
    }
    errs
}

/// Like [`fd_check`] but perturbs parameters of a store; `pick` lists
/// `(parameter index, element index)` pairs to check. Returns per-entry
/// `(analytic, numeric)`.
pub fn fd_check_store(
    store: &ParamStore<f64>,
    pick: &[(usize, usize)],
    f: impl Fn(&mut Tape<f64>, &Bound) -> Var,
) -> Vec<(f64, f64)> {
    const EPS: f64 = 1e-3;
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let loss = f(&mut tape, &p);
        (tape, p, loss)
    };
    let (mut tape, p, loss) = eval(store);
    assert_eq!(tape.shape(loss), [1], "loss must be scalar");
    tape.backward(loss).unwrap();
    let grads = p.grads(&tape);
    let ids: Vec<_> = store.ids().collect();
    pick.iter()
        .map(|&(pi, e)| {
            let mut s = store.clone();
            s.get_mut(ids[pi]).data_mut()[e] += EPS;
            let (t, _, l) = eval(&s);
            let up = t.value(l).data()[0];
            s.get_mut(ids[pi]).data_mut()[e] -= 2.0 * EPS;
            let (t, _, l) = eval(&s);
            let down = t.value(l).data()[0];
            (grads[pi].data()[e], (up - down) / (2.0 * EPS))
        })
        .collect()
}

pub fn scalar_rel(a: f64, n: f64) -> f64 {
    let m = a.abs().max(n.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - n).abs() / m
    }
}

// ------------------------------------------------------------- evaluation

/// Non-maximum suppression written from scratch: Sobel with replicated
/// borders, unit gradient direction, bilinear neighbors (zero outside),
/// suppression only when a neighbor is strictly larger.
pub fn naive_thin(m: &EdgeMap) -> Vec<f64> {
    let (h, w) = (m.height as isize, m.width as isize);
    let px =
        |y: isize, x: isize| m.data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize] as f64;
    let zero_px = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h || x >= w {
            0.0
        } else {
            m.data[(y * w + x) as usize] as f64
        }
    };
    let bilinear = |y: f64, x: f64| {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut s = 0.0;
        if (1.0 - fy) * (1.0 - fx) != 0.0 {
            s += (1.0 - fy) * (1.0 - fx) * zero_px(y0, x0);
        }
        if (1.0 - fy) * fx != 0.0 {
            s += (1.0 - fy) * fx * zero_px(y0, x0 + 1);
        }
        if fy * (1.0 - fx) != 0.0 {
            s += fy * (1.0 - fx) * zero_px(y0 + 1, x0);
        }
        if fy * fx != 0.0 {
            s += fy * fx * zero_px(y0 + 1, x0 + 1);
        }
        s
    };
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let gx = px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1)
                - px(y - 1, x - 1)
                - 2.0 * px(y, x - 1)
                - px(y + 1, x - 1);
            let gy = px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1)
                - px(y - 1, x - 1)
                - 2.0 * px(y - 1, x)
                - px(y - 1, x + 1);
            let v = px(y, x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag * mag <= 1e-18 {
                out.push(v);
                continue;
            }
            let (dy, dx) = (gy / mag, gx / mag);
            let fwd = bilinear(y as f64 + dy, x as f64 + dx);
            let back = bilinear(y as f64 - dy, x as f64 - dx);
            out.push(if fwd > v || back > v { 0.0 } else { v });
        }
    }
    out
}

/// Largest one-to-one matching within `radius`, by exhaustive search.
pub fn exhaustive_matching(pred: &[(isize, isize)], gt: &[(isize, isize)], radius: f64) -> usize {
    fn go(
        i: usize,
        pred: &[(isize, isize)],
        gt: &[(isize, isize)],
        used: &mut Vec<bool>,
        r2: f64,
    ) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, used, r2);
        for g in 0..gt.len() {
            let (dy, dx) = (pred[i].0 - gt[g].0, pred[i].1 - gt[g].1);
            if !used[g] && ((dy * dy + dx * dx) as f64) <= r2 {
                used[g] = true;
                best = best.max(1 + go(i + 1, pred, gt, used, r2));
                used[g] = false;
            }
        }
        best
    }
    go(0, pred, gt, &mut vec![false; gt.len()], radius * radius)
}

pub fn points(data: &[bool], w: usize) -> Vec<(isize, isize)> {
    data.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| ((i / w) as isize, (i % w) as isize))
        .collect()
}

#[derive(Debug)]
pub struct OracleReport {
    /// `[threshold][image]` counts.
    pub counts: Vec<Vec<MatchCounts>>,
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
}

fn oracle_f(c: &MatchCounts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

/// ODS/OIS/AP by naive loops: thin, binarize, exhaustive matching, sweep.
pub fn oracle_evaluate(preds: &[EdgeMap], gts: &[BinaryMap], cfg: &EvalConfig) -> OracleReport {
    let thinned: Vec<Vec<f64>> = preds.iter().map(naive_thin).collect();
    let mut counts = Vec::new();
    for &t in &cfg.thresholds {
        let mut row = Vec::new();
        for (i, gt) in gts.iter().enumerate() {
            let w = gt.width;
            let radius = cfg.maxdist * ((gt.height * gt.height + w * w) as f64).sqrt();
            let bin: Vec<bool> = thinned[i].iter().map(|&v| v >= t).collect();
            let pp = points(&bin, w);
            let gp = points(&gt.data, w);
            let tp = exhaustive_matching(&pp, &gp, radius);
            row.push(MatchCounts {
                tp,
                fp: pp.len() - tp,
                fn_: gp.len() - tp,
            });
        }
        counts.push(row);
    }
    let mut ods = -1.0;
    let mut ods_threshold = 0.0;
    let mut curve = Vec::new();
    for (ti, row) in counts.iter().enumerate() {
        let mut total = MatchCounts::default();
        for c in row {
            total.tp += c.tp;
            total.fp += c.fp;
            total.fn_ += c.fn_;
        }
        let (p, r, f) = oracle_f(&total);
        if f > ods {
            ods = f;
            ods_threshold = cfg.thresholds[ti];
        }
        if total.tp + total.fp > 0 {
            curve.push((r, p));
        }
    }
    let mut ois = 0.0;
    for i in 0..gts.len() {
        let mut best = -1.0;
        for row in &counts {
            best = f64::max(best, oracle_f(&row[i]).2);
        }
        ois += best;
    }
    ois /= gts.len() as f64;
    curve.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(b.1.partial_cmp(&a.1).unwrap())
    });
    let mut ap = 0.0;
    if let Some(&(_, p0)) = curve.first() {
        let mut prev = (0.0, p0);
        for &(r, p) in &curve {
            ap += (r - prev.0) * (p + prev.1) * 0.5;
            prev = (r, p);
        }
    }
    OracleReport {
        counts,
        ods,
        ods_threshold,
        ois,
        ap,
    }
}

/// A random toy dataset: `n` images of `size × size`, gt with sparse lines,
/// predictions noisy around the gt.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> (Vec<EdgeMap>, Vec<BinaryMap>) {
    let mut r = rng(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n {
        let gt = BinaryMap::from_fn(size, size, |_, _| false);
        let mut gt = gt;
        for v in gt.data.iter_mut() {
            *v = r.random_bool(0.3);
        }
        let data: Vec<f32> = gt
            .data
            .iter()
            .map(|&g| {
                let base: f32 = if g { 0.6 } else { 0.2 };
                (base + r.random_range(-0.3f32..0.4)).clamp(0.0, 1.0)
            })
            .collect();
        preds.push(EdgeMap::new(size, size, data).unwrap());
        gts.push(gt);
    }
    (preds, gts)
}
