//! Reference implementations written directly from the metric and transform
//! definitions: per-pixel loops, explicit searches, no shared helpers with the library.

#![allow(dead_code)]

use ndarray::{Array2, Array3};

pub const EPS: f64 = f64::EPSILON;

fn fg(g: f64) -> bool {
    g > 0.5
}

pub fn mae(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.nrows() {
        for j in 0..pred.ncols() {
            s += (pred[[i, j]] - gt[[i, j]]).abs();
        }
    }
    s / pred.len() as f64
}

/// (tp, fp, fn, tn) of `pred ≥ 0.5` against `gt > 0.5`.
pub fn counts(pred: &Array2<f64>, gt: &Array2<f64>) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fnn, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.nrows() {
        for j in 0..pred.ncols() {
            let p = pred[[i, j]] >= 0.5;
            let g = fg(gt[[i, j]]);
            if p && g {
                tp += 1.0;
            } else if p {
                fp += 1.0;
            } else if g {
                fnn += 1.0;
            } else {
                tn += 1.0;
            }
        }
    }
    (tp, fp, fnn, tn)
}

pub fn ber(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (tp, fp, fnn, tn) = counts(pred, gt);
    let pos = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 1.0 };
    let neg = if tn + fp > 0.0 { tn / (tn + fp) } else { 1.0 };
    100.0 * (1.0 - (pos + neg) / 2.0)
}

pub fn dice(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (tp, fp, fnn, _) = counts(pred, gt);
    if tp + fp + fnn == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fnn)
    }
}

pub fn iou(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (tp, fp, fnn, _) = counts(pred, gt);
    if tp + fp + fnn == 0.0 {
        1.0
    } else {
        tp / (tp + fp + fnn)
    }
}

// ---------------------------------------------------------------- S-measure

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn object(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let x = mean(v);
    2.0 * x / (x * x + 1.0 + sample_std(v) + EPS)
}

fn quadrant_ssim(p: &[f64], g: &[f64]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let x = mean(p);
    let y = mean(g);
    let d = if p.len() > 1 { n - 1.0 } else { 1.0 };
    let sx = p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d;
    let sy = g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d;
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (h, w) = pred.dim();
    let g = gt.mapv(|v| f64::from(u8::from(fg(v))));
    let y = g.mean().unwrap();
    if y == 0.0 {
        return 1.0 - pred.mean().unwrap();
    }
    if y == 1.0 {
        return pred.mean().unwrap();
    }
    let mut fgv = Vec::new();
    let mut bgv = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] == 1.0 {
                fgv.push(pred[[i, j]]);
            } else {
                bgv.push(1.0 - pred[[i, j]]);
            }
        }
    }
    let s_object = y * object(&fgv) + (1.0 - y) * object(&bgv);

    // Split point: 1-based, rounded mean foreground coordinates.
    let (mut sr, mut sc, mut k) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] == 1.0 {
                sr += i as f64;
                sc += j as f64;
                k += 1.0;
            }
        }
    }
    let cx = ((sc / k).round_ties_even() as usize + 1).min(w);
    let cy = ((sr / k).round_ties_even() as usize + 1).min(h);
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut s_region = 0.0;
    for (r0, r1, c0, c1) in quads {
        let (mut p, mut q) = (Vec::new(), Vec::new());
        for i in r0..r1 {
            for j in c0..c1 {
                p.push(pred[[i, j]]);
                q.push(g[[i, j]]);
            }
        }
        let weight = ((r1 - r0) * (c1 - c0)) as f64 / (h * w) as f64;
        s_region += weight * quadrant_ssim(&p, &q);
    }
    (0.5 * s_object + 0.5 * s_region).max(0.0)
}

// ---------------------------------------------------------------- E-measure

/// Mean over the 256 bin-centre thresholds of the mean enhanced-alignment matrix.
pub fn e_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    let g = gt.mapv(|v| f64::from(u8::from(fg(v))));
    let mg = g.sum() / n;
    let mut total = 0.0;
    for k in 0..256 {
        let t = (k as f64 + 0.5) / 256.0;
        let b = pred.mapv(|p| f64::from(u8::from(p >= t)));
        let score = if mg == 0.0 {
            b.iter().map(|v| 1.0 - v).sum::<f64>() / n
        } else if mg == 1.0 {
            b.sum() / n
        } else {
            let mb = b.sum() / n;
            let mut acc = 0.0;
            for (bv, gv) in b.iter().zip(g.iter()) {
                let (a, c) = (bv - mb, gv - mg);
                let xi = 2.0 * a * c / (a * a + c * c + EPS);
                acc += (1.0 + xi).powi(2) / 4.0;
            }
            acc / n
        };
        total += score;
    }
    total / 256.0
}

// ---------------------------------------------------------------- weighted F

/// Weighted F-beta with a 7×7, sigma 5 Gaussian (replicated borders) and a distance decay of 5.
pub fn weighted_f(pred: &Array2<f64>, gt: &Array2<f64>, beta2: f64) -> f64 {
    let (h, w) = pred.dim();
    let g = gt.mapv(fg);
    let fg_pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| g[[i, j]])
        .collect();
    if fg_pixels.is_empty() {
        return 0.0;
    }
    let e = Array2::from_shape_fn((h, w), |(i, j)| {
        (pred[[i, j]] - f64::from(u8::from(g[[i, j]]))).abs()
    });
    // Exhaustive nearest-foreground search; the first pixel in row-major order wins ties.
    let mut dist = Array2::zeros((h, w));
    let mut et = e.clone();
    for i in 0..h {
        for j in 0..w {
            let mut best = (f64::INFINITY, (0, 0));
            for &(a, b) in &fg_pixels {
                let d = ((i as f64 - a as f64).powi(2) + (j as f64 - b as f64).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, (a, b));
                }
            }
            dist[[i, j]] = best.0;
            et[[i, j]] = e[[best.1 .0, best.1 .1]];
        }
    }
    let sigma: f64 = 5.0;
    let mut kernel = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (y, x) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut ea = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (a, row) in kernel.iter().enumerate() {
                for (b, k) in row.iter().enumerate() {
                    let y = clamp(i as i64 + a as i64 - 3, h);
                    let x = clamp(j as i64 + b as i64 - 3, w);
                    acc += k / ksum * et[[y, x]];
                }
            }
            ea[[i, j]] = acc;
        }
    }
    let (mut ew_fg, mut ew_bg, mut n_fg) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] {
                let m = if ea[[i, j]] < e[[i, j]] {
                    ea[[i, j]]
                } else {
                    e[[i, j]]
                };
                ew_fg += m;
                n_fg += 1.0;
            } else {
                let importance = 2.0 - (0.5f64.ln() / 5.0 * dist[[i, j]]).exp();
                ew_bg += e[[i, j]] * importance;
            }
        }
    }
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (EPS + tpw + ew_bg);
    (1.0 + beta2) * r * p / (EPS + r + beta2 * p)
}

// ---------------------------------------------------------------- HFC

/// Direct O(N⁴) DFT, zeroing of the centred `⌊tau·H⌋×⌊tau·W⌋` block after an
/// fftshift, then direct inverse summation. Single channel.
pub fn hfc_direct(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    use std::f64::consts::PI;
    let (h, w) = x.dim();
    let mut re = Array2::<f64>::zeros((h, w));
    let mut im = Array2::<f64>::zeros((h, w));
    for u in 0..h {
        for v in 0..w {
            for a in 0..h {
                for b in 0..w {
                    let ang = -2.0
                        * PI
                        * (u as f64 * a as f64 / h as f64 + v as f64 * b as f64 / w as f64);
                    re[[u, v]] += x[[a, b]] * ang.cos();
                    im[[u, v]] += x[[a, b]] * ang.sin();
                }
            }
        }
    }
    let mh = (tau * h as f64).floor() as usize;
    let mw = (tau * w as f64).floor() as usize;
    let (ch, cw) = (h / 2, w / 2);
    for su in (ch - mh / 2)..(ch - mh / 2 + mh) {
        for sv in (cw - mw / 2)..(cw - mw / 2 + mw) {
            // Shifted index s holds unshifted bin (s − n/2) mod n.
            let u = (su + h - ch) % h;
            let v = (sv + w - cw) % w;
            re[[u, v]] = 0.0;
            im[[u, v]] = 0.0;
        }
    }
    let mut out = Array2::zeros((h, w));
    for a in 0..h {
        for b in 0..w {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let ang = 2.0
                        * PI
                        * (u as f64 * a as f64 / h as f64 + v as f64 * b as f64 / w as f64);
                    acc += re[[u, v]] * ang.cos() - im[[u, v]] * ang.sin();
                }
            }
            out[[a, b]] = acc / (h * w) as f64;
        }
    }
    out
}

pub fn channel(img: &Array3<f64>, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((img.dim().0, img.dim().1), |(i, j)| img[[i, j, c]])
}
