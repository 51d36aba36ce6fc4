//! Deterministic generators for the three task families.
//!
//! Difficulty constants:
//! - camouflage: phase-perturbation strength `1 − 0.85·difficulty` applied to a
//!   texture sharing the background's amplitude spectrum,
//! - shadow: multiplicative darkening factor `0.3 + 0.55·difficulty`,
//! - polyp: hue shift `0.04 + 0.2·(1 − difficulty)` turns.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use super::{Dataset, ImageSample, SyntheticSpec, Task};
use crate::error::{Error, Result};
use crate::spectral::{fft2, ifft2, signed_frequency};

const MAX_SHAPE_ATTEMPTS: usize = 200;

/// Generates `spec.count` samples, each from a generator keyed by `(seed, index)`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.count)
        .map(|i| {
            let mut rng = sample_rng(spec.seed, i);
            let (image, mask) = match spec.task {
                Task::Camouflage => camouflage(&mut rng, spec)?,
                Task::Shadow => shadow(&mut rng, spec)?,
                Task::Polyp => polyp(&mut rng, spec)?,
                Task::Generic => unreachable!("rejected by validate"),
            };
            ImageSample::new(format!("{}_{i:05}", spec.task), image, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, spec.task)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn white_noise(rng: &mut impl Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.sample(StandardNormal))
}

/// Zero-mean, unit-variance noise restricted to radial frequencies in `[lo, hi]` cycles/pixel.
fn band_limited_noise(rng: &mut impl Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
    let mut spec = fft2(&white_noise(rng, h, w));
    for ((u, v), c) in spec.indexed_iter_mut() {
        let fy = signed_frequency(u, h) as f64 / h as f64;
        let fx = signed_frequency(v, w) as f64 / w as f64;
        let r = (fy * fy + fx * fx).sqrt();
        if r < lo || r > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    let field = ifft2(&spec).mapv(|c| c.re);
    let mean = field.mean().unwrap_or(0.0);
    let std = field
        .mapv(|v| (v - mean).powi(2))
        .mean()
        .unwrap_or(0.0)
        .sqrt();
    field.mapv(|v| (v - mean) / std.max(1e-12))
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn area_fraction(mask: &Array2<f64>) -> f64 {
    mask.sum() / mask.len() as f64
}

fn target_area(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let margin = 0.1 * (hi - lo);
    if hi - lo > 1e-9 {
        rng.random_range(lo + margin..=hi - margin)
    } else {
        lo
    }
}

fn in_range(frac: f64, (lo, hi): (f64, f64)) -> bool {
    frac > 0.0 && frac >= lo && frac <= hi
}

fn shape_error(spec: &SyntheticSpec) -> Error {
    Error::InvalidArgument(format!(
        "could not draw a {} mask with area fraction in {:?} at {:?}",
        spec.task, spec.area_range, spec.resolution
    ))
}

/// Smooth star-shaped region `ρ ≤ R·(1 + Σ a_k cos(kθ + φ_k))`.
fn star_blob(rng: &mut impl Rng, spec: &SyntheticSpec) -> Result<Array2<f64>> {
    let (h, w) = spec.resolution;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let harmonics: Vec<(f64, f64)> = (2..=4)
            .map(|_| (rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let energy: f64 = harmonics.iter().map(|(a, _)| a * a).sum();
        let area = target_area(rng, spec.area_range) * (h * w) as f64;
        let radius = (area / (PI * (1.0 + 0.5 * energy))).sqrt();
        let reach = radius * (1.0 + harmonics.iter().map(|(a, _)| a).sum::<f64>());
        if 2.0 * reach + 2.0 > h.min(w) as f64 {
            continue;
        }
        let cy = rng.random_range(reach + 1.0..=h as f64 - reach - 1.0);
        let cx = rng.random_range(reach + 1.0..=w as f64 - reach - 1.0);
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let theta = dy.atan2(dx);
            let r = radius
                * (1.0
                    + harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, phi))| a * ((k as f64 + 2.0) * theta + phi).cos())
                        .sum::<f64>());
            f64::from(u8::from((dy * dy + dx * dx).sqrt() <= r))
        });
        if in_range(area_fraction(&mask), spec.area_range) {
            return Ok(mask);
        }
    }
    Err(shape_error(spec))
}

fn camouflage(rng: &mut impl Rng, spec: &SyntheticSpec) -> Result<(Array3<f64>, Array2<f64>)> {
    let (h, w) = spec.resolution;
    let background = band_limited_noise(rng, h, w, 0.03, 0.12).mapv(|v| (2.5 * v).tanh());

    // Same amplitude spectrum, phase shifted by a scaled random odd phase field.
    let strength = 1.0 - 0.85 * spec.difficulty;
    let phase_noise = fft2(&white_noise(rng, h, w));
    let mut spectrum = fft2(&background);
    for ((u, v), c) in spectrum.indexed_iter_mut() {
        let self_conjugate = (u == 0 || 2 * u == h) && (v == 0 || 2 * v == w);
        if self_conjugate {
            continue;
        }
        let psi = phase_noise[[u, v]].arg();
        *c *= Complex64::from_polar(1.0, strength * psi);
    }
    let foreground = ifft2(&spectrum).mapv(|c| c.re);

    let mask = star_blob(rng, spec)?;
    let dark = random_color(rng, 0.15, 0.5);
    let light = random_color(rng, 0.5, 0.85);
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let t = if mask[[y, x]] > 0.5 {
            foreground[[y, x]]
        } else {
            background[[y, x]]
        };
        let t = 0.5 * (t.clamp(-1.0, 1.0) + 1.0);
        (dark[c] + (light[c] - dark[c]) * t).clamp(0.0, 1.0)
    });
    Ok((image, mask))
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        .abs()
}

fn shadow_polygon(rng: &mut impl Rng, spec: &SyntheticSpec) -> Result<Array2<f64>> {
    let (h, w) = spec.resolution;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let n = rng.random_range(5..=8);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let unit: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = rng.random_range(0.6..1.0);
                (r * a.cos(), r * a.sin())
            })
            .collect();
        let unit_area = polygon_area(&unit);
        if unit_area < 0.3 {
            continue;
        }
        let scale = (target_area(rng, spec.area_range) * (h * w) as f64 / unit_area).sqrt();
        if 2.0 * scale + 2.0 > h.min(w) as f64 {
            continue;
        }
        let cy = rng.random_range(scale + 1.0..=h as f64 - scale - 1.0);
        let cx = rng.random_range(scale + 1.0..=w as f64 - scale - 1.0);
        let poly: Vec<(f64, f64)> = unit
            .iter()
            .map(|&(x, y)| (cx + scale * x, cy + scale * y))
            .collect();
        let mask = Array2::from_shape_fn((h, w), |(y, x)| {
            f64::from(u8::from(point_in_polygon(
                x as f64 + 0.5,
                y as f64 + 0.5,
                &poly,
            )))
        });
        if in_range(area_fraction(&mask), spec.area_range) {
            return Ok(mask);
        }
    }
    Err(shape_error(spec))
}

fn shadow(rng: &mut impl Rng, spec: &SyntheticSpec) -> Result<(Array3<f64>, Array2<f64>)> {
    let (h, w) = spec.resolution;
    let c0 = random_color(rng, 0.45, 0.9);
    let c1 = random_color(rng, 0.45, 0.9);
    let angle = rng.random_range(0.0..2.0 * PI);
    let mut image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let t = 0.5
            + 0.5
                * ((x as f64 / w as f64 - 0.5) * angle.cos()
                    + (y as f64 / h as f64 - 0.5) * angle.sin());
        c0[c] + (c1[c] - c0[c]) * t
    });
    for _ in 0..rng.random_range(3..=6) {
        let color = random_color(rng, 0.3, 0.95);
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let y1 = (y0 + rng.random_range(h / 8..=h / 3)).min(h);
        let x1 = (x0 + rng.random_range(w / 8..=w / 3)).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    image[[y, x, c]] = color[c];
                }
            }
        }
    }
    let grain = band_limited_noise(rng, h, w, 0.1, 0.4);
    image.indexed_iter_mut().for_each(|((y, x, _), v)| {
        *v = (*v + 0.04 * grain[[y, x]]).clamp(0.0, 1.0);
    });

    let mask = shadow_polygon(rng, spec)?;
    let factor = 0.3 + 0.55 * spec.difficulty;
    image.indexed_iter_mut().for_each(|((y, x, _), v)| {
        if mask[[y, x]] > 0.5 {
            *v *= factor;
        }
    });
    Ok((image, mask))
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue, sat, max]
}

fn hsv_to_rgb([hue, sat, val]: [f64; 3]) -> [f64; 3] {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let c = val * sat;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn polyp(rng: &mut impl Rng, spec: &SyntheticSpec) -> Result<(Array3<f64>, Array2<f64>)> {
    let (h, w) = spec.resolution;
    let base = [
        rng.random_range(0.7..0.9),
        rng.random_range(0.35..0.5),
        rng.random_range(0.3..0.45),
    ];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let vessels = band_limited_noise(rng, h, w, 0.05, 0.2);

    let (mask, rho) = ellipse(rng, spec)?;
    let shift = 0.04 + 0.2 * (1.0 - spec.difficulty);
    let [hue, sat, val] = rgb_to_hsv(base);
    let blob = hsv_to_rgb([hue + shift, (sat * 0.9).min(1.0), (val * 0.95).min(1.0)]);

    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        let shading: f64 = waves
            .iter()
            .map(|&(freq, dir, phase)| {
                0.05 * (2.0 * PI * freq * (fx * dir.cos() + fy * dir.sin()) + phase).sin()
            })
            .sum();
        let r = rho[[y, x]];
        let alpha = 1.0 / (1.0 + (-(1.0 - r) * 12.0).exp());
        let highlight = 0.08 * (1.0 - r * r).max(0.0);
        let bg = base[c] + shading + 0.02 * vessels[[y, x]];
        let fg = blob[c] + highlight + 0.5 * shading;
        (bg * (1.0 - alpha) + fg * alpha).clamp(0.0, 1.0)
    });
    Ok((image, mask))
}

/// Returns the ellipse mask and the normalised elliptical radius of every pixel.
fn ellipse(rng: &mut impl Rng, spec: &SyntheticSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    let (h, w) = spec.resolution;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let aspect: f64 = rng.random_range(0.6..1.0);
        let area = target_area(rng, spec.area_range) * (h * w) as f64;
        let a = (area / (PI * aspect)).sqrt();
        let b = aspect * a;
        if 2.0 * a + 2.0 > h.min(w) as f64 {
            continue;
        }
        let theta = rng.random_range(0.0..PI);
        let cy = rng.random_range(a + 1.0..=h as f64 - a - 1.0);
        let cx = rng.random_range(a + 1.0..=w as f64 - a - 1.0);
        let rho = Array2::from_shape_fn((h, w), |(y, x)| {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = dx * theta.cos() + dy * theta.sin();
            let v = -dx * theta.sin() + dy * theta.cos();
            ((u / a).powi(2) + (v / b).powi(2)).sqrt()
        });
        let mask = rho.mapv(|r| f64::from(u8::from(r <= 1.0)));
        if in_range(area_fraction(&mask), spec.area_range) {
            return Ok((mask, rho));
        }
    }
    Err(shape_error(spec))
}

/// Per-channel normalised histograms (`bins` per channel) of the pixels where `mask == region`.
pub fn color_histograms(sample: &ImageSample, region: bool, bins: usize) -> Vec<Vec<f64>> {
    let (h, w, c) = sample.image.dim();
    let mut hist = vec![vec![0.0; bins]; c];
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            if (sample.mask[[y, x]] >= 0.5) != region {
                continue;
            }
            count += 1.0;
            for (ch, hc) in hist.iter_mut().enumerate() {
                let b = ((sample.image[[y, x, ch]] * bins as f64) as usize).min(bins - 1);
                hc[b] += 1.0;
            }
        }
    }
    if count > 0.0 {
        hist.iter_mut().flatten().for_each(|v| *v /= count);
    }
    hist
}

/// Mean absolute difference between foreground and background colour histograms.
pub fn histogram_gap(sample: &ImageSample, bins: usize) -> f64 {
    let fg = color_histograms(sample, true, bins);
    let bg = color_histograms(sample, false, bins);
    let diffs: Vec<f64> = fg
        .iter()
        .flatten()
        .zip(bg.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .collect();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}
