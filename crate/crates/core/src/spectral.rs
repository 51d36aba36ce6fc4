//! 2-D discrete Fourier transforms on dense grids.

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

fn transform(data: &mut Array2<Complex64>, direction: FftDirection) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    for mut row in data.axis_iter_mut(Axis(0)) {
        let mut buf: Vec<Complex64> = row.to_vec();
        row_fft.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut col in data.axis_iter_mut(Axis(1)) {
        let mut buf: Vec<Complex64> = col.to_vec();
        col_fft.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
}

/// Forward 2-D DFT of a real grid.
pub fn fft2(data: &Array2<f64>) -> Array2<Complex64> {
    let mut c = data.mapv(|v| Complex64::new(v, 0.0));
    transform(&mut c, FftDirection::Forward);
    c
}

/// Normalised inverse 2-D DFT.
pub fn ifft2(spectrum: &Array2<Complex64>) -> Array2<Complex64> {
    let mut c = spectrum.clone();
    transform(&mut c, FftDirection::Inverse);
    let n = c.len() as f64;
    c.mapv_inplace(|v| v / n);
    c
}

/// Signed frequency index of DFT bin `k` out of `n` (0, 1, …, −2, −1).
pub fn signed_frequency(k: usize, n: usize) -> i64 {
    if k <= (n - 1) / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_undoes_forward() {
        let x = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 31 + j * 17) % 7) as f64 - 3.0);
        let back = ifft2(&fft2(&x));
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12);
        }
    }

    #[test]
    fn signed_frequencies() {
        let f: Vec<_> = (0..5).map(|k| signed_frequency(k, 5)).collect();
        assert_eq!(f, [0, 1, 2, -2, -1]);
        let f: Vec<_> = (0..4).map(|k| signed_frequency(k, 4)).collect();
        assert_eq!(f, [0, 1, -2, -1]);
    }
}
