use ndarray::{Array2, Array3};

use crate::nn::ResizePlan;

/// `1` where `mask ≥ threshold`, else `0`.
pub fn binarize(mask: &Array2<f64>, threshold: f64) -> Array2<u8> {
    mask.mapv(|v| u8::from(v >= threshold))
}

/// Nearest-neighbour resize; never invents label values.
pub fn resize_nearest(mask: &Array2<f64>, to: (usize, usize)) -> Array2<f64> {
    let (h, w) = mask.dim();
    if (h, w) == to {
        return mask.clone();
    }
    let (th, tw) = to;
    Array2::from_shape_fn(to, |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / th as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / tw as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}

/// Bilinear resize of an `H×W×C` image (half-pixel centres).
pub fn resize_bilinear(image: &Array3<f64>, to: (usize, usize)) -> Array3<f64> {
    let (h, w, c) = image.dim();
    if (h, w) == to {
        return image.clone();
    }
    let flat = image
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous image");
    let plan = ResizePlan::new((h, w), to);
    plan.apply(flat.view())
        .into_shape_with_order((to.0, to.1, c))
        .expect("resize output shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn binarize_uses_greater_or_equal() {
        assert!(binarize(&Array2::from_elem((3, 3), 0.7), 0.5)
            .iter()
            .all(|&v| v == 1));
        assert!(binarize(&Array2::from_elem((3, 3), 0.5), 0.5)
            .iter()
            .all(|&v| v == 1));
        assert!(binarize(&Array2::from_elem((3, 3), 0.49), 0.5)
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn binarize_matches_elementwise_comparison() {
        let m = array![
            [0.1, 0.9, 0.5, 0.3],
            [0.75, 0.25, 0.6, 0.0],
            [1.0, 0.45, 0.55, 0.5],
            [0.2, 0.8, 0.05, 0.95]
        ];
        let b = binarize(&m, 0.5);
        for ((y, x), &v) in m.indexed_iter() {
            assert_eq!(b[[y, x]], if v >= 0.5 { 1 } else { 0 });
        }
    }

    #[test]
    fn nearest_resize_keeps_label_values() {
        let m = array![[0.0, 1.0], [1.0, 0.0]];
        let up = resize_nearest(&m, (4, 4));
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[0, 3]], 1.0);
        assert!(up.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(resize_nearest(&up, (2, 2)), m);
    }

    #[test]
    fn bilinear_resize_stays_in_range() {
        let img = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 7 + x + c) % 3) as f64 / 2.0);
        let out = resize_bilinear(&img, (16, 9));
        assert_eq!(out.dim(), (16, 9, 3));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
