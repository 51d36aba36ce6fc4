//! Task-specific prompt features: high-frequency components, patch embeddings,
//! and their weighted composition.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Graph, Init, Linear, Parameterized, Var};
use crate::spectral::{fft2, ifft2, signed_frequency};

/// Where a feature grid came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Hfc,
    PatchEmbed,
    Composed,
    StageFeature,
    Prompt,
}

/// An `h×w×d` token grid with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Array3<f64>,
    pub origin: Origin,
    pub stage: Option<usize>,
}

impl FeatureGrid {
    pub fn new(data: Array3<f64>, origin: Origin, stage: Option<usize>) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 {
            return shape_err(format!("feature grid must be non-empty, got {h}×{w}×{d}"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{origin:?} feature grid")));
        }
        if let Some(st) = stage {
            if !(1..=4).contains(&st) {
                return invalid(format!("stage {st} outside 1..=4"));
            }
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            origin,
            stage,
        })
    }

    /// Builds a grid from `(h·w)×d` row-major tokens.
    pub fn from_tokens(
        tokens: Array2<f64>,
        h: usize,
        w: usize,
        origin: Origin,
        stage: Option<usize>,
    ) -> Result<Self> {
        let (n, d) = tokens.dim();
        if n != h * w {
            return shape_err(format!("{n} tokens cannot form a {h}×{w} grid"));
        }
        let data = tokens
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h, w, d))
            .expect("token count checked");
        Self::new(data, origin, stage)
    }

    pub fn zeros(h: usize, w: usize, d: usize, origin: Origin, stage: Option<usize>) -> Self {
        Self {
            data: Array3::zeros((h, w, d)),
            origin,
            stage,
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn tokens(&self) -> Array2<f64> {
        let (h, w, d) = self.dim();
        self.data
            .clone()
            .into_shape_with_order((h * w, d))
            .expect("standard layout")
    }
}

/// Zeroes the centred `⌊tau·H⌋×⌊tau·W⌋` low-frequency block of each channel's spectrum
/// and returns the real part of the inverse transform.
pub fn extract_hfc(image: &Array3<f64>, tau: f64) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if h < 2 || w < 2 {
        return shape_err(format!(
            "high-frequency extraction needs at least 2×2, got {h}×{w}"
        ));
    }
    if !(0.0..=1.0).contains(&tau) {
        return invalid(format!("tau {tau} outside [0, 1]"));
    }
    if !image.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("image".into()));
    }
    let mh = (tau * h as f64).floor() as i64;
    let mw = (tau * w as f64).floor() as i64;
    // After centring, the block covers signed frequencies [−⌊m/2⌋, m − ⌊m/2⌋).
    let blocked = |k: usize, n: usize, m: i64| {
        let f = signed_frequency(k, n);
        f >= -(m / 2) && f < m - m / 2
    };
    let mut out = Array3::zeros((h, w, c));
    for ch in 0..c {
        let channel = image.slice(s![.., .., ch]).to_owned();
        let mut spectrum = fft2(&channel);
        for ((u, v), z) in spectrum.indexed_iter_mut() {
            if blocked(u, h, mh) && blocked(v, w, mw) {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        let back = ifft2(&spectrum);
        out.slice_mut(s![.., .., ch]).assign(&back.mapv(|z| z.re));
    }
    Ok(out)
}

/// High-frequency components of the luminance, replicated across channels.
pub fn extract_hfc_luminance(image: &Array3<f64>, tau: f64) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    let gray = image
        .mean_axis(Axis(2))
        .expect("channel axis")
        .insert_axis(Axis(2));
    let hfc = extract_hfc(&gray, tau)?;
    Ok(Array3::from_shape_fn((h, w, c), |(y, x, _)| hfc[[y, x, 0]]))
}

/// Flattens non-overlapping `p×p×C` patches into `(H/p·W/p)×(p·p·C)` rows, ordered `(dy, dx, c)`.
pub fn patchify(image: &Array3<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w, c) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("patch size {patch} does not divide {h}×{w}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * c));
    for ty in 0..gh {
        for tx in 0..gw {
            let mut row = out.row_mut(ty * gw + tx);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        row[k] = image[[ty * patch + dy, tx * patch + dx, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear projection of every `p×p` patch to a `d`-dimensional token.
pub fn patch_embed_prompt(
    image: &Array3<f64>,
    patch: usize,
    projection: &Linear,
) -> Result<FeatureGrid> {
    let (h, w, c) = image.dim();
    let patches = patchify(image, patch)?;
    if projection.input_dim() != patch * patch * c {
        return shape_err(format!(
            "projection expects {} inputs, patches have {}",
            projection.input_dim(),
            patch * patch * c
        ));
    }
    let tokens = patches.dot(&projection.weight) + &projection.bias;
    FeatureGrid::from_tokens(tokens, h / patch, w / patch, Origin::PatchEmbed, None)
}

/// `Σ_j w_j · F_j`.
pub fn compose_features(features: &[FeatureGrid], weights: &[f64]) -> Result<FeatureGrid> {
    if features.is_empty() {
        return invalid("composition needs at least one feature grid");
    }
    if features.len() != weights.len() {
        return invalid(format!(
            "{} feature grids but {} weights",
            features.len(),
            weights.len()
        ));
    }
    let dim = features[0].dim();
    if let Some(j) = features.iter().position(|f| f.dim() != dim) {
        return shape_err(format!(
            "feature grid {j} is {:?} but grid 0 is {dim:?}",
            features[j].dim()
        ));
    }
    let mut acc = Array3::zeros(dim);
    for (f, &w) in features.iter().zip(weights) {
        acc.scaled_add(w, f.data());
    }
    FeatureGrid::new(acc, Origin::Composed, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Hfc,
    PatchEmbed,
}

/// Which knowledge sources are composed and with what weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCompositionSpec {
    pub sources: Vec<PromptSource>,
    pub weights: Vec<f64>,
}

impl Default for PromptCompositionSpec {
    fn default() -> Self {
        Self {
            sources: vec![PromptSource::Hfc, PromptSource::PatchEmbed],
            weights: vec![1.0, 1.0],
        }
    }
}

impl PromptCompositionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return invalid("prompt composition needs at least one source");
        }
        if self.sources.len() != self.weights.len() {
            return invalid("prompt sources and weights differ in length");
        }
        if !self.weights.iter().all(|w| w.is_finite()) {
            return invalid("prompt weights must be finite");
        }
        Ok(())
    }
}

/// How the high-frequency image is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfcMode {
    #[default]
    PerChannel,
    Luminance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub tau: f64,
    pub hfc_mode: HfcMode,
    pub sources: Vec<PromptSource>,
    pub weights: Vec<f64>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        let composition = PromptCompositionSpec::default();
        Self {
            tau: 0.25,
            hfc_mode: HfcMode::PerChannel,
            sources: composition.sources,
            weights: composition.weights,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return invalid(format!("prompt.tau = {} outside [0, 1]", self.tau));
        }
        self.composition().validate()
    }

    pub fn composition(&self) -> PromptCompositionSpec {
        PromptCompositionSpec {
            sources: self.sources.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn hfc(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        match self.hfc_mode {
            HfcMode::PerChannel => extract_hfc(image, self.tau),
            HfcMode::Luminance => extract_hfc_luminance(image, self.tau),
        }
    }
}

/// Trainable part of the prompt path: the projection turning HFC patches into tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoder {
    pub config: PromptConfig,
    pub hfc_embed: Linear,
}

impl PromptEncoder {
    pub fn new(
        config: PromptConfig,
        patch: usize,
        channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hfc_embed = Linear::new(
            "prompt.hfc_embed",
            patch * patch * channels,
            dim,
            Init::Xavier,
            rng,
        );
        Self { config, hfc_embed }
    }

    /// `F_i` from precomputed HFC patches and the backbone's patch-embedding tap.
    pub fn compose<'a>(&'a self, g: &mut Graph<'a>, hfc_patches: Var, patch_embed: Var) -> Var {
        let cfg = &self.config;
        let mut acc: Option<Var> = None;
        for (source, &w) in cfg.sources.iter().zip(&cfg.weights) {
            let f = match source {
                PromptSource::Hfc => self.hfc_embed.forward(g, hfc_patches),
                PromptSource::PatchEmbed => patch_embed,
            };
            let term = if w == 1.0 { f } else { g.scale(f, w) };
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        acc.expect("validated non-empty")
    }

    pub fn needs_hfc(&self) -> bool {
        self.config.sources.contains(&PromptSource::Hfc)
    }
}

impl Parameterized for PromptEncoder {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        self.hfc_embed.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.hfc_embed.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_image_has_no_high_frequencies() {
        let img = Array3::from_elem((16, 16, 3), 0.5);
        let hfc = extract_hfc(&img, 0.25).unwrap();
        assert!(hfc.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn tau_zero_is_identity() {
        let img = Array3::from_shape_fn((6, 10, 2), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 5) as f64 / 4.0
        });
        let hfc = extract_hfc(&img, 0.0).unwrap();
        for (a, b) in img.iter().zip(hfc.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hfc_rejects_bad_input() {
        assert!(extract_hfc(&Array3::zeros((1, 4, 1)), 0.25).is_err());
        assert!(extract_hfc(&Array3::zeros((4, 4, 1)), 1.5).is_err());
        let mut img = Array3::zeros((4, 4, 1));
        img[[0, 0, 0]] = f64::NAN;
        assert!(matches!(extract_hfc(&img, 0.25), Err(Error::NonFinite(_))));
    }

    #[test]
    fn luminance_mode_replicates_channels() {
        let img = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y + 2 * x + c) % 4) as f64 / 3.0);
        let hfc = extract_hfc_luminance(&img, 0.25).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(hfc[[y, x, 0]], hfc[[y, x, 2]]);
            }
        }
    }

    #[test]
    fn single_patch_gives_single_token() {
        let img = Array3::from_elem((4, 4, 3), 0.25);
        let mut rng = rand::rng();
        let proj = Linear::new("p", 48, 5, Init::Xavier, &mut rng);
        let grid = patch_embed_prompt(&img, 4, &proj).unwrap();
        assert_eq!(grid.dim(), (1, 1, 5));
        assert_eq!(grid.origin, Origin::PatchEmbed);
    }

    #[test]
    fn identity_projection_returns_pixels() {
        let img = Array3::from_shape_fn((3, 5, 3), |(y, x, c)| (y * 15 + x * 3 + c) as f64 / 45.0);
        let proj = Linear::from_arrays("p", Array2::eye(3), Array2::zeros((1, 3)));
        let grid = patch_embed_prompt(&img, 1, &proj).unwrap();
        assert_eq!(grid.data(), &img);
    }

    #[test]
    fn patch_sum_projection() {
        let img = array![[[0.1], [0.2]], [[0.3], [0.4]]];
        let proj = Linear::from_arrays("p", Array2::ones((4, 1)), Array2::zeros((1, 1)));
        let grid = patch_embed_prompt(&img, 2, &proj).unwrap();
        assert!((grid.data()[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_must_divide_image() {
        let img = Array3::zeros((6, 6, 1));
        let proj = Linear::from_arrays("p", Array2::ones((16, 1)), Array2::zeros((1, 1)));
        assert!(patch_embed_prompt(&img, 4, &proj).is_err());
    }

    #[test]
    fn composition_identity_and_annihilation() {
        let a = FeatureGrid::new(Array3::from_elem((2, 3, 4), 0.7), Origin::Hfc, None).unwrap();
        let b =
            FeatureGrid::new(Array3::from_elem((2, 3, 4), -0.2), Origin::PatchEmbed, None).unwrap();
        let one = compose_features(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert_eq!(one.data(), a.data());
        assert_eq!(one.origin, Origin::Composed);
        let zero = compose_features(&[a.clone(), b.clone()], &[0.0, 0.0]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composition_reports_mismatched_index() {
        let a = FeatureGrid::zeros(2, 2, 3, Origin::Hfc, None);
        let b = FeatureGrid::zeros(2, 2, 3, Origin::Hfc, None);
        let c = FeatureGrid::zeros(2, 2, 4, Origin::Hfc, None);
        let err = compose_features(&[a.clone(), b, c], &[1.0, 1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("grid 2"), "{err}");
        assert!(compose_features(&[a], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn feature_grid_rejects_non_finite() {
        let mut data = Array3::zeros((1, 1, 1));
        data[[0, 0, 0]] = f64::INFINITY;
        assert!(FeatureGrid::new(data, Origin::Prompt, Some(1)).is_err());
        assert!(FeatureGrid::new(Array3::zeros((1, 1, 1)), Origin::Prompt, Some(5)).is_err());
    }
}
