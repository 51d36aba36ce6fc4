use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::graph::{Graph, Var};

/// Visits named parameter arrays in a fixed order.
pub trait Parameterized {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Normal(f64),
}

pub fn init_array(rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> Array2<f64> {
    match init {
        Init::Zeros => Array2::zeros((rows, cols)),
        Init::Xavier => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
        }
    }
}

/// Affine map `x·W + b` over token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight_name: String,
    bias_name: String,
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Self {
        Self::from_arrays(
            prefix,
            init_array(input, output, init, rng),
            Array2::zeros((1, output)),
        )
    }

    pub fn from_arrays(prefix: &str, weight: Array2<f64>, bias: Array2<f64>) -> Self {
        assert_eq!(bias.dim(), (1, weight.ncols()), "bias must be 1×out");
        Self {
            weight_name: format!("{prefix}.weight"),
            bias_name: format!("{prefix}.bias"),
            weight,
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Var {
        let w = g.param(&self.weight_name, &self.weight);
        let b = g.param(&self.bias_name, &self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

impl Parameterized for Linear {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        f(&self.weight_name, &self.weight);
        f(&self.bias_name, &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&self.weight_name, &mut self.weight);
        f(&self.bias_name, &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    gamma_name: String,
    beta_name: String,
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma_name: format!("{prefix}.gamma"),
            beta_name: format!("{prefix}.beta"),
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Var {
        let gamma = g.param(&self.gamma_name, &self.gamma);
        let beta = g.param(&self.beta_name, &self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl Parameterized for LayerNorm {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        f(&self.gamma_name, &self.gamma);
        f(&self.beta_name, &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&self.gamma_name, &mut self.gamma);
        f(&self.beta_name, &mut self.beta);
    }
}

/// A standalone named array, e.g. a positional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    pub value: Array2<f64>,
}

impl Tensor {
    pub fn new(name: &str, value: Array2<f64>) -> Self {
        Self {
            name: name.to_string(),
            value,
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>) -> Var {
        g.param(&self.name, &self.value)
    }
}

impl Parameterized for Tensor {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        f(&self.name, &self.value);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&self.name, &mut self.value);
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        for item in self {
            item.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for item in self {
            item.visit_mut(f);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&'s str, &'s Array2<f64>)) {
        if let Some(item) = self {
            item.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        if let Some(item) = self {
            item.visit_mut(f);
        }
    }
}
