//! Dense layers and multilayer perceptrons built on the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamId, ParamStore};
use super::spectral::{power_iteration, sigma_max, spectral_scale, SpectralState};
use super::tape::{Graph, Matrix, Unary, Var};

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    if std == 0.0 {
        return Matrix::zeros((rows, cols));
    }
    let d = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_fn((rows, cols), |_| d.sample(rng))
}

/// Spectral constraint attached to a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNorm {
    pub state: SpectralState,
    pub target: f64,
    /// Cached multiplier `min(1, target / sigma_hat)` used by forward passes.
    pub scale: f64,
}

/// `y = x W^T + b` with `W` stored as (out x in).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub sn: Option<SpectralNorm>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal_matrix(output, input, init_std, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros((1, output)));
        Self { w, b, sn: None }
    }

    pub fn with_spectral_norm<R: Rng + ?Sized>(mut self, store: &ParamStore, target: f64, rng: &mut R) -> Self {
        let rows = store.get(self.w).nrows();
        self.sn = Some(SpectralNorm {
            state: SpectralState::new(rows, rng),
            target,
            scale: 1.0,
        });
        self
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).ncols()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).nrows()
    }

    /// Advances the power iteration and refreshes the cached scale.
    pub fn refresh(&mut self, store: &ParamStore, iters: usize) {
        if let Some(sn) = &mut self.sn {
            let sigma = power_iteration(store.get(self.w), &mut sn.state, iters);
            sn.scale = spectral_scale(sigma, sn.target);
        }
    }

    /// Sets the cached scale from the exact top singular value.
    pub fn refresh_exact(&mut self, store: &ParamStore) {
        if let Some(sn) = &mut self.sn {
            let sigma = sigma_max(store.get(self.w));
            sn.state.sigma_hat = sigma;
            sn.scale = spectral_scale(sigma, sn.target);
        }
    }

    pub fn scale(&self) -> f64 {
        self.sn.as_ref().map_or(1.0, |sn| sn.scale)
    }

    /// The weight the forward pass actually applies.
    pub fn realized_weight(&self, store: &ParamStore) -> Matrix {
        store.get(self.w) * self.scale()
    }

    /// Bakes the current scale into the stored weight.
    pub fn freeze(&mut self, store: &mut ParamStore) {
        let s = self.scale();
        if s != 1.0 {
            let w = store.get_mut(self.w);
            *w *= s;
        }
        if let Some(sn) = &mut self.sn {
            sn.scale = 1.0;
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let w = match &self.sn {
            Some(sn) if sn.scale != 1.0 => g.scale(p[self.w], sn.scale),
            _ => p[self.w],
        };
        g.linear(x, w, Some(p[self.b]))
    }
}

/// Dense layers joined by one activation; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub act: Unary,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        act: Unary,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], init_std, rng))
            .collect();
        Self { layers, act }
    }

    /// He-style init: each layer's std is `gain / sqrt(fan_in)`.
    pub fn new_scaled<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        act: Unary,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let std = gain / (w[0] as f64).sqrt();
                Dense::new(store, &format!("{name}.{i}"), w[0], w[1], std, rng)
            })
            .collect();
        Self { layers, act }
    }

    pub fn with_spectral_norm<R: Rng + ?Sized>(mut self, store: &ParamStore, target: f64, rng: &mut R) -> Self {
        self.layers = self
            .layers
            .into_iter()
            .map(|l| l.with_spectral_norm(store, target, rng))
            .collect();
        self
    }

    pub fn refresh(&mut self, store: &ParamStore, iters: usize) {
        for l in &mut self.layers {
            l.refresh(store, iters);
        }
    }

    pub fn refresh_exact(&mut self, store: &ParamStore) {
        for l in &mut self.layers {
            l.refresh_exact(store);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i < last {
                h = g.unary(h, self.act);
            }
        }
        h
    }

    /// Forward pass ending at the last hidden activation.
    pub fn features(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, p, h);
            h = g.unary(h, self.act);
        }
        h
    }
}
