//! Dense feedforward networks with hand-written reverse mode and Adam.
//!
//! Hidden layers use the rectifier, the output layer is affine. Everything
//! works on row-major minibatches (one sample per row).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("expected input of width {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One affine layer, `y = x W^T + b` with `W` stored as out × in.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Values cached by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients, laid out like [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Grads {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
                .collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.iter().chain(l.b.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Mlp {
    /// He-style uniform initialization: weights in ±sqrt(6 / fan_in), biases 0.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Mlp {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Mlp {
        Mlp {
            layers: sizes
                .windows(2)
                .map(|w| Dense { w: Array2::zeros((w[1], w[0])), b: Array1::zeros(w[1]) })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.nrows()
    }

    /// Scales the output layer's weights, e.g. to start near zero output.
    pub fn scale_output(&mut self, k: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.w *= k;
        last.b *= k;
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GradTape), NnError> {
        self.check(x.len())?;
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let (y, tape) = self.forward_batch(batch);
        Ok((y.into_raw_vec_and_offset().0, tape))
    }

    fn check(&self, got: usize) -> Result<(), NnError> {
        let expected = self.input_dim();
        if got == expected {
            Ok(())
        } else {
            Err(NnError::Dimension { expected, got })
        }
    }

    /// Batch forward pass with a tape for [`Mlp::backward`].
    ///
    /// # Panics
    /// If the input width does not match the network.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, GradTape) {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w.t()) + &layer.b;
            let next = if i < last { z.mapv(relu) } else { z.clone() };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        (a, GradTape { inputs, pre })
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t()) + &layer.b;
            if i < last {
                z.mapv_inplace(relu);
            }
            a = z;
        }
        a
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check(x.len())?;
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.predict(batch).into_raw_vec_and_offset().0)
    }

    /// Reverse pass: gradients of the parameters and the input given the
    /// upstream gradient `dy` of the output. The tape must come from a forward
    /// pass of this network on the same batch.
    pub fn backward(&self, tape: &GradTape, dy: ArrayView2<'_, f64>) -> (Grads, Array2<f64>) {
        debug_assert_eq!(tape.pre.len(), self.layers.len(), "stale tape");
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = dy.to_owned();
        for i in (0..self.layers.len()).rev() {
            let dz = if i < last {
                let mut d = upstream;
                ndarray::Zip::from(&mut d).and(&tape.pre[i]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            } else {
                upstream
            };
            debug_assert_eq!(dz.raw_dim(), tape.pre[i].raw_dim(), "stale tape");
            let dw = dz.t().dot(&tape.inputs[i]);
            let db = dz.sum_axis(Axis(0));
            upstream = dz.dot(&self.layers[i].w);
            grads.push(Dense { w: dw, b: db });
        }
        grads.reverse();
        (Grads { layers: grads }, upstream)
    }

    /// `self = (1 - tau) * self + tau * source`, elementwise.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.w.zip_mut_with(&s.w, |a, &b| *a = (1.0 - tau) * *a + tau * b);
            t.b.zip_mut_with(&s.b, |a, &b| *a = (1.0 - tau) * *a + tau * b);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Bias-corrected adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut())
            .zip(self.v.layers.iter_mut())
        {
            ndarray::Zip::from(&mut layer.w)
                .and(&g.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.b)
                .and(&g.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Adam for a single scalar parameter (used for the SAC temperature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarAdam {
    pub lr: f64,
    t: i32,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        ScalarAdam { lr, t: 0, m: 0.0, v: 0.0 }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * grad;
        self.v = 0.999 * self.v + 0.001 * grad * grad;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        *param -= self.lr * mh / (vh.sqrt() + 1e-8);
    }
}
