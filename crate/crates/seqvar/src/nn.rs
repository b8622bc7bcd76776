//! Minimal multilayer perceptron over flat parameter slices.
//!
//! The networks used by the amortized variational schemes are tiny (one or
//! two tanh hidden layers), but their parameters live inside the single flat
//! λ vector that the optimizer updates. This module therefore works directly
//! on `&[f64]` parameter slices instead of owning weights: the shape object
//! describes the architecture, the caller supplies the slice.
//!
//! Parameter layout per layer: weight matrix row-major (`out × in`), then the
//! bias vector. Hidden layers apply tanh; the output layer is linear.

use nalgebra::DVector;
use rand::Rng;

use crate::rngstreams::Stream;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    /// Layer widths from input to output, e.g. `[4, 100, 10]`.
    pub layer_dims: Vec<usize>,
}

impl Mlp {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        assert!(
            layer_dims.len() >= 2,
            "an MLP needs at least input and output dims"
        );
        assert!(layer_dims.iter().all(|&d| d > 0));
        Mlp { layer_dims }
    }

    pub fn input_dim(&self) -> usize {
        *self.layer_dims.first().unwrap()
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Total number of parameters: Σ (in + 1) · out over layers.
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Uniform `±1/√fan_in` initialization written into a fresh vector.
    pub fn init_params(&self, rng: &mut Stream) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in self.layer_dims.windows(2) {
            let (din, dout) = (w[0], w[1]);
            let bound = 1.0 / (din as f64).sqrt();
            for _ in 0..dout * din {
                out.push(rng.random_range(-bound..bound));
            }
            // Zero biases keep the initial map centred.
            out.extend(std::iter::repeat(0.0).take(dout));
        }
        out
    }

    /// Forward pass.
    pub fn forward(&self, params: &[f64], x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.layer_dims.len() - 1;
        let mut act = x.clone();
        let mut off = 0;
        for (layer, w) in self.layer_dims.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let mut next = DVector::zeros(dout);
            for r in 0..dout {
                let row = &params[off + r * din..off + (r + 1) * din];
                let mut s = params[off + dout * din + r];
                for (c, &wv) in row.iter().enumerate() {
                    s += wv * act[c];
                }
                next[r] = if layer + 1 < n_layers { s.tanh() } else { s };
            }
            off += (din + 1) * dout;
            act = next;
        }
        act
    }

    /// Reverse pass: given `upstream = ∂f/∂output`, returns
    /// `(∂f/∂params, ∂f/∂x)`. Activations are recomputed internally, so the
    /// call is self-contained.
    pub fn backward(
        &self,
        params: &[f64],
        x: &DVector<f64>,
        upstream: &DVector<f64>,
    ) -> (Vec<f64>, DVector<f64>) {
        let mut grad = vec![0.0; self.param_count()];
        let gx = self.backward_into(params, x, upstream, &mut grad, 1.0);
        (grad, gx)
    }

    /// Like [`Mlp::backward`] but accumulates `scale · ∂f/∂params` into an
    /// existing buffer — the common case when many per-particle terms share
    /// one gradient vector.
    pub fn backward_into(
        &self,
        params: &[f64],
        x: &DVector<f64>,
        upstream: &DVector<f64>,
        grad: &mut [f64],
        scale: f64,
    ) -> DVector<f64> {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(grad.len(), self.param_count());
        debug_assert_eq!(upstream.len(), self.output_dim());
        let n_layers = self.layer_dims.len() - 1;

        // Forward, keeping each layer's input activation.
        let mut acts: Vec<DVector<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.clone());
        let mut off = 0;
        for (layer, w) in self.layer_dims.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let prev = acts.last().unwrap();
            let mut next = DVector::zeros(dout);
            for r in 0..dout {
                let row = &params[off + r * din..off + (r + 1) * din];
                let mut s = params[off + dout * din + r];
                for (c, &wv) in row.iter().enumerate() {
                    s += wv * prev[c];
                }
                next[r] = if layer + 1 < n_layers { s.tanh() } else { s };
            }
            off += (din + 1) * dout;
            acts.push(next);
        }

        // Backward.
        let mut delta = upstream.clone() * scale;
        let mut offsets: Vec<usize> = Vec::with_capacity(n_layers);
        let mut o = 0;
        for w in self.layer_dims.windows(2) {
            offsets.push(o);
            o += (w[0] + 1) * w[1];
        }
        for layer in (0..n_layers).rev() {
            let din = self.layer_dims[layer];
            let dout = self.layer_dims[layer + 1];
            let off = offsets[layer];
            // tanh layers: fold the activation derivative into delta first.
            if layer + 1 < n_layers {
                let a = &acts[layer + 1];
                for r in 0..dout {
                    delta[r] *= 1.0 - a[r] * a[r];
                }
            }
            let input = &acts[layer];
            let mut gx = DVector::zeros(din);
            for r in 0..dout {
                let dr = delta[r];
                for c in 0..din {
                    grad[off + r * din + c] += dr * input[c];
                    gx[c] += dr * params[off + r * din + c];
                }
                grad[off + dout * din + r] += dr;
            }
            delta = gx;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstreams::{stream, Purpose, StreamKey};
    use approx::assert_relative_eq;

    fn test_rng() -> Stream {
        stream(StreamKey::new(99, Purpose::ParamInit, 0, 0))
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::new(vec![3, 8, 2]);
        let params = vec![0.0; net.param_count()];
        let y = net.forward(&params, &DVector::from_row_slice(&[1.0, -2.0, 0.5]));
        assert_eq!(y, DVector::zeros(2));
    }

    #[test]
    fn single_linear_layer_is_affine() {
        // [2, 2] network: output = W x + b exactly.
        let net = Mlp::new(vec![2, 2]);
        let params = vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]; // W rows (1,2),(3,4); b (0.5,−0.5)
        let y = net.forward(&params, &DVector::from_row_slice(&[1.0, 1.0]));
        assert_relative_eq!(y, DVector::from_row_slice(&[3.5, 6.5]), epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Mlp::new(vec![3, 5, 4, 2]);
        let mut rng = test_rng();
        let params = net.init_params(&mut rng);
        // init_params zeroes biases; randomize them too for a thorough check.
        let mut params: Vec<f64> = params
            .iter()
            .map(|&p| {
                if p == 0.0 {
                    rng.random_range(-0.1..0.1)
                } else {
                    p
                }
            })
            .collect();
        let x = DVector::from_row_slice(&[0.3, -1.1, 0.7]);
        let upstream = DVector::from_row_slice(&[1.0, -2.0]);
        let (grad, gx) = net.backward(&params, &x, &upstream);

        let f = |net: &Mlp, p: &[f64], x: &DVector<f64>| upstream.dot(&net.forward(p, x));
        let base = f(&net, &params, &x);
        let eps = 1e-6;
        // Check a spread of parameter coordinates (all of them is slow-ish
        // but the net is tiny — do all).
        for k in 0..params.len() {
            let orig = params[k];
            params[k] = orig + eps;
            let fd = (f(&net, &params, &x) - base) / eps;
            params[k] = orig;
            assert_relative_eq!(fd, grad[k], epsilon = 1e-4, max_relative = 1e-3);
        }
        for k in 0..x.len() {
            let mut xb = x.clone();
            xb[k] += eps;
            let fd = (f(&net, &params, &xb) - base) / eps;
            assert_relative_eq!(fd, gx[k], epsilon = 1e-4, max_relative = 1e-3);
        }
    }

    #[test]
    fn backward_into_accumulates_scaled() {
        let net = Mlp::new(vec![2, 3, 1]);
        let mut rng = test_rng();
        let params = net.init_params(&mut rng);
        let x = DVector::from_row_slice(&[0.4, -0.9]);
        let up = DVector::from_row_slice(&[1.3]);
        let (g1, _) = net.backward(&params, &x, &up);
        let mut acc = vec![1.0; net.param_count()];
        net.backward_into(&params, &x, &up, &mut acc, 2.0);
        for k in 0..acc.len() {
            assert_relative_eq!(acc[k], 1.0 + 2.0 * g1[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn init_params_respects_fan_in_bound() {
        let net = Mlp::new(vec![16, 8]);
        let mut rng = test_rng();
        let p = net.init_params(&mut rng);
        assert_eq!(p.len(), net.param_count());
        let bound = 1.0 / 4.0;
        for &w in &p[..16 * 8] {
            assert!(w.abs() <= bound);
        }
        for &b in &p[16 * 8..] {
            assert_eq!(b, 0.0);
        }
    }
}
