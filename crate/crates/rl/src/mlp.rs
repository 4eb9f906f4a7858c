//! Fully connected ReLU networks with batched forward and backward passes.
//!
//! Parameters live in one flat vector, layer by layer: the row-major weight
//! matrix (`out × in`) followed by the bias.

use rand::Rng;

use crate::scalar::{gemm, Scalar, View};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    params: Vec<T>,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass. A tape
/// passed back to [`Mlp::forward_into`] reuses its buffers.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    rows: usize,
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    prev: Vec<T>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self {
            rows: 0,
            acts: Vec::new(),
            delta: Vec::new(),
            prev: Vec::new(),
        }
    }
}

impl<T> Tape<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Raw (pre-head) network output, `rows × out` row-major.
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    /// All-zero network with layer widths `sizes` (input first, output last).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); param_count(sizes)],
        })
    }

    /// Uniform `±1/√fan_in` initialization; the output layer is scaled by
    /// `out_scale` so a fresh network starts near zero output.
    pub fn init(sizes: &[usize], out_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let last = sizes.len() - 2;
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let scale = if l == last { out_scale } else { 1.0 };
            for p in &mut net.params[off..off + fan_in * fan_out + fan_out] {
                *p = T::lit(scale * rng.random_range(-bound..bound));
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        Error::check_len("network parameters", net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of layer `l`'s weights in the flat parameter vector.
    fn offset(&self, l: usize) -> usize {
        param_count(&self.sizes[..=l])
    }

    /// Forward pass over `rows` inputs stored row-major in `x`.
    pub fn forward(&self, x: &[T], rows: usize) -> Result<Tape<T>> {
        let mut tape = Tape::default();
        self.forward_into(x, rows, &mut tape)?;
        Ok(tape)
    }

    pub fn forward_into(&self, x: &[T], rows: usize, tape: &mut Tape<T>) -> Result<()> {
        Error::check_len("network input", rows * self.input_dim(), x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        tape.rows = rows;
        tape.acts.resize_with(self.sizes.len(), Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let (done, rest) = tape.acts.split_at_mut(l + 1);
            let h = &mut rest[0];
            h.clear();
            for _ in 0..rows {
                h.extend_from_slice(b);
            }
            gemm(View::new(&done[l], rows, fan_in), View::new(w, fan_out, fan_in).t(), T::one(), h);
            if l + 1 < self.layers() {
                h.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
        if !tape.acts[self.layers()].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network activations"));
        }
        Ok(())
    }

    pub fn forward_one(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(x, 1)?.acts.pop().unwrap_or_default())
    }

    /// Accumulates `∂L/∂θ` into `grad` given `d_out = ∂L/∂output`
    /// (`rows × out`, row-major) for the inputs recorded in `tape`.
    pub fn backward(&self, tape: &mut Tape<T>, d_out: &[T], grad: &mut [T]) -> Result<()> {
        let rows = tape.rows;
        Error::check_len("output gradient", rows * self.output_dim(), d_out.len())?;
        Error::check_len("parameter gradient", self.params.len(), grad.len())?;
        let Tape { acts, delta, prev, .. } = tape;
        delta.clear();
        delta.extend_from_slice(d_out);
        for l in (0..self.layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let input = &acts[l];
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            gemm(View::new(delta, rows, fan_out).t(), View::new(input, rows, fan_in), T::one(), gw);
            for row in delta.chunks_exact(fan_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g = *g + d;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            prev.clear();
            prev.resize(rows * fan_in, T::zero());
            gemm(View::new(delta, rows, fan_out), View::new(w, fan_out, fan_in), T::zero(), prev);
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= T::zero() {
                    *p = T::zero();
                }
            }
            std::mem::swap(delta, prev);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.forward_one(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(Mlp::<f32>::zeros(&[3]).is_err());
        assert!(Mlp::<f32>::zeros(&[3, 0, 1]).is_err());
    }
}
