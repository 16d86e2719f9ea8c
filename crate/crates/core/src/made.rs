//! MADE hypernetwork: a masked MLP whose outputs for dimension `t` depend only
//! on inputs `x_{<t}`.

use rand::Rng;

use crate::error::{ElfError, Result};
use crate::linear::MaskedLinear;
use crate::tensor::Tensor;

/// Degrees of the hidden units: cycling `1..d-1`, or all zero when `d == 1`.
fn hidden_degrees(d: usize, width: usize) -> Vec<usize> {
    if d == 1 {
        vec![0; width]
    } else {
        (0..width).map(|k| k % (d - 1) + 1).collect()
    }
}

/// Binary masks for an MLP `d → hidden_sizes… → d·params_per_dim`.
///
/// Input `i` (1-based) has degree `i`. A hidden unit of degree `m` sees inputs
/// with degree `≤ m`; output block `t` sees hidden units with degree `< t`.
/// Outputs are laid out dimension-major: column `t·params_per_dim + j`.
pub fn made_masks(d: usize, hidden_sizes: &[usize], params_per_dim: usize) -> Vec<Tensor> {
    assert!(d >= 1, "made_masks needs d >= 1");
    let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
    let mut prev: Vec<usize> = (1..=d).collect();
    for &width in hidden_sizes {
        let deg = hidden_degrees(d, width);
        let mut m = Tensor::zeros(&[width, prev.len()]);
        for (o, &dout) in deg.iter().enumerate() {
            for (i, &din) in prev.iter().enumerate() {
                if dout >= din {
                    m.set(o, i, 1.0);
                }
            }
        }
        masks.push(m);
        prev = deg;
    }
    let n_out = d * params_per_dim;
    let mut m = Tensor::zeros(&[n_out, prev.len()]);
    for o in 0..n_out {
        let t = o / params_per_dim + 1;
        for (i, &din) in prev.iter().enumerate() {
            if t > din {
                m.set(o, i, 1.0);
            }
        }
    }
    masks.push(m);
    masks
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_d1(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Masked MLP with ELU hidden activations producing `params_per_dim` values for
/// each of the `d` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct MadeHypernet {
    d: usize,
    params_per_dim: usize,
    pub(crate) layers: Vec<MaskedLinear>,
}

/// Activations saved by [`MadeHypernet::forward_cached`].
#[derive(Clone, Debug)]
pub(crate) struct MadeCache {
    /// Input to each linear layer.
    inputs: Vec<Tensor>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Tensor>,
}

impl MadeHypernet {
    /// Glorot-uniform hidden weights; the output layer starts at zero weight
    /// with bias `out_bias[j]` for parameter slot `j` of every dimension.
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        hidden_sizes: &[usize],
        out_bias: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || out_bias.is_empty() {
            return Err(ElfError::Config("hypernetwork needs d >= 1 and outputs".into()));
        }
        if hidden_sizes.contains(&0) {
            return Err(ElfError::Config("hidden layer widths must be positive".into()));
        }
        let ppd = out_bias.len();
        let masks = made_masks(d, hidden_sizes, ppd);
        let n_layers = masks.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, mask) in masks.into_iter().enumerate() {
            let (n_out, n_in) = (mask.rows(), mask.cols());
            let (weight, bias) = if l + 1 == n_layers {
                let bias: Vec<f64> = (0..n_out).map(|o| out_bias[o % ppd]).collect();
                (Tensor::zeros(&[n_out, n_in]), Tensor::vector(bias))
            } else {
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                let w: Vec<f64> = mask
                    .data()
                    .iter()
                    .map(|&m| if m == 0.0 { 0.0 } else { rng.random_range(-bound..bound) })
                    .collect();
                (Tensor::from_vec(&[n_out, n_in], w)?, Tensor::zeros(&[n_out]))
            };
            layers.push(MaskedLinear::new(weight, bias, mask)?);
        }
        Ok(Self {
            d,
            params_per_dim: ppd,
            layers,
        })
    }

    /// Rebuilds a hypernetwork from stored weights; masks are regenerated.
    pub fn from_weights(d: usize, params_per_dim: usize, weights: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let hidden: Vec<usize> = weights[..weights.len().saturating_sub(1)]
            .iter()
            .map(|(w, _)| w.shape().first().copied().unwrap_or(0))
            .collect();
        let masks = made_masks(d, &hidden, params_per_dim);
        if masks.len() != weights.len() {
            return Err(ElfError::Dimension("hypernetwork layer count mismatch".into()));
        }
        let layers = weights
            .into_iter()
            .zip(masks)
            .map(|((w, b), m)| MaskedLinear::new(w, b, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d,
            params_per_dim,
            layers,
        })
    }

    pub fn dims(&self) -> usize {
        self.d
    }

    pub fn params_per_dim(&self) -> usize {
        self.params_per_dim
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(MaskedLinear::out_dim)
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[MaskedLinear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MaskedLinear] {
        &mut self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MadeCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            if l + 1 == self.layers.len() {
                return Ok((z, MadeCache { inputs, pre }));
            }
            h = z.map(elu);
            pre.push(z);
        }
        unreachable!("hypernetwork has at least one layer")
    }

    /// Accumulates parameter gradients into `grads` (`[w0, b0, w1, b1, …]`)
    /// and returns the gradient with respect to the input.
    pub(crate) fn backward(&self, cache: &MadeCache, grad_out: Tensor, grads: &mut [Tensor]) -> Tensor {
        let mut g = grad_out;
        for l in (0..self.layers.len()).rev() {
            let (gw, rest) = grads[2 * l..].split_at_mut(1);
            let mut gin = self.layers[l].backward(&cache.inputs[l], &g, &mut gw[0], &mut rest[0]);
            if l > 0 {
                for (gi, z) in gin.data_mut().iter_mut().zip(cache.pre[l - 1].data()) {
                    *gi *= elu_d1(*z);
                }
            }
            g = gin;
        }
        g
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_dimension_has_no_input_connections() {
        let masks = made_masks(1, &[8, 8], 4);
        assert!(masks[0].data().iter().all(|&m| m == 0.0));
        // the output layer still sees the (constant) hidden units
        assert!(masks[2].data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn no_hidden_layers_is_strictly_lower_triangular() {
        let masks = made_masks(3, &[], 1);
        let want = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        for (t, row) in want.iter().enumerate() {
            assert_eq!(masks[0].row(t), row);
        }
    }

    #[test]
    fn mask_product_is_autoregressive() {
        // connectivity[o][i] > 0 iff some path exists from input i to output o
        for d in 1..6 {
            let ppd = 3;
            let masks = made_masks(d, &[7, 5, 9], ppd);
            let mut conn = masks[0].clone();
            for m in &masks[1..] {
                let mut next = Tensor::zeros(&[m.rows(), conn.cols()]);
                for o in 0..m.rows() {
                    for i in 0..conn.cols() {
                        let s: f64 = (0..m.cols()).map(|k| m.at(o, k) * conn.at(k, i)).sum();
                        next.set(o, i, s);
                    }
                }
                conn = next;
            }
            for o in 0..d * ppd {
                let t = o / ppd;
                for i in 0..d {
                    if i >= t {
                        assert_eq!(conn.at(o, i), 0.0, "d={d} output {o} sees input {i}");
                    } else {
                        assert!(conn.at(o, i) > 0.0, "d={d} output {o} misses input {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MadeHypernet::new(3, &[16, 16], &[1.0, -2.0], &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 2.0, -3.0], vec![5.0, 5.0, 5.0]]).unwrap();
        let out = net.forward(&x).unwrap();
        for b in 0..2 {
            assert_eq!(out.row(b), &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        }
    }
}
