use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    weight_offset: usize,
    bias_offset: usize,
}

/// Fully connected network with all parameters in one flat buffer so the
/// optimizer can update it as a single slice. Weights are row-major `[out × in]`
/// and each layer's bias follows its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<Real>,
}

/// Activations cached by a forward pass: the input followed by every layer's
/// post-activation output.
#[derive(Debug, Clone)]
pub struct MlpTape {
    activations: Vec<Vec<Real>>,
}

impl MlpTape {
    pub fn output(&self) -> &[Real] {
        self.activations.last().expect("tape holds the input")
    }
}

impl Mlp {
    /// Builds a zero-initialized network. `dims` lists layer widths from input
    /// to output; `activations` has one entry per layer.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Contract(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Contract("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(activations.len());
        let mut offset = 0;
        for (pair, &activation) in dims.windows(2).zip(activations) {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            layers.push(LayerShape {
                in_dim,
                out_dim,
                activation,
                weight_offset: offset,
                bias_offset: offset + in_dim * out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        Ok(Self {
            layers,
            params: vec![0.0; offset],
        })
    }

    /// Uniform Glorot initialization of weights; biases stay zero.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &self.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as Real).sqrt();
            let n = layer.in_dim * layer.out_dim;
            for w in &mut self.params[layer.weight_offset..layer.weight_offset + n] {
                *w = rng.random_range(-limit..limit);
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[Real] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Real] {
        &mut self.params
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [Real] {
        let l = &self.layers[layer];
        &mut self.params[l.weight_offset..l.weight_offset + l.in_dim * l.out_dim]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [Real] {
        let l = &self.layers[layer];
        &mut self.params[l.bias_offset..l.bias_offset + l.out_dim]
    }

    /// Replaces the parameter buffer; the length must match.
    pub fn set_params(&mut self, params: Vec<Real>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite MLP parameter".into()))
        }
    }

    /// Forward pass that records the activations needed by [`Mlp::backward`].
    pub fn forward(&self, input: &[Real]) -> Result<MlpTape> {
        if input.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "MLP expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let x = activations.last().expect("non-empty");
            let w = &self.params[layer.weight_offset..];
            let b = &self.params[layer.bias_offset..layer.bias_offset + layer.out_dim];
            let mut y = b.to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<Real>();
                if layer.activation == Activation::Relu && *yo < 0.0 {
                    *yo = 0.0;
                }
            }
            activations.push(y);
        }
        Ok(MlpTape { activations })
    }

    /// Forward pass returning only the output.
    pub fn eval(&self, input: &[Real]) -> Result<Vec<Real>> {
        let mut tape = self.forward(input)?;
        Ok(tape.activations.pop().expect("non-empty"))
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` (same layout
    /// as [`Mlp::params`]) and returns the gradient w.r.t. the input.
    pub fn backward(&self, tape: &MlpTape, d_output: &[Real], grads: &mut [Real]) -> Vec<Real> {
        debug_assert_eq!(grads.len(), self.params.len());
        debug_assert_eq!(d_output.len(), self.output_dim());
        let mut upstream = d_output.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.activations[li];
            let y = &tape.activations[li + 1];
            if layer.activation == Activation::Relu {
                for (g, &yo) in upstream.iter_mut().zip(y) {
                    if yo <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut d_in = vec![0.0; layer.in_dim];
            for (o, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = layer.weight_offset + o * layer.in_dim;
                grads[layer.bias_offset + o] += g;
                for i in 0..layer.in_dim {
                    grads[row + i] += g * x[i];
                    d_in[i] += g * self.params[row + i];
                }
            }
            upstream = d_in;
        }
        upstream
    }
}

/// One-shot forward pass returning the output together with the tape that
/// drives the reverse pass.
pub fn mlp_forward_backward(net: &Mlp, input: &[Real]) -> Result<(Vec<Real>, MlpTape)> {
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite MLP input".into()));
    }
    net.check_finite()?;
    let tape = net.forward(input)?;
    Ok((tape.output().to_vec(), tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_bias() {
        let mut net = Mlp::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        net.bias_mut(0).copy_from_slice(&[0.5, -1.5]);
        let (out, _) = mlp_forward_backward(&net, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.5]);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        assert!(matches!(
            mlp_forward_backward(&net, &[1.0]),
            Err(Error::Contract(_))
        ));
        assert!(Mlp::zeros(&[3, 2], &[]).is_err());
    }

    #[test]
    fn nan_parameter_is_numeric_error() {
        let mut net = Mlp::zeros(&[2, 2], &[Activation::Relu]).unwrap();
        net.params_mut()[1] = Real::NAN;
        assert!(matches!(
            mlp_forward_backward(&net, &[1.0, 1.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn linear_layer_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Mlp::zeros(&[5, 4], &[Activation::Identity]).unwrap();
        net.init_glorot(&mut rng);
        for b in net.bias_mut(0) {
            *b = rng.random_range(-1.0..1.0);
        }
        let x: Vec<Real> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = net.eval(&x).unwrap();
        let p = net.params();
        for o in 0..4 {
            let mut acc = p[20 + o];
            for i in 0..5 {
                acc += p[o * 5 + i] * x[i];
            }
            assert!((acc - out[o]).abs() <= 1e-12);
        }
    }
}
