//! Dense multilayer perceptrons with a per-forward-pass tape.
//!
//! Parameters for a whole network live in one flat [`ParamGroup`]. Each
//! layer occupies `rows * cols` weights (row-major, `rows` = fan-out)
//! followed by `rows` biases. A forward pass records the layer inputs and
//! pre-activations in an [`MlpTape`]; [`backward`] replays them in reverse
//! and accumulates exact gradients into the group's gradient slots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GatnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(GatnError::config(format!(
                "an MLP needs at least an input and an output width, got {widths:?}"
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(GatnError::config(format!("layer width {pos} is zero")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(GatnError::config(format!(
                "{} layers but {} activations",
                widths.len() - 1,
                activations.len()
            )));
        }
        Ok(Self {
            widths,
            activations,
            seed,
        })
    }

    /// Hidden layers use tanh, the output layer is linear. Every network in
    /// the crate (Q heads, logit heads, VAE halves) follows this layout.
    pub fn tanh_head(widths: &[usize], seed: u64) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Tanh; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self::new(widths.to_vec(), activations, seed)
    }

    /// Rebuilds a tanh-head spec from stored `(rows, cols)` layer shapes.
    pub fn from_shapes(shapes: &[(usize, usize)], seed: u64) -> Result<Self> {
        let Some(&(_, first_cols)) = shapes.first() else {
            return Err(GatnError::config("no layer shapes"));
        };
        let mut widths = vec![first_cols];
        for (i, &(rows, cols)) in shapes.iter().enumerate() {
            if cols != *widths.last().unwrap() {
                return Err(GatnError::config(format!(
                    "layer {i} expects {cols} inputs but the previous layer emits {}",
                    widths.last().unwrap()
                )));
            }
            widths.push(rows);
        }
        Self::tanh_head(&widths, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|&(r, c)| r * c + r).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, name: &str) -> ParamGroup {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut values = Vec::with_capacity(self.param_count());
        for (rows, cols) in self.shapes() {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            values.extend((0..rows * cols).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, rows));
        }
        ParamGroup::from_values(name, values, self.shapes())
    }

    pub fn zeros(&self, name: &str) -> ParamGroup {
        ParamGroup::from_values(name, vec![0.0; self.param_count()], self.shapes())
    }
}

/// One trainable parameter group with its gradient slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    name: String,
    values: Vec<f64>,
    grads: Vec<f64>,
    shapes: Vec<(usize, usize)>,
    generation: u64,
}

impl ParamGroup {
    pub fn from_values(name: &str, values: Vec<f64>, shapes: Vec<(usize, usize)>) -> Self {
        let grads = vec![0.0; values.len()];
        Self {
            name: name.to_string(),
            values,
            grads,
            shapes,
            generation: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Direct write access. Invalidates outstanding tapes.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Clears gradients. Tapes recorded before the reset become stale.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.generation += 1;
    }

    /// Adds a hand-derived gradient contribution.
    pub fn accumulate(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.grads.len(), "gradient length for `{}`", self.name);
        self.grads.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub(crate) fn apply_update(&mut self, lr: f64) {
        for (v, g) in self.values.iter_mut().zip(self.grads.iter_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
        self.generation += 1;
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut at = 0;
        for &(r, c) in &self.shapes {
            offsets.push(at);
            at += r * c + r;
        }
        offsets
    }
}

/// Trace of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    group: String,
    generation: u64,
    /// `inputs[l]` is the input to layer `l`; the final entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().unwrap()
    }
}

fn check_compatible(spec: &MlpSpec, params: &ParamGroup) -> Result<()> {
    let shapes = spec.shapes();
    if shapes.as_slice() != params.shapes() || params.len() != spec.param_count() {
        return Err(GatnError::config(format!(
            "parameter group `{}` has layer shapes {:?}, network expects {:?}",
            params.name(),
            params.shapes(),
            shapes
        )));
    }
    Ok(())
}

pub fn mlp_forward(spec: &MlpSpec, params: &ParamGroup, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
    check_compatible(spec, params)?;
    if input.len() != spec.input_dim() {
        return Err(GatnError::config(format!(
            "layer 0 of `{}` expects input width {}, got {}",
            params.name(),
            spec.input_dim(),
            input.len()
        )));
    }
    let offsets = params.layer_offsets();
    let mut inputs = vec![input.to_vec()];
    let mut pre = Vec::with_capacity(offsets.len());
    for (layer, (&(rows, cols), &act)) in spec.shapes().iter().zip(&spec.activations).enumerate() {
        let w = &params.values[offsets[layer]..offsets[layer] + rows * cols];
        let b = &params.values[offsets[layer] + rows * cols..offsets[layer] + rows * cols + rows];
        let x = inputs.last().unwrap();
        let z: Vec<f64> = (0..rows)
            .map(|r| {
                let row = &w[r * cols..(r + 1) * cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[r]
            })
            .collect();
        let y = z.iter().map(|&v| act.apply(v)).collect();
        pre.push(z);
        inputs.push(y);
    }
    let output = inputs.last().unwrap().clone();
    Ok((
        output,
        MlpTape {
            group: params.name.clone(),
            generation: params.generation,
            inputs,
            pre,
        },
    ))
}

/// Reverse pass: accumulates into `params` grads and returns d(loss)/d(input).
pub fn backward(spec: &MlpSpec, params: &mut ParamGroup, tape: &MlpTape, out_grad: &[f64]) -> Result<Vec<f64>> {
    if tape.group != params.name || tape.generation != params.generation {
        return Err(GatnError::usage(format!(
            "stale tape for `{}`: recorded at generation {}, group is at {}",
            tape.group, tape.generation, params.generation
        )));
    }
    if out_grad.len() != spec.output_dim() {
        return Err(GatnError::usage(format!(
            "output gradient has length {}, network `{}` emits {}",
            out_grad.len(),
            params.name,
            spec.output_dim()
        )));
    }
    let offsets = params.layer_offsets();
    let shapes = spec.shapes();
    let mut grad = out_grad.to_vec();
    for layer in (0..shapes.len()).rev() {
        let (rows, cols) = shapes[layer];
        let act = spec.activations[layer];
        let out = &tape.inputs[layer + 1];
        let x = &tape.inputs[layer];
        let g_pre: Vec<f64> = (0..rows)
            .map(|r| grad[r] * act.derivative(tape.pre[layer][r], out[r]))
            .collect();
        let w_at = offsets[layer];
        let b_at = w_at + rows * cols;
        let mut g_in = vec![0.0; cols];
        for (r, &gr) in g_pre.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for c in 0..cols {
                params.grads[w_at + r * cols + c] += gr * x[c];
                g_in[c] += params.values[w_at + r * cols + c] * gr;
            }
            params.grads[b_at + r] += gr;
        }
        grad = g_in;
    }
    Ok(grad)
}

/// A spec paired with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ParamGroup,
}

impl Network {
    pub fn new(spec: MlpSpec, name: &str) -> Self {
        let params = spec.init(name);
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: ParamGroup) -> Result<Self> {
        check_compatible(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        mlp_forward(&self.spec, &self.params, input)
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.spec, &self.params, input).map(|(out, _)| out)
    }

    pub fn backward(&mut self, tape: &MlpTape, out_grad: &[f64]) -> Result<Vec<f64>> {
        backward(&self.spec, &mut self.params, tape, out_grad)
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(rows: usize, cols: usize, act: Activation, values: Vec<f64>) -> Network {
        let spec = MlpSpec::new(vec![cols, rows], vec![act], 0).unwrap();
        let params = ParamGroup::from_values("t", values, spec.shapes());
        Network::from_params(spec, params).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single_layer(2, 2, Activation::Identity, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(net.predict(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_matrix_multiply() {
        let net = single_layer(1, 2, Activation::Identity, vec![1.0, 1.0, 0.5]);
        assert_eq!(net.predict(&[1.0, 2.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn zero_tanh_layer_outputs_zero() {
        let net = single_layer(3, 2, Activation::Tanh, vec![0.0; 9]);
        assert_eq!(net.predict(&[5.0, -7.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let net = single_layer(1, 2, Activation::Identity, vec![1.0, 1.0, 0.5]);
        let err = net.predict(&[1.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn scalar_weight_gradient() {
        let mut net = single_layer(1, 1, Activation::Identity, vec![2.0, 0.0]);
        let (_, tape) = net.forward(&[3.0]).unwrap();
        let g_in = net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(net.params.grads()[0], 3.0);
        assert_eq!(net.params.grads()[1], 1.0);
        assert_eq!(g_in, vec![2.0]);
    }

    #[test]
    fn zero_upstream_leaves_grads() {
        let mut net = Network::new(MlpSpec::tanh_head(&[3, 4, 2], 1).unwrap(), "n");
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(net.params.grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_additive() {
        let mut once = Network::new(MlpSpec::tanh_head(&[3, 5, 2], 9).unwrap(), "n");
        let mut twice = once.clone();
        let x = [0.3, -0.4, 0.9];
        let g = [0.7, -1.3];
        let (_, tape) = once.forward(&x).unwrap();
        once.backward(&tape, &g).unwrap();
        let (_, tape) = twice.forward(&x).unwrap();
        twice.backward(&tape, &g).unwrap();
        twice.backward(&tape, &g).unwrap();
        for (a, b) in once.params.grads().iter().zip(twice.params.grads()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn stale_tape_rejected_after_reset() {
        let mut net = Network::new(MlpSpec::tanh_head(&[2, 2], 1).unwrap(), "n");
        let (_, tape) = net.forward(&[1.0, 1.0]).unwrap();
        net.params.zero_grad();
        let err = net.backward(&tape, &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, GatnError::Usage(_)));
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let spec = MlpSpec::tanh_head(&[4, 6], 3).unwrap();
        let p = spec.init("g");
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(p.values()[..24].iter().all(|v| v.abs() <= bound));
        assert!(p.values()[24..].iter().all(|&v| v == 0.0));
        assert_eq!(spec.init("g"), p);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], vec![], 0).is_err());
        assert!(MlpSpec::new(vec![3, 0], vec![Activation::Tanh], 0).is_err());
        let spec = MlpSpec::tanh_head(&[3, 8, 2], 0).unwrap();
        assert_eq!(spec.activations.last(), Some(&Activation::Identity));
        assert_eq!(MlpSpec::from_shapes(&spec.shapes(), 0).unwrap(), spec);
    }

    #[test]
    fn relu_blocks_negative_gradient() {
        let mut net = single_layer(1, 1, Activation::Relu, vec![-1.0, 0.0]);
        let (out, tape) = net.forward(&[2.0]).unwrap();
        assert_eq!(out, vec![0.0]);
        net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(net.params.grad_norm(), 0.0);
    }
}
