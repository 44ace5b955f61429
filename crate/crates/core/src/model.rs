//! Small fully connected classifier with the feature extractor (all hidden
//! layers) exposed separately from the linear head, plus hand-written
//! reverse-mode gradients.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` stores its weight
//! matrix (`out x in`, row-major) followed by its bias; hidden layers come
//! first and the classifier head last.

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, dot, Matrix};
use crate::partition::Dataset;
use crate::rng::SimRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let s = ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "model.hidden_dims",
                "need at least one hidden layer and every width >= 1",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "model.num_classes",
                "need at least 2 classes",
            ));
        }
        Ok(())
    }

    /// Width of the last hidden layer.
    pub fn feature_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated non-empty")
    }

    /// `(in, out)` of every layer including the head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.num_classes));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter (or gradient, or momentum) vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Little-endian `f64` values, no header.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in &self.0 {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::shape(format!(
                "parameter file length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(ParamVector(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ))
    }

    /// One value per line, shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in &self.0 {
            writeln!(out, "{v:?}")?;
        }
        Ok(())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Per-sample features with the labels of the samples they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub z: Matrix,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations cached by a feature forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    input: Matrix,
    activations: Vec<Matrix>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("at least one hidden layer")
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

impl Layer {
    #[inline]
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w_off..self.b_off]
    }

    #[inline]
    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b_off..self.b_off + self.fan_out]
    }

    /// `x W^T + b` followed by `act` when given.
    fn forward(&self, p: &[f64], x: &Matrix, act: Option<Activation>) -> Matrix {
        let w = self.weights(p);
        let b = self.bias(p);
        let mut out = Matrix::zeros(x.rows(), self.fan_out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let orow = out.row_mut(r);
            for (o, slot) in orow.iter_mut().enumerate() {
                let z = dot(xr, &w[o * self.fan_in..(o + 1) * self.fan_in]) + b[o];
                *slot = match act {
                    Some(a) => a.apply(z),
                    None => z,
                };
            }
        }
        out
    }

    /// Accumulates `dW += dZ^T x`, `db += sum_rows dZ` into `grad` and
    /// returns `dZ W` when `want_input_grad`.
    fn backward(
        &self,
        p: &[f64],
        x: &Matrix,
        dz: &Matrix,
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Matrix> {
        let w = self.weights(p);
        let (gw, gb) =
            grad[self.w_off..self.b_off + self.fan_out].split_at_mut(self.b_off - self.w_off);
        for r in 0..dz.rows() {
            let xr = x.row(r);
            for (o, &d) in dz.row(r).iter().enumerate() {
                if d != 0.0 {
                    axpy(d, xr, &mut gw[o * self.fan_in..(o + 1) * self.fan_in]);
                }
                gb[o] += d;
            }
        }
        want_input_grad.then(|| {
            let mut dx = Matrix::zeros(dz.rows(), self.fan_in);
            for r in 0..dz.rows() {
                let dxr = dx.row_mut(r);
                for (o, &d) in dz.row(r).iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &w[o * self.fan_in..(o + 1) * self.fan_in], dxr);
                    }
                }
            }
            dx
        })
    }
}

/// Cross-entropy forward pass with the head gradient already filled in and
/// the upstream gradient at the features ready for [`Mlp::backprop_features`].
#[derive(Clone, Debug)]
pub struct CePass {
    pub loss: f64,
    pub correct: usize,
    pub features: FeatureBatch,
    pub tape: ForwardTape,
    pub grad: ParamVector,
    pub d_features: Matrix,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: ModelSpec,
    layers: Vec<Layer>,
    param_count: usize,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            let w_off = off;
            let b_off = w_off + fan_in * fan_out;
            off = b_off + fan_out;
            layers.push(Layer {
                fan_in,
                fan_out,
                w_off,
                b_off,
            });
        }
        Ok(Mlp {
            spec,
            layers,
            param_count: off,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn hidden(&self) -> &[Layer] {
        &self.layers[..self.layers.len() - 1]
    }

    fn head(&self) -> &Layer {
        self.layers.last().expect("head layer")
    }

    /// Offsets `(weights, bias)` of layer `l` in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        (self.layers[l].w_off, self.layers[l].b_off)
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases of every layer.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = SimRng::seed_from_u64(seed);
        let mut p = vec![0.0; self.param_count];
        for layer in &self.layers {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for v in &mut p[layer.w_off..layer.b_off + layer.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector(p)
    }

    fn check_params(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.param_count {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, model needs {}",
                x.len(),
                self.param_count
            )));
        }
        Ok(())
    }

    /// Features of the last hidden layer plus the tape for a backward pass.
    pub fn forward_features(&self, x: &[f64], inputs: &Matrix) -> Result<(Matrix, ForwardTape)> {
        self.check_params(x)?;
        if inputs.cols() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "input has {} columns, model expects {}",
                inputs.cols(),
                self.spec.input_dim
            )));
        }
        let mut activations: Vec<Matrix> = Vec::with_capacity(self.hidden().len());
        for layer in self.hidden() {
            let prev = activations.last().unwrap_or(inputs);
            let a = layer.forward(x, prev, Some(self.spec.activation));
            activations.push(a);
        }
        let z = activations.last().expect("hidden layer").clone();
        Ok((
            z,
            ForwardTape {
                input: inputs.clone(),
                activations,
            },
        ))
    }

    /// Features only, without keeping a tape (cross-feature evaluation).
    pub fn features(&self, x: &[f64], inputs: &Matrix) -> Result<Matrix> {
        self.check_params(x)?;
        if inputs.cols() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "input has {} columns, model expects {}",
                inputs.cols(),
                self.spec.input_dim
            )));
        }
        let mut h: Option<Matrix> = None;
        for layer in self.hidden() {
            let next = layer.forward(x, h.as_ref().unwrap_or(inputs), Some(self.spec.activation));
            h = Some(next);
        }
        Ok(h.expect("hidden layer"))
    }

    pub fn feature_batch(&self, x: &[f64], batch: &Dataset) -> Result<(FeatureBatch, ForwardTape)> {
        let (z, tape) = self.forward_features(x, batch.features())?;
        Ok((
            FeatureBatch {
                z,
                labels: batch.labels().to_vec(),
            },
            tape,
        ))
    }

    pub fn forward_logits(&self, x: &[f64], features: &Matrix) -> Result<Matrix> {
        self.check_params(x)?;
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(format!(
                "features have {} columns, head expects {}",
                features.cols(),
                self.feature_dim()
            )));
        }
        Ok(self.head().forward(x, features, None))
    }

    /// Forward pass, mean softmax cross-entropy, head gradient and
    /// `dL/dz` for the hidden stack.
    pub fn ce_pass(&self, x: &[f64], batch: &Dataset) -> Result<CePass> {
        let (features, tape) = self.feature_batch(x, batch)?;
        let logits = self.forward_logits(x, &features.z)?;
        let b = batch.len();
        let inv_b = 1.0 / b as f64;
        let mut dlogits = Matrix::zeros(b, self.num_classes());
        let mut loss = 0.0;
        let mut correct = 0;
        for (r, &label) in batch.labels().iter().enumerate() {
            let row = logits.row(r);
            let (argmax, max) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
                    );
            if argmax == label {
                correct += 1;
            }
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            loss += log_z - row[label];
            let drow = dlogits.row_mut(r);
            for (c, d) in drow.iter_mut().enumerate() {
                let p = (row[c] - log_z).exp();
                *d = (p - if c == label { 1.0 } else { 0.0 }) * inv_b;
            }
        }
        loss *= inv_b;

        let mut grad = ParamVector::zeros(self.param_count);
        let d_features = self
            .head()
            .backward(x, &features.z, &dlogits, &mut grad, true)
            .expect("input grad requested");
        Ok(CePass {
            loss,
            correct,
            features,
            tape,
            grad,
            d_features,
        })
    }

    /// Accumulates `J^T d_features` (J = dz/dx at the taped point) into `grad`.
    pub fn backprop_features(
        &self,
        x: &[f64],
        tape: &ForwardTape,
        d_features: &Matrix,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_params(x)?;
        if grad.len() != self.param_count {
            return Err(Error::shape("gradient buffer length"));
        }
        if d_features.shape() != tape.features().shape() {
            return Err(Error::shape(format!(
                "upstream is {:?}, features are {:?}",
                d_features.shape(),
                tape.features().shape()
            )));
        }
        let act = self.spec.activation;
        let mut d_act = d_features.clone();
        for l in (0..self.hidden().len()).rev() {
            let a = &tape.activations[l];
            for (d, &av) in d_act.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *d *= act.grad_from_output(av);
            }
            let input = if l == 0 {
                &tape.input
            } else {
                &tape.activations[l - 1]
            };
            match self.layers[l].backward(x, input, &d_act, grad, l > 0) {
                Some(next) => d_act = next,
                None => break,
            }
        }
        Ok(())
    }

    /// Mean cross-entropy, its full gradient and the batch features.
    pub fn ce_loss_grad(
        &self,
        x: &[f64],
        batch: &Dataset,
    ) -> Result<(f64, ParamVector, FeatureBatch)> {
        let mut pass = self.ce_pass(x, batch)?;
        self.backprop_features(x, &pass.tape, &pass.d_features, &mut pass.grad)?;
        Ok((pass.loss, pass.grad, pass.features))
    }

    /// Vector-Jacobian product of the feature map: `J^T upstream`.
    pub fn feature_vjp_grad(
        &self,
        x: &[f64],
        tape: &ForwardTape,
        upstream: &Matrix,
    ) -> Result<ParamVector> {
        let mut g = ParamVector::zeros(self.param_count);
        self.backprop_features(x, tape, upstream, &mut g)?;
        Ok(g)
    }

    /// Mean cross-entropy and accuracy on a whole dataset.
    pub fn evaluate(&self, x: &[f64], data: &Dataset) -> Result<(f64, f64)> {
        let z = self.features(x, data.features())?;
        let logits = self.forward_logits(x, &z)?;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (r, &label) in data.labels().iter().enumerate() {
            let row = logits.row(r);
            let (argmax, max) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
                    );
            correct += usize::from(argmax == label);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += log_z - row[label];
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Multiply-accumulates of one feature-extractor pass over `batch` rows.
    pub fn feature_forward_macs(&self, batch: usize) -> u64 {
        let per: usize = self.hidden().iter().map(|l| l.fan_in * l.fan_out).sum();
        (per * batch) as u64
    }

    /// Feature extractor plus head.
    pub fn full_forward_macs(&self, batch: usize) -> u64 {
        let per: usize = self.layers.iter().map(|l| l.fan_in * l.fan_out).sum();
        (per * batch) as u64
    }

    /// Weight gradients of every layer plus input gradients of every layer
    /// except the first.
    pub fn backward_macs(&self, batch: usize) -> u64 {
        let weights: usize = self.layers.iter().map(|l| l.fan_in * l.fan_out).sum();
        let inputs: usize = self.layers[1..].iter().map(|l| l.fan_in * l.fan_out).sum();
        ((weights + inputs) * batch) as u64
    }
}
