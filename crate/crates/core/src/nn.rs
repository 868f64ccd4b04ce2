//! Minimal differentiable function approximators.
//!
//! Multilayer perceptrons with a fixed topology over a flat parameter vector,
//! batched forward passes that record a [`Tape`], exact reverse-mode
//! gradients, Adam and target-network soft updates. Everything is `f64`.
//!
//! Weights of layer `l` are stored row-major with shape `(out_dim, in_dim)`,
//! followed by `out_dim` biases. Batches are row-major matrices, one sample
//! per row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }
}

/// Topology of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
}

impl MlpSpec {
    /// `hidden` is applied after every layer except the last, which is identity.
    pub fn new(layer_dims: Vec<usize>, hidden: Activation, seed: u64) -> Result<Self> {
        let layers = layer_dims.len().saturating_sub(1);
        let mut activations = vec![hidden; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self::with_activations(layer_dims, activations, seed)
    }

    pub fn with_activations(
        layer_dims: Vec<usize>,
        activations: Vec<Activation>,
        seed: u64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least 2 layer dims, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "layer dims must be positive: {layer_dims:?}"
            )));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(Error::DimensionMismatch {
                context: "activations per layer",
                expected: layer_dims.len() - 1,
                actual: activations.len(),
            });
        }
        Ok(Self {
            layer_dims,
            activations,
            seed,
        })
    }

    pub fn with_output_activation(mut self, activation: Activation) -> Self {
        if let Some(last) = self.activations.last_mut() {
            *last = activation;
        }
        self
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Glorot-uniform weights drawn from the spec seed, zero biases.
    pub fn init_params(&self) -> ParamSet {
        let mut params = ParamSet::zeros(&self.layer_dims);
        let mut rng = rng::stream(self.seed, rng::streams::INIT);
        let layout = params.layout.clone();
        let values = params.values_mut();
        for slot in layout {
            let limit = (6.0 / (slot.in_dim + slot.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut values[slot.weight_offset..slot.bias_offset] {
                *w = dist.sample(&mut rng);
            }
        }
        params
    }

    pub fn zero_params(&self) -> ParamSet {
        ParamSet::zeros(&self.layer_dims)
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.layout.len() != self.num_layers()
            || params
                .layout
                .iter()
                .zip(self.layer_dims.windows(2))
                .any(|(slot, w)| slot.in_dim != w[0] || slot.out_dim != w[1])
        {
            return Err(Error::DimensionMismatch {
                context: "parameter set for MLP spec",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }
}

/// Location of one layer inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn extent(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Flat vector of all weights and biases plus the layer index.
///
/// Every mutation through [`ParamSet::values_mut`] assigns a new revision,
/// which is how tapes recorded against older values are detected.
#[derive(Debug, Clone)]
pub struct ParamSet {
    values: Vec<f64>,
    layout: Vec<LayerSlot>,
    revision: u64,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.values == other.values
    }
}

impl ParamSet {
    pub fn zeros(layer_dims: &[usize]) -> Self {
        let mut layout = Vec::with_capacity(layer_dims.len().saturating_sub(1));
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let slot = LayerSlot {
                in_dim: w[0],
                out_dim: w[1],
                weight_offset: offset,
                bias_offset: offset + w[0] * w[1],
            };
            offset += slot.extent();
            layout.push(slot);
        }
        Self {
            values: vec![0.0; offset],
            layout,
            revision: fresh_revision(),
        }
    }

    pub fn from_values(layer_dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(layer_dims);
        if values.len() != params.values.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter values",
                expected: params.values.len(),
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameter values",
                index,
                value,
            });
        }
        params.values = values;
        Ok(params)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.revision = fresh_revision();
        &mut self.values
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layout.iter().map(|s| s.in_dim).collect();
        if let Some(last) = self.layout.last() {
            dims.push(last.out_dim);
        }
        dims
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let slot = self.layout[layer];
        &self.values[slot.weight_offset..slot.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let slot = self.layout[layer];
        &self.values[slot.bias_offset..slot.bias_offset + slot.out_dim]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let slot = self.layout[layer];
        &mut self.values_mut()[slot.weight_offset..slot.bias_offset]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let slot = self.layout[layer];
        &mut self.values_mut()[slot.bias_offset..slot.bias_offset + slot.out_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Shape index followed by the little-endian `f64` values.
    ///
    /// Layout: magic `UOEPPRM1`, `u64` layer count, per layer `u64` in_dim,
    /// out_dim, offset and extent, then `u64` value count and the values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&(self.layout.len() as u64).to_le_bytes())?;
        for slot in &self.layout {
            for v in [slot.in_dim, slot.out_dim, slot.weight_offset, slot.extent()] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: Default::default(),
            reason: reason.to_owned(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(bad("bad magic"));
        }
        let layers = read_u64(&mut r)? as usize;
        if layers == 0 || layers > 1 << 16 {
            return Err(bad("implausible layer count"));
        }
        let mut dims = Vec::with_capacity(layers + 1);
        let mut offset = 0usize;
        for l in 0..layers {
            let in_dim = read_u64(&mut r)? as usize;
            let out_dim = read_u64(&mut r)? as usize;
            let off = read_u64(&mut r)? as usize;
            let extent = read_u64(&mut r)? as usize;
            if off != offset || extent != in_dim * out_dim + out_dim {
                return Err(bad("inconsistent shape index"));
            }
            if l == 0 {
                dims.push(in_dim);
            } else if dims[l] != in_dim {
                return Err(bad("layer dims do not chain"));
            }
            dims.push(out_dim);
            offset += extent;
        }
        let count = read_u64(&mut r)? as usize;
        if count != offset {
            return Err(bad("value count disagrees with shape index"));
        }
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Self::from_values(&dims, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?)).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_owned(),
                reason,
            },
            other => other,
        })
    }
}

const PARAM_MAGIC: &[u8; 8] = b"UOEPPRM1";

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Dense row-major matrix; one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row(row: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: row.len(),
            data: row.to_vec(),
        }
    }

    /// Stacks equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Row-wise concatenation `[left | right]`.
    pub fn hconcat(left: &Matrix, right: &Matrix) -> Result<Self> {
        if left.rows != right.rows {
            return Err(Error::DimensionMismatch {
                context: "hconcat rows",
                expected: left.rows,
                actual: right.rows,
            });
        }
        let cols = left.cols + right.cols;
        let mut data = Vec::with_capacity(left.rows * cols);
        for r in 0..left.rows {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        Ok(Self {
            rows: left.rows,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }
}

/// `c = a · b` with explicit strides (`beta` scales the old `c`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds of every strided access are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
    revision: u64,
    layer_dims: Vec<usize>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &Matrix {
        &self.layer_inputs[0]
    }

    pub fn rows(&self) -> usize {
        self.output.rows
    }
}

fn affine(params: &ParamSet, layer: usize, input: &Matrix) -> Matrix {
    let slot = params.layout[layer];
    let mut pre = Matrix::zeros(input.rows, slot.out_dim);
    let bias = params.bias(layer);
    for r in 0..input.rows {
        pre.row_mut(r).copy_from_slice(bias);
    }
    gemm(
        input.rows,
        slot.in_dim,
        slot.out_dim,
        &input.data,
        slot.in_dim,
        1,
        params.weights(layer),
        1,
        slot.in_dim,
        1.0,
        &mut pre.data,
    );
    pre
}

fn check_input(spec: &MlpSpec, params: &ParamSet, input: &Matrix) -> Result<()> {
    spec.check_params(params)?;
    if input.cols != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "MLP input",
            expected: spec.input_dim(),
            actual: input.cols,
        });
    }
    Ok(())
}

/// Forward pass for a single input vector.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let (out, tape) = mlp_forward_batch(spec, params, &Matrix::from_row(input))?;
    Ok((out.data, tape))
}

pub fn mlp_forward_batch(spec: &MlpSpec, params: &ParamSet, input: &Matrix) -> Result<(Matrix, Tape)> {
    check_input(spec, params, input)?;
    let layers = spec.num_layers();
    let mut layer_inputs = Vec::with_capacity(layers);
    let mut pre_acts = Vec::with_capacity(layers);
    let mut current = input.clone();
    for (layer, &act) in spec.activations.iter().enumerate() {
        let pre = affine(params, layer, &current);
        let mut post = pre.clone();
        post.data.iter_mut().for_each(|v| *v = act.apply(*v));
        layer_inputs.push(std::mem::replace(&mut current, post));
        pre_acts.push(pre);
    }
    let tape = Tape {
        layer_inputs,
        pre: pre_acts,
        output: current.clone(),
        revision: params.revision,
        layer_dims: spec.layer_dims.clone(),
    };
    Ok((current, tape))
}

/// Forward pass without recording a tape.
pub fn mlp_predict(spec: &MlpSpec, params: &ParamSet, input: &Matrix) -> Result<Matrix> {
    check_input(spec, params, input)?;
    let mut current = affine(params, 0, input);
    let act = spec.activations[0];
    current.data.iter_mut().for_each(|v| *v = act.apply(*v));
    for layer in 1..spec.num_layers() {
        let mut next = affine(params, layer, &current);
        let act = spec.activations[layer];
        next.data.iter_mut().for_each(|v| *v = act.apply(*v));
        current = next;
    }
    Ok(current)
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as the [`ParamSet`].
    pub params: Vec<f64>,
    pub input: Matrix,
}

/// Reverse-mode pass producing parameter and input gradients.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParamSet,
    tape: &Tape,
    output_gradient: &Matrix,
) -> Result<Gradients> {
    let (params_grad, input) = backward(spec, params, tape, output_gradient, true)?;
    Ok(Gradients {
        params: params_grad.unwrap_or_default(),
        input,
    })
}

/// Input gradient only; skips the weight-gradient products.
pub fn mlp_backward_input(
    spec: &MlpSpec,
    params: &ParamSet,
    tape: &Tape,
    output_gradient: &Matrix,
) -> Result<Matrix> {
    Ok(backward(spec, params, tape, output_gradient, false)?.1)
}

fn backward(
    spec: &MlpSpec,
    params: &ParamSet,
    tape: &Tape,
    output_gradient: &Matrix,
    want_params: bool,
) -> Result<(Option<Vec<f64>>, Matrix)> {
    spec.check_params(params)?;
    if tape.layer_dims != spec.layer_dims {
        return Err(Error::StaleTape("tape was recorded for a different topology"));
    }
    if tape.revision != params.revision {
        return Err(Error::StaleTape("parameters changed since the forward pass"));
    }
    if output_gradient.rows != tape.output.rows || output_gradient.cols != tape.output.cols {
        return Err(Error::DimensionMismatch {
            context: "output gradient",
            expected: tape.output.data.len(),
            actual: output_gradient.data.len(),
        });
    }
    let rows = output_gradient.rows;
    let mut grad_params = want_params.then(|| vec![0.0; params.len()]);
    let mut upstream = output_gradient.clone();
    for layer in (0..spec.num_layers()).rev() {
        let slot = params.layout[layer];
        let act = spec.activations[layer];
        let post = if layer + 1 < spec.num_layers() {
            &tape.layer_inputs[layer + 1]
        } else {
            &tape.output
        };
        let pre = &tape.pre[layer];
        let mut delta = upstream;
        if act != Activation::Identity {
            for ((d, &z), &y) in delta.data.iter_mut().zip(&pre.data).zip(&post.data) {
                *d *= act.derivative(z, y);
            }
        }
        let x = &tape.layer_inputs[layer];
        if let Some(g) = grad_params.as_mut() {
            // dW = deltaᵀ · x, shape (out, in)
            gemm(
                slot.out_dim,
                rows,
                slot.in_dim,
                &delta.data,
                1,
                slot.out_dim,
                &x.data,
                slot.in_dim,
                1,
                0.0,
                &mut g[slot.weight_offset..slot.bias_offset],
            );
            let gb = &mut g[slot.bias_offset..slot.bias_offset + slot.out_dim];
            for r in 0..rows {
                for (b, d) in gb.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
        }
        // dx = delta · W, shape (rows, in)
        let mut dx = Matrix::zeros(rows, slot.in_dim);
        gemm(
            rows,
            slot.out_dim,
            slot.in_dim,
            &delta.data,
            slot.out_dim,
            1,
            params.weights(layer),
            slot.in_dim,
            1,
            0.0,
            &mut dx.data,
        );
        upstream = dx;
    }
    Ok((grad_params, upstream))
}

/// An [`MlpSpec`] together with its parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Self {
        let params = spec.init_params();
        Self { spec, params }
    }

    pub fn with_params(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        spec.check_params(&params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape)> {
        mlp_forward_batch(&self.spec, &self.params, input)
    }

    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        mlp_predict(&self.spec, &self.params, input)
    }

    pub fn backward(&self, tape: &Tape, output_gradient: &Matrix) -> Result<Gradients> {
        mlp_backward(&self.spec, &self.params, tape, output_gradient)
    }

    pub fn backward_input(&self, tape: &Tape, output_gradient: &Matrix) -> Result<Matrix> {
        mlp_backward_input(&self.spec, &self.params, tape, output_gradient)
    }
}

/// Adam moments and hyperparameters for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Result<Self> {
        Self::with_hyperparameters(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bad Adam hyperparameters beta1={beta1} beta2={beta2} eps={eps}"
            )));
        }
        Ok(Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching either the parameters or the moments.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, gradient: &[f64]) -> Result<()> {
    if gradient.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "Adam gradient",
            expected: params.len(),
            actual: gradient.len(),
        });
    }
    if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient",
            index,
            value,
        });
    }
    adam_update(state, params.values_mut(), gradient)
}

/// Adam on a bare slice; used for models that are not MLPs.
pub fn adam_update(state: &mut AdamState, values: &mut [f64], gradient: &[f64]) -> Result<()> {
    if gradient.len() != values.len() || state.first.len() != values.len() {
        return Err(Error::DimensionMismatch {
            context: "Adam gradient",
            expected: values.len(),
            actual: gradient.len(),
        });
    }
    if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient",
            index,
            value,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for i in 0..values.len() {
        let g = gradient[i];
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
        let m_hat = state.first[i] / bc1;
        let v_hat = state.second[i] / bc2;
        values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `target ← μ·online + (1−μ)·target`, entrywise.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::OutOfRange(format!("soft update rate must lie in (0, 1], got {mu}")));
    }
    if target.len() != online.len() || target.layout != online.layout {
        return Err(Error::DimensionMismatch {
            context: "soft update",
            expected: online.len(),
            actual: target.len(),
        });
    }
    let keep = 1.0 - mu;
    for (t, &o) in target.values_mut().iter_mut().zip(&online.values) {
        *t = mu * o + keep * *t;
    }
    Ok(())
}
