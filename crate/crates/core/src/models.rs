//! Toy architectures with analytic forward pass, squared-error loss,
//! backpropagated gradients and Hessian-vector products.
//!
//! Weights map column vectors: `W_i` is `out × in`. Batches hold one sample
//! per row, so a layer acts on a batch as `H · W_iᵀ`. Fixed embeddings wrap
//! the trainable core as `M₁ · core(M₂M₃x)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{gaussian_matrix, io, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    /// Elementwise `h ↦ h^degree`.
    Poly { degree: u32 },
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
            Activation::Poly { degree } => a.powi(degree as i32),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is taken as 0.
    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Poly { degree } => f64::from(degree) * a.powi(degree as i32 - 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `W_D ⋯ W₁ x`.
    DeepLinear,
    /// `W_D σ(W_{D−1} ⋯ σ(W₁x))`.
    Mlp { activation: Activation },
    /// Scalar output `(xᵀUVx)(w·x)` with weights `[U, V, w]`, `w` a `1 × d` row.
    AttentionToy,
    /// `(W / ‖W‖_F) x`, invariant to rescaling `W`.
    ScaleInvariantToy,
}

/// Positions of the trainable entries inside a flat parameter vector.
/// Entry `(layer k, row l, column m)` sits at `offset[k] + l·cols_k + m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    len: usize,
}

impl ParamLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut len = 0;
        for &(r, c) in &shapes {
            offsets.push(len);
            len += r * c;
        }
        Self { shapes, offsets, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn shape(&self, layer: usize) -> (usize, usize) {
        self.shapes[layer]
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    /// Flat index of `(layer, row, col)`.
    pub fn index(&self, layer: usize, row: usize, col: usize) -> usize {
        let (r, c) = self.shapes[layer];
        assert!(row < r && col < c, "index ({layer},{row},{col}) out of range");
        self.offsets[layer] + row * c + col
    }

    /// Inverse of [`ParamLayout::index`].
    pub fn locate(&self, flat: usize) -> (usize, usize, usize) {
        assert!(flat < self.len, "flat index out of range");
        let layer = self.offsets.partition_point(|&o| o <= flat) - 1;
        let c = self.shapes[layer].1;
        let rel = flat - self.offsets[layer];
        (layer, rel / c, rel % c)
    }

    /// Flat range occupied by `layer`.
    pub fn range(&self, layer: usize) -> std::ops::Range<usize> {
        let (r, c) = self.shapes[layer];
        self.offsets[layer]..self.offsets[layer] + r * c
    }
}

/// All trainable entries as one vector, with the layout to map back.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(shape(format!(
                "{} values for a layout of {} parameters",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let n = layout.len();
        Self { layout, data: vec![0.0; n] }
    }

    pub fn from_matrices(ms: &[Matrix]) -> Self {
        let layout = ParamLayout::new(ms.iter().map(Matrix::shape).collect());
        let data = ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Self { layout, data }
    }

    pub fn to_matrices(&self) -> Vec<Matrix> {
        (0..self.layout.layers())
            .map(|k| {
                let (r, c) = self.layout.shape(k);
                Matrix::from_raw(r, c, self.data[self.layout.range(k)].to_vec())
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, layer: usize, row: usize, col: usize) -> f64 {
        self.data[self.layout.index(layer, row, col)]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "param dot: length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, s: f64) -> ParamVector {
        ParamVector {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s · other`.
    pub fn add_scaled(&self, s: f64, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "param add: length mismatch");
        ParamVector {
            layout: self.layout.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-layer mean gradients `g_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub grads: Vec<Matrix>,
}

impl LayerGradients {
    /// `Tr[g_i g_iᵀ] = ‖g_i‖²_F` per layer.
    pub fn traces(&self) -> Vec<f64> {
        self.grads.iter().map(Matrix::frobenius_sq).collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.traces().iter().sum()
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector::from_matrices(&self.grads)
    }

    pub fn layer(&self, i: usize) -> &Matrix {
        &self.grads[i]
    }
}

/// Activations from a batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `hidden[0] = M₂M₃x`; `hidden[L]` is the (post-activation) output of
    /// layer `L`; the last entry is the core output before `M₁`.
    pub hidden: Vec<Matrix>,
    /// Pre-activations of each layer (MLP and deep-linear only).
    pub pre: Vec<Matrix>,
    pub output: Matrix,
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    arch: Architecture,
    weights: Vec<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m1: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m2: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m3: Option<Matrix>,
}

/// An architecture tag, trainable weights and optional fixed embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    arch: Architecture,
    weights: Vec<Matrix>,
    m1: Option<Matrix>,
    m2: Option<Matrix>,
    m3: Option<Matrix>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;

    fn try_from(r: NetworkRepr) -> Result<Self> {
        Network::new(r.arch, r.weights)?.with_embeddings(r.m1, r.m2, r.m3)
    }
}

impl From<Network> for NetworkRepr {
    fn from(n: Network) -> Self {
        NetworkRepr {
            arch: n.arch,
            weights: n.weights,
            m1: n.m1,
            m2: n.m2,
            m3: n.m3,
        }
    }
}

fn check_core_shapes(arch: Architecture, weights: &[Matrix]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("a network needs at least one weight matrix"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weights"));
    }
    match arch {
        Architecture::DeepLinear | Architecture::Mlp { .. } => {
            if let Architecture::Mlp { activation: Activation::Poly { degree: 0 } } = arch {
                return Err(invalid("polynomial activation needs degree >= 1"));
            }
            for (i, pair) in weights.windows(2).enumerate() {
                if pair[1].cols() != pair[0].rows() {
                    return Err(shape(format!(
                        "layer {} is {}x{} but layer {} outputs {}",
                        i + 1,
                        pair[1].rows(),
                        pair[1].cols(),
                        i,
                        pair[0].rows()
                    )));
                }
            }
        }
        Architecture::AttentionToy => {
            let d = weights[0].rows();
            let ok = weights.len() == 3
                && weights[0].shape() == (d, d)
                && weights[1].shape() == (d, d)
                && weights[2].shape() == (1, d);
            if !ok {
                return Err(shape("attention toy needs weights [U (d×d), V (d×d), w (1×d)]"));
            }
        }
        Architecture::ScaleInvariantToy => {
            if weights.len() != 1 {
                return Err(shape("scale-invariant toy has exactly one weight matrix"));
            }
        }
    }
    Ok(())
}

impl Network {
    pub fn new(arch: Architecture, weights: Vec<Matrix>) -> Result<Self> {
        check_core_shapes(arch, &weights)?;
        Ok(Self {
            arch,
            weights,
            m1: None,
            m2: None,
            m3: None,
        })
    }

    /// Attaches fixed embeddings; `None` means identity.
    pub fn with_embeddings(
        mut self,
        m1: Option<Matrix>,
        m2: Option<Matrix>,
        m3: Option<Matrix>,
    ) -> Result<Self> {
        let core_in = self.core_input_dim();
        let core_out = self.core_output_dim();
        if let Some(m3) = &m3 {
            if !m3.is_square() {
                return Err(shape("M3 must be square"));
            }
        }
        let m2_out = m2.as_ref().map_or(core_in, Matrix::rows);
        if m2_out != core_in {
            return Err(shape(format!("M2 outputs {m2_out}, first layer expects {core_in}")));
        }
        let m2_in = m2.as_ref().map_or(core_in, Matrix::cols);
        if let Some(m3) = &m3 {
            if m3.rows() != m2_in {
                return Err(shape(format!("M3 is {}x{}, M2 expects {m2_in}", m3.rows(), m3.cols())));
            }
        }
        if let Some(m1) = &m1 {
            if m1.cols() != core_out {
                return Err(shape(format!("M1 takes {}, core outputs {core_out}", m1.cols())));
            }
        }
        for m in [&m1, &m2, &m3].into_iter().flatten() {
            if !m.is_finite() {
                return Err(Error::NonFinite("embedding"));
            }
        }
        self.m1 = m1;
        self.m2 = m2;
        self.m3 = m3;
        Ok(self)
    }

    /// Gaussian initialisation with std `scale / √fan_in`. `dims` lists the
    /// layer widths from input to output (`d_x, h₁, …, d_y`).
    pub fn random(arch: Architecture, dims: &[usize], rng: &mut Rng, scale: f64) -> Result<Self> {
        let weights = match arch {
            Architecture::DeepLinear | Architecture::Mlp { .. } => {
                if dims.len() < 2 {
                    return Err(invalid("need at least input and output widths"));
                }
                dims.windows(2)
                    .map(|w| init_matrix(rng, w[1], w[0], scale))
                    .collect::<Result<Vec<_>>>()?
            }
            Architecture::AttentionToy => {
                let d = *dims.first().ok_or_else(|| invalid("attention toy needs its dimension"))?;
                vec![
                    init_matrix(rng, d, d, scale)?,
                    init_matrix(rng, d, d, scale)?,
                    init_matrix(rng, 1, d, scale)?,
                ]
            }
            Architecture::ScaleInvariantToy => {
                if dims.len() != 2 {
                    return Err(invalid("scale-invariant toy takes [d_x, d_y]"));
                }
                vec![init_matrix(rng, dims[1], dims[0], scale)?]
            }
        };
        Network::new(arch, weights)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> &Matrix {
        &self.weights[i]
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn m1(&self) -> Option<&Matrix> {
        self.m1.as_ref()
    }

    pub fn m2(&self) -> Option<&Matrix> {
        self.m2.as_ref()
    }

    pub fn m3(&self) -> Option<&Matrix> {
        self.m3.as_ref()
    }

    /// Replaces the weights, keeping architecture and embeddings.
    pub fn with_weights(&self, weights: Vec<Matrix>) -> Result<Network> {
        if weights.len() != self.weights.len()
            || weights.iter().zip(&self.weights).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(shape("replacement weights do not match the architecture"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(Network {
            weights,
            ..self.clone()
        })
    }

    fn core_input_dim(&self) -> usize {
        match self.arch {
            Architecture::AttentionToy => self.weights[0].rows(),
            _ => self.weights[0].cols(),
        }
    }

    fn core_output_dim(&self) -> usize {
        match self.arch {
            Architecture::AttentionToy => 1,
            _ => self.weights[self.weights.len() - 1].rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match (&self.m3, &self.m2) {
            (Some(m3), _) => m3.cols(),
            (None, Some(m2)) => m2.cols(),
            (None, None) => self.core_input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.m1.as_ref().map_or(self.core_output_dim(), Matrix::rows)
    }

    /// The fixed input map `M₂M₃` (identity when both are absent).
    pub fn input_map(&self) -> Matrix {
        match (&self.m2, &self.m3) {
            (Some(a), Some(b)) => a.dot(b),
            (Some(a), None) => a.clone(),
            (None, Some(b)) => b.clone(),
            (None, None) => Matrix::identity(self.core_input_dim()),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.weights.iter().map(Matrix::shape).collect())
    }

    pub fn params(&self) -> ParamVector {
        ParamVector::from_matrices(&self.weights)
    }

    pub fn with_params(&self, p: &ParamVector) -> Result<Network> {
        if p.layout != self.layout() {
            return Err(shape("parameter layout does not match the network"));
        }
        self.with_weights(p.to_matrices())
    }

    /// `‖θ‖²` over trainable weights.
    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(Matrix::frobenius_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: &Matrix) -> Forward {
        assert_eq!(x.cols(), self.input_dim(), "input dimension mismatch");
        let mut z = x.clone();
        if let Some(m3) = &self.m3 {
            z = z.dot_tr(m3);
        }
        if let Some(m2) = &self.m2 {
            z = z.dot_tr(m2);
        }
        let mut hidden = vec![z];
        let mut pre = Vec::new();
        match self.arch {
            Architecture::DeepLinear | Architecture::Mlp { .. } => {
                let d = self.weights.len();
                for (i, w) in self.weights.iter().enumerate() {
                    let a = hidden[i].dot_tr(w);
                    let h = match self.arch {
                        Architecture::Mlp { activation } if i + 1 < d => a.map(|v| activation.apply(v)),
                        _ => a.clone(),
                    };
                    pre.push(a);
                    hidden.push(h);
                }
            }
            Architecture::AttentionToy => {
                let (u, v, w) = (&self.weights[0], &self.weights[1], &self.weights[2]);
                let z = &hidden[0];
                let uv = u.dot(v);
                let out = Matrix::from_fn(z.rows(), 1, |k, _| {
                    let row = z.row(k);
                    let s: f64 = uv.mat_vec(row).iter().zip(row).map(|(a, b)| a * b).sum();
                    let t: f64 = w.row(0).iter().zip(row).map(|(a, b)| a * b).sum();
                    s * t
                });
                hidden.push(out);
            }
            Architecture::ScaleInvariantToy => {
                let w = &self.weights[0];
                let n = w.frobenius();
                hidden.push(hidden[0].dot_tr(w).scale(1.0 / n));
            }
        }
        let core = hidden.last().expect("at least one layer").clone();
        let output = match &self.m1 {
            Some(m1) => core.dot_tr(m1),
            None => core,
        };
        Forward { hidden, pre, output }
    }

    /// Outputs for the rows of `x`.
    pub fn predict(&self, x: &Matrix) -> Matrix {
        self.forward_batch(x).output
    }

    /// Single-input forward pass returning the output and every hidden vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if x.len() != self.input_dim() {
            return Err(shape(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let f = self.forward_batch(&Matrix::row_vector(x));
        let hidden = f.hidden.iter().map(|h| h.row(0).to_vec()).collect();
        Ok((f.output.row(0).to_vec(), hidden))
    }

    /// Representation after layer `layer` for each row of `x`.
    pub fn representation(&self, x: &Matrix, layer: usize) -> Result<Matrix> {
        let mut f = self.forward_batch(x);
        if layer >= f.hidden.len() {
            return Err(invalid(format!("layer {layer} out of range")));
        }
        Ok(f.hidden.swap_remove(layer))
    }

    /// For deep-linear networks, the matrix `W_L ⋯ W₁ M₂M₃` mapping inputs to
    /// the layer-`L` representation.
    pub fn hidden_map(&self, layer: usize) -> Result<Matrix> {
        if self.arch != Architecture::DeepLinear {
            return Err(invalid("hidden maps are linear only for deep-linear networks"));
        }
        if layer > self.depth() {
            return Err(invalid(format!("layer {layer} out of range")));
        }
        let mut m = self.input_map();
        for w in &self.weights[..layer] {
            m = w.dot(&m);
        }
        Ok(m)
    }

    /// End-to-end matrix `M₁ W_D ⋯ W₁ M₂M₃` of a deep-linear network.
    pub fn end_to_end(&self) -> Result<Matrix> {
        let m = self.hidden_map(self.depth())?;
        Ok(match &self.m1 {
            Some(m1) => m1.dot(&m),
            None => m,
        })
    }

    /// Squared error `‖f(x) − y‖²` for one example.
    pub fn per_sample_loss(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if y.len() != self.output_dim() {
            return Err(shape("label dimension mismatch"));
        }
        let (out, _) = self.forward(x)?;
        Ok(out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.x.cols() != self.input_dim() || batch.y.cols() != self.output_dim() {
            return Err(shape(format!(
                "batch is {} -> {}, network is {} -> {}",
                batch.x.cols(),
                batch.y.cols(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Per-example squared errors.
    pub fn losses(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let out = self.predict(&batch.x);
        Ok((0..batch.len())
            .map(|k| out.row(k).iter().zip(batch.y.row(k)).map(|(a, b)| (a - b).powi(2)).sum())
            .collect())
    }

    /// Mean squared error over the batch.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("loss of an empty batch"));
        }
        let l = self.losses(batch)?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    }

    /// Mean loss and its gradient over the batch.
    pub fn loss_and_gradient(&self, batch: &Batch) -> Result<(f64, LayerGradients)> {
        self.check_batch(batch)?;
        let n = batch.len();
        if n == 0 {
            return Err(invalid("gradient of an empty batch"));
        }
        let fwd = self.forward_batch(&batch.x);
        let resid = &fwd.output - &batch.y;
        let loss = resid.frobenius_sq() / n as f64;
        let d_out = resid.scale(2.0 / n as f64);
        let d_core = match &self.m1 {
            Some(m1) => d_out.dot(m1),
            None => d_out,
        };
        let grads = match self.arch {
            Architecture::DeepLinear | Architecture::Mlp { .. } => {
                let act = match self.arch {
                    Architecture::Mlp { activation } => Some(activation),
                    _ => None,
                };
                let depth = self.weights.len();
                let mut grads = vec![Matrix::zeros(0, 0); depth];
                let mut delta = d_core;
                for i in (0..depth).rev() {
                    grads[i] = delta.tr_dot(&fwd.hidden[i]);
                    if i > 0 {
                        let mut dh = delta.dot(&self.weights[i]);
                        if let Some(a) = act {
                            let p = &fwd.pre[i - 1];
                            for (g, &pv) in dh.as_mut_slice().iter_mut().zip(p.as_slice()) {
                                *g *= a.derivative(pv);
                            }
                        }
                        delta = dh;
                    }
                }
                grads
            }
            Architecture::AttentionToy => {
                let (u, v, w) = (&self.weights[0], &self.weights[1], &self.weights[2]);
                let d = u.rows();
                let z = &fwd.hidden[0];
                let mut gu = Matrix::zeros(d, d);
                let mut gv = Matrix::zeros(d, d);
                let mut gw = Matrix::zeros(1, d);
                for k in 0..n {
                    let x = z.row(k);
                    let vx = v.mat_vec(x);
                    let utx = u.tr_mat_vec(x);
                    let s: f64 = utx.iter().zip(&vx).map(|(a, b)| a * b).sum();
                    let t: f64 = w.row(0).iter().zip(x).map(|(a, b)| a * b).sum();
                    let delta = d_core[(k, 0)];
                    let (ds, dt) = (delta * t, delta * s);
                    for a in 0..d {
                        for b in 0..d {
                            gu[(a, b)] += ds * x[a] * vx[b];
                            gv[(a, b)] += ds * utx[a] * x[b];
                        }
                        gw[(0, a)] += dt * x[a];
                    }
                }
                vec![gu, gv, gw]
            }
            Architecture::ScaleInvariantToy => {
                let w = &self.weights[0];
                let nw = w.frobenius();
                let g = d_core.tr_dot(&fwd.hidden[0]);
                let radial = g.inner(w) / nw.powi(3);
                let mut gw = g.scale(1.0 / nw);
                gw.axpy(-radial, w);
                vec![gw]
            }
        };
        Ok((loss, LayerGradients { grads }))
    }

    /// Mean gradient `E_{x∈B} ∇ℓ` per layer.
    pub fn batch_gradient(&self, batch: &Batch) -> Result<LayerGradients> {
        Ok(self.loss_and_gradient(batch)?.1)
    }

    /// Hessian-vector product of the mean batch loss by central differences
    /// of the analytic gradient, step `1e-4·(1+‖θ‖)/‖v‖`.
    pub fn hvp(&self, batch: &Batch, direction: &ParamVector) -> Result<ParamVector> {
        let theta = self.params();
        if direction.layout != theta.layout {
            return Err(shape("direction does not match the parameter layout"));
        }
        let vn = direction.norm();
        if vn == 0.0 {
            return Err(invalid("hvp direction must be nonzero"));
        }
        let h = 1e-4 * (1.0 + theta.norm()) / vn;
        let plus = self.with_params(&theta.add_scaled(h, direction))?.batch_gradient(batch)?.flatten();
        let minus = self.with_params(&theta.add_scaled(-h, direction))?.batch_gradient(batch)?.flatten();
        Ok(plus.add_scaled(-1.0, &minus).scale(0.5 / h))
    }

    /// Exact Hessian-vector product for a two-layer deep-linear network.
    pub fn hvp_two_layer_exact(&self, batch: &Batch, direction: &ParamVector) -> Result<ParamVector> {
        if self.arch != Architecture::DeepLinear || self.depth() != 2 {
            return Err(invalid("exact hvp is only available for two-layer deep-linear networks"));
        }
        self.check_batch(batch)?;
        if direction.layout != self.layout() {
            return Err(shape("direction does not match the parameter layout"));
        }
        let n = batch.len() as f64;
        let dirs = direction.to_matrices();
        let (v1, v2) = (&dirs[0], &dirs[1]);
        let (w1, w2) = (&self.weights[0], &self.weights[1]);
        let m1 = self.m1.clone().unwrap_or_else(|| Matrix::identity(w2.rows()));
        // Column convention: Z is d×n, R = M₁PZ − Y.
        let z = self.forward_batch(&batch.x).hidden[0].transpose();
        let p = w2.dot(w1);
        let r = &m1.dot(&p).dot(&z) - &batch.y.transpose();
        let zzt = z.dot_tr(&z);
        let m1tm1 = m1.tr_dot(&m1);
        let q = m1.tr_dot(&r).dot_tr(&z).scale(2.0 / n);
        let dp = &v2.dot(w1) + &w2.dot(v1);
        let dq = m1tm1.dot(&dp).dot(&zzt).scale(2.0 / n);
        let g1 = &v2.tr_dot(&q) + &w2.tr_dot(&dq);
        let g2 = &dq.dot_tr(w1) + &q.dot_tr(v1);
        Ok(ParamVector::from_matrices(&[g1, g2]))
    }

    /// Swaps hidden units of layer `layer` (0-based) by `perm`: rows of
    /// `W_layer` and the matching columns of `W_{layer+1}`.
    pub fn permute_hidden(&self, layer: usize, perm: &[usize]) -> Result<Network> {
        if !matches!(self.arch, Architecture::DeepLinear | Architecture::Mlp { .. }) {
            return Err(invalid("hidden permutations apply to layered networks"));
        }
        if layer + 1 >= self.depth() {
            return Err(invalid("the output layer has no outgoing weights to permute"));
        }
        let width = self.weights[layer].rows();
        let mut seen = vec![false; width];
        if perm.len() != width || perm.iter().any(|&p| p >= width || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("not a permutation of the hidden units"));
        }
        let mut ws = self.weights.clone();
        let w_in = &self.weights[layer];
        let w_out = &self.weights[layer + 1];
        ws[layer] = Matrix::from_fn(width, w_in.cols(), |i, j| w_in[(perm[i], j)]);
        ws[layer + 1] = Matrix::from_fn(w_out.rows(), width, |i, j| w_out[(i, perm[j])]);
        self.with_weights(ws)
    }

    /// Writes `<stem>.json` (architecture and embeddings) and `<stem>.bin`
    /// (weights in the binary matrix format).
    pub fn save_checkpoint(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let descriptor = serde_json::json!({
            "arch": self.arch,
            "shapes": self.weights.iter().map(Matrix::shape).collect::<Vec<_>>(),
            "m1": self.m1,
            "m2": self.m2,
            "m3": self.m3,
        });
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&descriptor)?)?;
        let mut buf = Vec::new();
        io::write_matrices(&mut buf, &self.weights)?;
        fs::write(stem.with_extension("bin"), buf)?;
        Ok(())
    }

    pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<Network> {
        #[derive(Deserialize)]
        struct Descriptor {
            arch: Architecture,
            m1: Option<Matrix>,
            m2: Option<Matrix>,
            m3: Option<Matrix>,
        }
        let stem = stem.as_ref();
        let d: Descriptor = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let weights = io::read_matrices(&mut fs::read(stem.with_extension("bin"))?.as_slice())?;
        Network::new(d.arch, weights)?.with_embeddings(d.m1, d.m2, d.m3)
    }
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Result<Matrix> {
    Ok(gaussian_matrix(rng, rows, cols, None)?.scale(scale / (cols as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net(w: f64) -> Network {
        Network::new(Architecture::DeepLinear, vec![Matrix::scalar(w)]).unwrap()
    }

    fn scalar_batch(x: f64, y: f64) -> Batch {
        Batch::new(Matrix::scalar(x), Matrix::scalar(y)).unwrap()
    }

    #[test]
    fn forward_examples() {
        let id = Network::new(Architecture::DeepLinear, vec![Matrix::identity(2), Matrix::identity(2)]).unwrap();
        assert_eq!(id.forward(&[1.0, 0.0]).unwrap().0, vec![1.0, 0.0]);

        let relu = Network::new(
            Architecture::Mlp { activation: Activation::Relu },
            vec![Matrix::scalar(-1.0), Matrix::scalar(1.0)],
        )
        .unwrap();
        let (_, hidden) = relu.forward(&[2.0]).unwrap();
        assert_eq!(hidden[1], vec![0.0]);

        let att = Network::new(
            Architecture::AttentionToy,
            vec![Matrix::scalar(2.0), Matrix::scalar(3.0), Matrix::scalar(1.0)],
        )
        .unwrap();
        assert_eq!(att.forward(&[1.0]).unwrap().0, vec![6.0]);
        assert!(att.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_and_gradient_examples() {
        let net = scalar_net(1.0);
        assert_eq!(net.per_sample_loss(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(net.per_sample_loss(&[1.0], &[3.0]).unwrap(), 4.0);
        assert_eq!(net.per_sample_loss(&[1.0], &[1.0]).unwrap(), 0.0);
        let g = net.batch_gradient(&scalar_batch(1.0, 0.0)).unwrap();
        assert_eq!(g.grads[0][(0, 0)], 2.0);
    }

    #[test]
    fn hvp_examples() {
        let net = scalar_net(1.0);
        let b = scalar_batch(1.0, 0.0);
        let v = ParamVector::from_matrices(&[Matrix::scalar(1.0)]);
        let hv = net.hvp(&b, &v).unwrap();
        assert!((hv.data[0] - 2.0).abs() < 1e-8);
        assert!(net.hvp(&b, &v.scale(0.0)).is_err());
        let hv2 = net.hvp(&b, &v.scale(2.0)).unwrap();
        assert!((hv2.data[0] - 2.0 * hv.data[0]).abs() < 1e-5);
    }

    #[test]
    fn layout_round_trip() {
        let mut rng = Rng::new(1);
        let net = Network::random(Architecture::DeepLinear, &[3, 4, 2], &mut rng, 1.0).unwrap();
        let p = net.params();
        assert_eq!(p.len(), 12 + 8);
        let lay = net.layout();
        for flat in 0..p.len() {
            let (k, l, m) = lay.locate(flat);
            assert_eq!(lay.index(k, l, m), flat);
            assert_eq!(p.data[flat], net.weight(k)[(l, m)]);
        }
        assert_eq!(net.with_params(&p).unwrap(), net);
    }

    #[test]
    fn embeddings_and_checkpoints() {
        let mut rng = Rng::new(2);
        let net = Network::random(Architecture::DeepLinear, &[3, 5, 2], &mut rng, 1.0)
            .unwrap()
            .with_embeddings(
                Some(Matrix::identity(2).scale(2.0)),
                Some(Matrix::identity(3)),
                Some(Matrix::identity(3).scale(0.5)),
            )
            .unwrap();
        let x = gaussian_matrix(&mut rng, 4, 3, None).unwrap();
        let direct = x.dot_tr(&net.end_to_end().unwrap());
        assert!(net.predict(&x).rel_diff(&direct) < 1e-14);

        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        net.save_checkpoint(&stem).unwrap();
        assert_eq!(Network::load_checkpoint(&stem).unwrap(), net);
        let json = serde_json::to_string(&net).unwrap();
        assert_eq!(serde_json::from_str::<Network>(&json).unwrap(), net);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Network::new(Architecture::DeepLinear, vec![Matrix::zeros(2, 3), Matrix::zeros(2, 3)]).is_err());
        assert!(Network::new(
            Architecture::Mlp { activation: Activation::Poly { degree: 0 } },
            vec![Matrix::zeros(2, 2)]
        )
        .is_err());
        assert!(Network::new(Architecture::DeepLinear, vec![]).is_err());
    }
}
