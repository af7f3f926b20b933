//! Exponential symmetries `θ ↦ e^{λA}θ` of the loss and the balance
//! residuals they imply at stationary points of the free energy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Batch, BatchSource};
use crate::entropic::{batch_gradient_samples, free_energy, EntropicConfig, FreeEnergy};
use crate::error::{invalid, shape, Error, Result};
use crate::models::{Network, ParamLayout, ParamVector};
use crate::numerics::{expm, gaussian_matrix, Matrix, Rng};
use crate::stats::{mean, mean_and_se};

#[derive(Debug, Clone, PartialEq)]
enum GeneratorKind {
    /// Sparse diagonal: `(flat index, coefficient)` pairs.
    Diagonal(Vec<(usize, f64)>),
    Dense { a: Matrix, sym: Matrix },
}

/// A symmetry generator `A` on the flat parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    dim: usize,
    kind: GeneratorKind,
}

impl Generator {
    pub fn diagonal(dim: usize, entries: Vec<(usize, f64)>) -> Result<Self> {
        if entries.iter().any(|&(i, c)| i >= dim || !c.is_finite()) {
            return Err(invalid("diagonal generator entry out of range or non-finite"));
        }
        Ok(Self {
            dim,
            kind: GeneratorKind::Diagonal(entries),
        })
    }

    pub fn dense(a: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(shape("generator matrix must be square"));
        }
        let sym = a.symmetrized();
        Ok(Self {
            dim: a.rows(),
            kind: GeneratorKind::Dense { a, sym },
        })
    }

    /// `W_i → e^λ W_i`, `W_j → e^{−λ} W_j` (0-based layer indices).
    pub fn layer_rescaling(layout: &ParamLayout, i: usize, j: usize) -> Result<Self> {
        check_layers(layout, &[i, j])?;
        if i == j {
            return Err(invalid("layer rescaling needs two distinct layers"));
        }
        let mut e: Vec<(usize, f64)> = layout.range(i).map(|k| (k, 1.0)).collect();
        e.extend(layout.range(j).map(|k| (k, -1.0)));
        Self::diagonal(layout.len(), e)
    }

    /// Scales hidden unit `j` of layer `i`: its incoming row by `e^λ` and its
    /// outgoing column in layer `i+1` by `e^{−λ}`.
    pub fn neuron_rescaling(layout: &ParamLayout, i: usize, j: usize) -> Result<Self> {
        Self::polynomial_neuron(layout, i, j, 1)
    }

    /// As [`Generator::neuron_rescaling`] with the outgoing column scaled by
    /// `e^{−dλ}`, the symmetry of a degree-`d` monomial activation.
    pub fn polynomial_neuron(layout: &ParamLayout, i: usize, j: usize, d: u32) -> Result<Self> {
        let (rows_in, cols_in) = neuron_shapes(layout, i, j)?;
        if d < 1 {
            return Err(invalid("activation degree must be at least 1"));
        }
        let mut e: Vec<(usize, f64)> = (0..cols_in).map(|m| (layout.index(i, j, m), 1.0)).collect();
        e.extend((0..rows_in).map(|l| (layout.index(i + 1, l, j), -f64::from(d))));
        Self::diagonal(layout.len(), e)
    }

    /// `θ → e^λ θ` on every parameter.
    pub fn global_scaling(layout: &ParamLayout) -> Result<Self> {
        Self::diagonal(layout.len(), (0..layout.len()).map(|k| (k, 1.0)).collect())
    }

    /// The product symmetry `W → W e^{λC}`, `U → e^{−λC} U` of any loss that
    /// depends on `W` (layer `w`) and `U` (layer `u`) only through `WU`.
    pub fn product_symmetry(layout: &ParamLayout, w: usize, u: usize, c: &Matrix) -> Result<Self> {
        check_layers(layout, &[w, u])?;
        let (wr, wc) = layout.shape(w);
        let (ur, uc) = layout.shape(u);
        if wc != ur || c.shape() != (wc, wc) {
            return Err(shape("product symmetry needs W (a×b), U (b×c) and C (b×b)"));
        }
        let mut a = Matrix::zeros(layout.len(), layout.len());
        // d/dλ (W e^{λC}) = W C: entry (r, s) gains Σ_t W[r,t] C[t,s].
        for r in 0..wr {
            for s in 0..wc {
                for t in 0..wc {
                    a[(layout.index(w, r, s), layout.index(w, r, t))] += c[(t, s)];
                }
            }
        }
        // d/dλ (e^{−λC} U) = −C U.
        for r in 0..ur {
            for s in 0..uc {
                for t in 0..ur {
                    a[(layout.index(u, r, s), layout.index(u, t, s))] -= c[(r, t)];
                }
            }
        }
        Self::dense(a)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The symmetric part `Ã = (A + Aᵀ)/2` as a dense matrix.
    pub fn sym(&self) -> Matrix {
        match &self.kind {
            GeneratorKind::Diagonal(e) => {
                let mut m = Matrix::zeros(self.dim, self.dim);
                for &(i, c) in e {
                    m[(i, i)] += c;
                }
                m
            }
            GeneratorKind::Dense { sym, .. } => sym.clone(),
        }
    }

    /// `vᵀ Ã v`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        match &self.kind {
            GeneratorKind::Diagonal(e) => e.iter().map(|&(i, c)| c * v[i] * v[i]).sum(),
            GeneratorKind::Dense { sym, .. } => v.iter().zip(sym.mat_vec(v)).map(|(a, b)| a * b).sum(),
        }
    }

    /// Scale used to normalise balance residuals: `Σ |aᵢ| vᵢ²` for diagonal
    /// generators (the sum of the two traces), `|vᵀÃv|` otherwise.
    pub fn magnitude(&self, v: &[f64]) -> f64 {
        match &self.kind {
            GeneratorKind::Diagonal(e) => e.iter().map(|&(i, c)| c.abs() * v[i] * v[i]).sum(),
            GeneratorKind::Dense { .. } => self.quad(v).abs(),
        }
    }

    /// `e^{λA} θ`.
    pub fn apply(&self, theta: &ParamVector, lambda: f64) -> Result<ParamVector> {
        if theta.len() != self.dim {
            return Err(shape("generator and parameters differ in dimension"));
        }
        let data = match &self.kind {
            GeneratorKind::Diagonal(e) => {
                let mut d = theta.data.clone();
                for &(i, c) in e {
                    d[i] *= (lambda * c).exp();
                }
                d
            }
            GeneratorKind::Dense { a, .. } => expm(&a.scale(lambda))?.mat_vec(&theta.data),
        };
        if data.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
            return Err(Error::NonFinite("symmetry orbit (λ too large for these weights)"));
        }
        ParamVector::new(theta.layout.clone(), data)
    }

    pub fn apply_to(&self, net: &Network, lambda: f64) -> Result<Network> {
        net.with_params(&self.apply(&net.params(), lambda)?)
    }

    /// Whether `Ã = 0`.
    pub fn is_antisymmetric(&self) -> bool {
        match &self.kind {
            GeneratorKind::Diagonal(e) => e.iter().all(|&(_, c)| c == 0.0),
            GeneratorKind::Dense { sym, .. } => sym.max_abs() == 0.0,
        }
    }
}

fn check_layers(layout: &ParamLayout, layers: &[usize]) -> Result<()> {
    if let Some(&bad) = layers.iter().find(|&&l| l >= layout.layers()) {
        return Err(invalid(format!("layer {bad} out of range ({} layers)", layout.layers())));
    }
    Ok(())
}

/// Returns (rows of layer i+1, cols of layer i) after validating that `j` is a
/// hidden unit of layer `i` with outgoing weights.
fn neuron_shapes(layout: &ParamLayout, i: usize, j: usize) -> Result<(usize, usize)> {
    check_layers(layout, &[i])?;
    if i + 1 >= layout.layers() {
        return Err(invalid("output-layer neurons have no outgoing weights"));
    }
    let (r, c) = layout.shape(i);
    let (r_next, c_next) = layout.shape(i + 1);
    if c_next != r {
        return Err(shape("layers do not compose"));
    }
    if j >= r {
        return Err(invalid(format!("neuron {j} out of range (layer has {r})")));
    }
    Ok((r_next, c))
}

/// A residual estimate with the scale used to normalise it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub value: f64,
    pub std_err: f64,
    /// Symmetrised magnitude: the sum of the two sides' absolute sizes.
    pub magnitude: f64,
}

impl Residual {
    /// `|value| / magnitude`, or 0 when both sides vanish.
    pub fn normalized(&self) -> f64 {
        if self.magnitude > 0.0 {
            self.value.abs() / self.magnitude
        } else {
            0.0
        }
    }
}

/// Sampled batch-mean gradients `ḡ_B` from which gradient second moments are
/// estimated.
#[derive(Debug, Clone)]
pub struct GradientCovariance {
    layout: ParamLayout,
    samples: Vec<Vec<f64>>,
}

impl GradientCovariance {
    pub fn from_samples(samples: Vec<ParamVector>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid("need at least one gradient sample"))?;
        let layout = first.layout.clone();
        if samples.iter().any(|s| s.layout != layout) {
            return Err(shape("gradient samples have different layouts"));
        }
        Ok(Self {
            layout,
            samples: samples.into_iter().map(|s| s.data).collect(),
        })
    }

    /// `K` batch gradients at `net`, batch `k` drawn from `rng.child(k)`.
    pub fn estimate<S: BatchSource + ?Sized>(
        net: &Network,
        source: &S,
        batch_size: usize,
        k: usize,
        rng: &Rng,
    ) -> Result<Self> {
        Self::from_samples(batch_gradient_samples(net, source, batch_size, k, rng)?)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Applies `f` to every flattened gradient sample.
    pub fn per_sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<f64> {
        self.samples.iter().map(|s| f(s)).collect()
    }

    fn block_sq(&self, s: &[f64], layer: usize) -> f64 {
        s[self.layout.range(layer)].iter().map(|v| v * v).sum()
    }

    fn in_row_sq(&self, s: &[f64], i: usize, j: usize) -> f64 {
        let c = self.layout.shape(i).1;
        (0..c).map(|m| s[self.layout.index(i, j, m)].powi(2)).sum()
    }

    fn out_col_sq(&self, s: &[f64], i: usize, j: usize) -> f64 {
        let r = self.layout.shape(i + 1).0;
        (0..r).map(|l| s[self.layout.index(i + 1, l, j)].powi(2)).sum()
    }

    /// `E Tr[g_i g_iᵀ]`.
    pub fn layer_trace(&self, i: usize) -> f64 {
        mean(&self.per_sample(|s| self.block_sq(s, i)))
    }

    pub fn layer_traces(&self) -> Vec<f64> {
        (0..self.layout.layers()).map(|i| self.layer_trace(i)).collect()
    }

    /// `E ‖g_{i,j,:}‖²` (incoming weights of unit `j`).
    pub fn neuron_in(&self, i: usize, j: usize) -> f64 {
        mean(&self.per_sample(|s| self.in_row_sq(s, i, j)))
    }

    /// `E ‖g_{i+1,:,j}‖²` (outgoing weights of unit `j`).
    pub fn neuron_out(&self, i: usize, j: usize) -> f64 {
        mean(&self.per_sample(|s| self.out_col_sq(s, i, j)))
    }

    /// `E[ḡᵀ Ã ḡ]` per sample.
    pub fn generator_quads(&self, gen: &Generator) -> Vec<f64> {
        self.per_sample(|s| gen.quad(s))
    }

    /// Full second-moment matrix `E[ḡ ḡᵀ]`.
    pub fn matrix(&self) -> Matrix {
        let p = self.layout.len();
        let mut m = Matrix::zeros(p, p);
        for s in &self.samples {
            for i in 0..p {
                for j in 0..p {
                    m[(i, j)] += s[i] * s[j];
                }
            }
        }
        m.scale(1.0 / self.samples.len() as f64)
    }

    /// Per-sample gradient blocks of one layer as matrices.
    pub fn layer_samples(&self, layer: usize) -> Vec<Matrix> {
        let (r, c) = self.layout.shape(layer);
        self.samples
            .iter()
            .map(|s| Matrix::from_raw(r, c, s[self.layout.range(layer)].to_vec()))
            .collect()
    }
}

fn residual_from(samples: Vec<f64>, magnitude: f64) -> Residual {
    let (value, std_err) = mean_and_se(&samples);
    Residual { value, std_err, magnitude }
}

/// `−η E[ḡᵀÃḡ] + c θᵀÃθ` (`c = 4γ` in the default decay convention).
pub fn master_balance_residual<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    gen: &Generator,
    cfg: &EntropicConfig,
    rng: &Rng,
) -> Result<Residual> {
    cfg.validate()?;
    let eta = cfg.eta()?;
    let theta = net.params();
    if gen.dim() != theta.len() {
        return Err(shape("generator does not match the network"));
    }
    if gen.is_antisymmetric() {
        return Ok(Residual { value: 0.0, std_err: 0.0, magnitude: 0.0 });
    }
    let cov = GradientCovariance::estimate(net, source, cfg.batch_size, cfg.n_batches, rng)?;
    master_balance_from(&cov, &theta, gen, eta, cfg.balance_coefficient())
}

/// [`master_balance_residual`] from precomputed gradient samples.
pub fn master_balance_from(
    cov: &GradientCovariance,
    theta: &ParamVector,
    gen: &Generator,
    eta: f64,
    coefficient: f64,
) -> Result<Residual> {
    if cov.layout() != &theta.layout {
        return Err(shape("gradient samples and parameters differ in layout"));
    }
    let weight_side = coefficient * gen.quad(&theta.data);
    let samples: Vec<f64> = cov.generator_quads(gen).iter().map(|q| -eta * q + weight_side).collect();
    let grad_mag = mean(&cov.per_sample(|s| gen.magnitude(s)));
    let magnitude = eta * grad_mag + coefficient * gen.magnitude(&theta.data);
    Ok(residual_from(samples, magnitude))
}

/// `η(E Tr g_ig_iᵀ − E Tr g_jg_jᵀ) − c(Tr W_iW_iᵀ − Tr W_jW_jᵀ)`.
pub fn layer_balance_residual(
    grads: &GradientCovariance,
    weights: &[Matrix],
    i: usize,
    j: usize,
    cfg: &EntropicConfig,
) -> Result<Residual> {
    let eta = cfg.eta()?;
    let c = cfg.balance_coefficient();
    check_layers(grads.layout(), &[i, j])?;
    check_weights(grads.layout(), weights)?;
    if i == j {
        return Err(invalid("layer balance compares two distinct layers"));
    }
    let (wi, wj) = (weights[i].frobenius_sq(), weights[j].frobenius_sq());
    let samples = grads.per_sample(|s| eta * (grads.block_sq(s, i) - grads.block_sq(s, j)) - c * (wi - wj));
    let magnitude = eta * (grads.layer_trace(i) + grads.layer_trace(j)) + c * (wi + wj);
    Ok(residual_from(samples, magnitude))
}

fn check_weights(layout: &ParamLayout, weights: &[Matrix]) -> Result<()> {
    if weights.len() != layout.layers() || weights.iter().zip(layout.shapes()).any(|(w, &s)| w.shape() != s) {
        return Err(shape("weights do not match the gradient layout"));
    }
    Ok(())
}

/// Neuron balance for hidden unit `j` of layer `i`.
pub fn neuron_balance_residual(
    grads: &GradientCovariance,
    weights: &[Matrix],
    i: usize,
    j: usize,
    cfg: &EntropicConfig,
) -> Result<Residual> {
    polynomial_balance_residual(grads, weights, i, j, 1, cfg)
}

/// Neuron balance with the outgoing side weighted by the activation degree `d`.
pub fn polynomial_balance_residual(
    grads: &GradientCovariance,
    weights: &[Matrix],
    i: usize,
    j: usize,
    d: u32,
    cfg: &EntropicConfig,
) -> Result<Residual> {
    if d < 1 {
        return Err(invalid("activation degree must be at least 1"));
    }
    let eta = cfg.eta()?;
    let c = cfg.balance_coefficient();
    neuron_shapes(grads.layout(), i, j)?;
    check_weights(grads.layout(), weights)?;
    let d = f64::from(d);
    let w_in = weights[i].row(j).iter().map(|v| v * v).sum::<f64>();
    let w_out = weights[i + 1].column(j).iter().map(|v| v * v).sum::<f64>();
    let samples = grads.per_sample(|s| {
        eta * (grads.in_row_sq(s, i, j) - d * grads.out_col_sq(s, i, j)) - c * (w_in - d * w_out)
    });
    let magnitude = eta * (grads.neuron_in(i, j) + d * grads.neuron_out(i, j)) + c * (w_in + d * w_out);
    Ok(residual_from(samples, magnitude))
}

/// A matrix-valued residual with its Frobenius norm and normalised size.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixResidual {
    pub matrix: Matrix,
    pub frobenius: f64,
    /// The residual's natural scale.
    pub scale: f64,
    /// `frobenius / scale`, or 0 when the scale vanishes.
    pub normalized: f64,
}

fn mean_of<F: Fn(&Matrix) -> Matrix>(samples: &[Matrix], f: F) -> Result<Matrix> {
    let first = samples.first().ok_or_else(|| invalid("need at least one gradient sample"))?;
    let mut acc = f(first);
    for s in &samples[1..] {
        acc += &f(s);
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// `η E[G_WᵀG_W − G_UG_Uᵀ] − c(WᵀW − UUᵀ)` for a loss depending only on `WU`.
/// Normalised by the symmetrised size `η E[‖G_W‖²_F + ‖G_U‖²_F] + c(‖W‖²_F + ‖U‖²_F)`.
pub fn wu_alignment_residual(
    g_w: &[Matrix],
    g_u: &[Matrix],
    w: &Matrix,
    u: &Matrix,
    cfg: &EntropicConfig,
) -> Result<MatrixResidual> {
    let eta = cfg.eta()?;
    let c = cfg.balance_coefficient();
    if w.cols() != u.rows() {
        return Err(shape("W and U do not compose"));
    }
    if g_w.len() != g_u.len() {
        return Err(shape("unequal numbers of G_W and G_U samples"));
    }
    if g_w.iter().any(|g| g.shape() != w.shape()) || g_u.iter().any(|g| g.shape() != u.shape()) {
        return Err(shape("gradient samples do not match W or U"));
    }
    let gwtgw = mean_of(g_w, |g| g.tr_dot(g))?;
    let gugut = mean_of(g_u, |g| g.dot_tr(g))?;
    let mut r = (&gwtgw - &gugut).scale(eta);
    r.axpy(-c, &(&w.tr_dot(w) - &u.dot_tr(u)));
    let frob = r.frobenius();
    let scale = eta * (gwtgw.trace() + gugut.trace()) + c * (w.frobenius_sq() + u.frobenius_sq());
    Ok(MatrixResidual {
        normalized: if scale > 0.0 { frob / scale } else { 0.0 },
        frobenius: frob,
        scale,
        matrix: r,
    })
}

/// `W₁ E[G_VᵀG_V] W₁ᵀ − W₂ᵀ E[G_VG_Vᵀ] W₂` for `V = W₂W₁`. Normalised by
/// the sum of the two terms' Frobenius norms.
pub fn product_form_residual(w1: &Matrix, w2: &Matrix, g_v: &[Matrix]) -> Result<MatrixResidual> {
    if w2.cols() != w1.rows() {
        return Err(shape("W2 W1 does not compose"));
    }
    if g_v.iter().any(|g| g.shape() != (w2.rows(), w1.cols())) {
        return Err(shape("G_V samples do not match W2 W1"));
    }
    let left = w1.dot(&mean_of(g_v, |g| g.tr_dot(g))?).dot_tr(w1);
    let right = w2.tr_dot(&mean_of(g_v, |g| g.dot_tr(g))?).dot(w2);
    let r = &left - &right;
    let frob = r.frobenius();
    let scale = left.frobenius() + right.frobenius();
    Ok(MatrixResidual {
        normalized: if scale > 0.0 { frob / scale } else { 0.0 },
        frobenius: frob,
        scale,
        matrix: r,
    })
}

/// Free energy sampled along an orbit `λ ↦ e^{λA}θ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitScan {
    pub points: Vec<(f64, FreeEnergy)>,
    pub argmin: f64,
}

impl OrbitScan {
    /// Finite-difference slopes `dF/dλ` between consecutive grid points.
    pub fn slopes(&self) -> Vec<f64> {
        self.points
            .windows(2)
            .map(|w| (w[1].1.total() - w[0].1.total()) / (w[1].0 - w[0].0))
            .collect()
    }
}

/// Evaluates `F(e^{λA}θ)` on a grid of `λ` with common random numbers.
pub fn free_energy_orbit_scan<S: BatchSource + ?Sized>(
    net: &Network,
    source: &S,
    gen: &Generator,
    cfg: &EntropicConfig,
    rng: &Rng,
    lambdas: &[f64],
) -> Result<OrbitScan> {
    if lambdas.is_empty() {
        return Err(invalid("empty λ grid"));
    }
    let mut grid = lambdas.to_vec();
    grid.sort_by(f64::total_cmp);
    let theta = net.params();
    let points = grid
        .par_iter()
        .map(|&l| {
            let moved = net.with_params(&gen.apply(&theta, l)?)?;
            Ok((l, free_energy(&moved, source, cfg, rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let argmin = points
        .iter()
        .min_by(|a, b| a.1.total().total_cmp(&b.1.total()))
        .map(|p| p.0)
        .unwrap_or(0.0);
    Ok(OrbitScan { points, argmin })
}

/// Largest `|ℓ(x, e^{λA}θ) − ℓ(x, θ)|` over `probes` random Gaussian
/// examples and `λ ∈ {±0.3, ±0.7}`.
pub fn check_symmetry(net: &Network, gen: &Generator, probes: usize, rng: &mut Rng) -> Result<f64> {
    if probes == 0 {
        return Err(invalid("need at least one probe"));
    }
    let x = gaussian_matrix(rng, probes, net.input_dim(), None)?;
    let y = gaussian_matrix(rng, probes, net.output_dim(), None)?;
    let batch = Batch::new(x, y)?;
    let base = net.losses(&batch)?;
    let mut worst: f64 = 0.0;
    for lambda in [-0.7, -0.3, 0.3, 0.7] {
        let moved = gen.apply_to(net, lambda)?.losses(&batch)?;
        for (a, b) in moved.iter().zip(&base) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Architecture};

    fn cfg(eta: f64, gamma: f64) -> EntropicConfig {
        EntropicConfig::new(eta, gamma, 1)
    }

    fn cov_from(layout: &ParamLayout, samples: &[Vec<f64>]) -> GradientCovariance {
        GradientCovariance::from_samples(
            samples.iter().map(|s| ParamVector::new(layout.clone(), s.clone()).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn layer_examples() {
        let lay = ParamLayout::new(vec![(1, 2), (1, 1)]);
        // Tr g₁g₁ᵀ = 2, Tr g₂g₂ᵀ = 4.
        let cov = cov_from(&lay, &[vec![1.0, 1.0, 2.0]]);
        let w = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 1)];
        let r = layer_balance_residual(&cov, &w, 0, 1, &cfg(0.1, 0.0)).unwrap();
        assert!((r.value + 0.2).abs() < 1e-15);

        let w = vec![Matrix::row_vector(&[1.0, 2f64.sqrt()]), Matrix::scalar(1.0)];
        let r = layer_balance_residual(&cov, &w, 0, 1, &cfg(0.0, 0.01)).unwrap();
        assert!((r.value + 0.08).abs() < 1e-15);

        let zero = layer_balance_residual(&cov, &w, 0, 1, &cfg(0.0, 0.0)).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn neuron_and_polynomial_examples() {
        // Layer 0 is 1×2 (one hidden unit with two inputs); layer 1 is 2×1.
        let lay = ParamLayout::new(vec![(1, 2), (2, 1)]);
        let cov = cov_from(&lay, &[vec![1.0, 1.0, 1.0, 0.0]]);
        let w = vec![Matrix::zeros(1, 2), Matrix::zeros(2, 1)];
        let r = neuron_balance_residual(&cov, &w, 0, 0, &cfg(1.0, 0.0)).unwrap();
        assert_eq!(r.value, 1.0);
        let p1 = polynomial_balance_residual(&cov, &w, 0, 0, 1, &cfg(1.0, 0.0)).unwrap();
        assert_eq!(p1, r);
        assert!(neuron_balance_residual(&cov, &w, 1, 0, &cfg(1.0, 0.0)).is_err());

        let balanced = vec![Matrix::row_vector(&[1.0, 1.0]), Matrix::column_vector(&[1.0, 1.0])];
        let r = neuron_balance_residual(&cov, &balanced, 0, 0, &cfg(0.0, 0.25)).unwrap();
        assert_eq!(r.value, 0.0);

        // E‖g_in‖² = 4, E‖g_out‖² = 2, d = 2.
        let cov = cov_from(&lay, &[vec![2.0, 0.0, 1.0, 1.0]]);
        let eta = 0.3;
        let r = polynomial_balance_residual(&cov, &w, 0, 0, 2, &cfg(eta, 0.0)).unwrap();
        assert_eq!(r.value, 0.0);
        let cov = cov_from(&lay, &[vec![1.0, 0.0, 1.0, 0.0]]);
        let r = polynomial_balance_residual(&cov, &w, 0, 0, 2, &cfg(eta, 0.0)).unwrap();
        assert!((r.value + eta).abs() < 1e-15);
        assert!(polynomial_balance_residual(&cov, &w, 0, 0, 0, &cfg(eta, 0.0)).is_err());
    }

    #[test]
    fn wu_and_product_form_examples() {
        let r = wu_alignment_residual(&[Matrix::scalar(1.0)], &[Matrix::scalar(2.0)], &Matrix::scalar(0.0), &Matrix::scalar(0.0), &cfg(1.0, 0.0)).unwrap();
        assert_eq!(r.matrix[(0, 0)], -3.0);
        assert!((r.normalized - 0.6).abs() < 1e-15);
        let r = wu_alignment_residual(&[Matrix::scalar(0.0)], &[Matrix::scalar(0.0)], &Matrix::scalar(2.0), &Matrix::scalar(1.0), &cfg(0.0, 1.0)).unwrap();
        assert_eq!(r.matrix[(0, 0)], -12.0);
        let eye = Matrix::identity(2);
        let r = wu_alignment_residual(&[Matrix::zeros(2, 2)], &[Matrix::zeros(2, 2)], &eye, &eye, &cfg(0.5, 0.5)).unwrap();
        assert_eq!(r.frobenius, 0.0);

        let r = product_form_residual(&Matrix::scalar(2.0), &Matrix::scalar(1.0), &[Matrix::scalar(1.0)]).unwrap();
        assert_eq!(r.matrix[(0, 0)], 3.0);
        let r = product_form_residual(&Matrix::scalar(1.0), &Matrix::scalar(1.0), &[Matrix::scalar(0.7)]).unwrap();
        assert_eq!(r.frobenius, 0.0);
        let r = product_form_residual(&Matrix::scalar(1.0), &Matrix::scalar(1.0), &[Matrix::scalar(0.0)]).unwrap();
        assert_eq!(r.frobenius, 0.0);
    }

    #[test]
    fn generators_are_symmetries() {
        let mut rng = Rng::new(4);
        let lin = Network::random(Architecture::DeepLinear, &[3, 4, 2], &mut rng, 1.0).unwrap();
        let g = Generator::layer_rescaling(&lin.layout(), 0, 1).unwrap();
        assert!(check_symmetry(&lin, &g, 16, &mut rng).unwrap() < 1e-10);

        let relu = Network::random(Architecture::Mlp { activation: Activation::Relu }, &[3, 4, 2], &mut rng, 1.0).unwrap();
        let g = Generator::neuron_rescaling(&relu.layout(), 0, 2).unwrap();
        assert!(check_symmetry(&relu, &g, 16, &mut rng).unwrap() < 1e-10);

        let poly = Network::random(Architecture::Mlp { activation: Activation::Poly { degree: 2 } }, &[3, 4, 2], &mut rng, 1.0).unwrap();
        let g = Generator::polynomial_neuron(&poly.layout(), 0, 1, 2).unwrap();
        assert!(check_symmetry(&poly, &g, 16, &mut rng).unwrap() < 1e-10);

        let c = gaussian_matrix(&mut rng, 4, 4, None).unwrap();
        let g = Generator::product_symmetry(&lin.layout(), 1, 0, &c).unwrap();
        assert!(check_symmetry(&lin, &g, 16, &mut rng).unwrap() < 1e-9);

        let not_sym = Generator::diagonal(lin.layout().len(), vec![(0, 1.0)]).unwrap();
        assert!(check_symmetry(&lin, &not_sym, 16, &mut rng).unwrap() > 1e-6);
    }

    #[test]
    fn antisymmetric_generator_has_zero_residual() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let g = Generator::dense(a).unwrap();
        assert!(g.is_antisymmetric());
        let net = Network::new(Architecture::DeepLinear, vec![Matrix::scalar(1.0), Matrix::scalar(2.0)]).unwrap();
        let data = crate::datagen::DataModel::isotropic(Matrix::scalar(1.0), 1.0).unwrap();
        let r = master_balance_residual(&net, &data, &g, &cfg(0.1, 0.1), &Rng::new(0)).unwrap();
        assert_eq!(r.value, 0.0);
    }
}
