//! Exact deep-linear constructions: the balanced interpolating solution
//! selected by the entropic term, the weight-decay solution, the hidden maps
//! they induce, and closed-form sharpness values.

use serde::{Deserialize, Serialize};

use crate::datagen::{BatchSource, DataModel};
use crate::error::{invalid, shape, Result};
use crate::models::{Architecture, Network};
use crate::numerics::{checked_inverse, inv_sqrtm_pd, random_orthonormal, svd, Matrix, Rng};

/// Largest condition number accepted for the fixed embeddings.
const MAX_EMBEDDING_COND: f64 = 1e8;

/// How the per-layer scales of the balanced solution are normalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Scales that equalise the gradient-noise traces of every layer for the
    /// given embeddings and covariances.
    #[default]
    Balanced,
    /// The trace-scaled closed form `Σ₁ = Σ_D = (d/TrS′)^{(D−2)/2D}√S′`,
    /// `Σᵢ = (TrS′/d)^{1/D} I`; it coincides with `Balanced` when
    /// `‖√Σε M₁‖²_F = ‖M₂M₃√Σx‖²_F = d`.
    TraceScaled,
}

/// The balanced interpolating deep-linear solution.
#[derive(Debug, Clone)]
pub struct DeepLinearSolution {
    pub weights: Vec<Matrix>,
    /// Orthonormal factors `U₁ … U_{D−1}` (`width_i × d`).
    pub factors: Vec<Matrix>,
    /// Per-layer scale matrices `Σ₁ … Σ_D` (`d × d`).
    pub sigmas: Vec<Matrix>,
    /// Scale `α_L` of the layer-`L` representation, `L = 1 … D−1`.
    pub alphas: Vec<f64>,
    pub s_prime: Vec<f64>,
    pub u_tilde: Matrix,
    pub v_tilde: Matrix,
    /// `Σx^{−1/2}`.
    pub sigma_x_inv_sqrt: Matrix,
    /// `M₁⁻¹ Σε^{−1/2} Ũ S′ Ṽ Σx^{−1/2}`, i.e. `M₁⁻¹V` on the teacher's range.
    pub core_target: Matrix,
    pub m1: Option<Matrix>,
    pub m2: Option<Matrix>,
    pub m3: Option<Matrix>,
    pub normalization: Normalization,
}

impl DeepLinearSolution {
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn rank(&self) -> usize {
        self.s_prime.len()
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(Architecture::DeepLinear, self.weights.clone())?.with_embeddings(
            self.m1.clone(),
            self.m2.clone(),
            self.m3.clone(),
        )
    }
}

fn embedding_or_identity(m: Option<&Matrix>, d: usize, what: &str) -> Result<Matrix> {
    match m {
        None => Ok(Matrix::identity(d)),
        Some(m) if m.shape() == (d, d) => Ok(m.clone()),
        Some(m) => Err(shape(format!("{what} is {}x{}, expected {d}x{d}", m.rows(), m.cols()))),
    }
}

fn sqrt_diag(s: &[f64]) -> Matrix {
    Matrix::from_diag(&s.iter().map(|v| v.sqrt()).collect::<Vec<_>>())
}

/// Thin SVD of `m` truncated to its numerical rank.
fn truncated_svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let f = svd(m)?;
    let d = f.rank();
    Ok((f.u.columns(0, d), f.s[..d].to_vec(), f.vt.rows_range(0, d)))
}

fn check_widths(widths: &[usize], depth: usize, d: usize) -> Result<()> {
    if depth == 0 {
        return Err(invalid("depth must be at least 1"));
    }
    if widths.len() != depth - 1 {
        return Err(invalid(format!(
            "depth {depth} needs {} hidden widths, got {}",
            depth - 1,
            widths.len()
        )));
    }
    if let Some(&w) = widths.iter().find(|&&w| w < d) {
        return Err(invalid(format!("hidden width {w} is below the rank {d}")));
    }
    Ok(())
}

/// Builds the balanced interpolating solution for data `dm` seen through
/// embeddings `M₁, M₂, M₃` (identity when `None`).
///
/// With `V′ = √Σε V √Σx = Ũ S′ Ṽ` of rank `d` and `t = Tr S′`:
/// `W₁ = U₁Σ₁ṼΣx^{−1/2}(M₂M₃)⁻¹`, `Wᵢ = UᵢΣᵢU_{i−1}ᵀ`,
/// `W_D = M₁⁻¹Σε^{−1/2}ŨΣ_D U_{D−1}ᵀ`, where `Σ₁ = α₁√S′`, interior
/// `Σᵢ = rI`, `Σ_D = √S′/α_{D−1}` and `αᵢ = α₁ r^{i−1}`.
pub fn deep_linear_solution(
    dm: &DataModel,
    m1: Option<&Matrix>,
    m2: Option<&Matrix>,
    m3: Option<&Matrix>,
    depth: usize,
    widths: &[usize],
    normalization: Normalization,
    rng: &mut Rng,
) -> Result<DeepLinearSolution> {
    let (dy, dx) = (dm.output_dim(), dm.input_dim());
    let m1m = embedding_or_identity(m1, dy, "M1")?;
    let m2m = embedding_or_identity(m2, dx, "M2")?;
    let m3m = embedding_or_identity(m3, dx, "M3")?;
    let m23 = m2m.dot(&m3m);
    let m1_inv = checked_inverse(&m1m, MAX_EMBEDDING_COND)?;
    let m23_inv = checked_inverse(&m23, MAX_EMBEDDING_COND)?;
    let eps_inv_sqrt = inv_sqrtm_pd(dm.sigma_eps())?;
    let x_inv_sqrt = inv_sqrtm_pd(dm.sigma_x())?;

    let v_prime = dm.sqrt_sigma_eps().dot(dm.v()).dot(dm.sqrt_sigma_x());
    let (u_tilde, s_prime, v_tilde) = truncated_svd(&v_prime)?;
    let d = s_prime.len();
    if d == 0 {
        return Err(invalid("the teacher has rank zero"));
    }
    check_widths(widths, depth, d)?;
    let root_s = sqrt_diag(&s_prime);

    let head = eps_inv_sqrt.dot(&u_tilde); // Σε^{-1/2} Ũ
    let tail = v_tilde.dot(&x_inv_sqrt).dot(&m23_inv); // Ṽ Σx^{-1/2} (M₂M₃)⁻¹

    let core_target = m1_inv
        .dot(&head)
        .dot(&Matrix::from_diag(&s_prime))
        .dot(&v_tilde)
        .dot(&x_inv_sqrt);
    let mk = |m: Option<&Matrix>| m.cloned();
    if depth == 1 {
        let w = core_target.dot(&m23_inv);
        return Ok(DeepLinearSolution {
            weights: vec![w],
            factors: vec![],
            sigmas: vec![Matrix::from_diag(&s_prime)],
            alphas: vec![],
            s_prime,
            u_tilde,
            v_tilde,
            sigma_x_inv_sqrt: x_inv_sqrt,
            core_target,
            m1: mk(m1),
            m2: mk(m2),
            m3: mk(m3),
            normalization,
        });
    }

    let t: f64 = s_prime.iter().sum();
    let (a, b) = match normalization {
        Normalization::Balanced => (
            dm.sqrt_sigma_eps().dot(&m1m).frobenius_sq(),
            m23.dot(dm.sqrt_sigma_x()).frobenius_sq(),
        ),
        Normalization::TraceScaled => (d as f64, d as f64),
    };
    let big_d = depth as f64;
    let r = (t * t / (a * b)).powf(1.0 / (2.0 * big_d));
    let alpha1 = (b * r * r / t).sqrt();
    let alphas: Vec<f64> = (0..depth - 1).map(|i| alpha1 * r.powi(i as i32)).collect();

    let factors = widths
        .iter()
        .map(|&w| random_orthonormal(rng, w, d))
        .collect::<Result<Vec<_>>>()?;
    let mut sigmas = Vec::with_capacity(depth);
    sigmas.push(root_s.scale(alpha1));
    for _ in 1..depth - 1 {
        sigmas.push(Matrix::identity(d).scale(r));
    }
    sigmas.push(root_s.scale(1.0 / alphas[depth - 2]));

    let mut weights = Vec::with_capacity(depth);
    weights.push(factors[0].dot(&sigmas[0]).dot(&tail));
    for i in 1..depth - 1 {
        weights.push(factors[i].dot(&sigmas[i]).dot_tr(&factors[i - 1]));
    }
    weights.push(m1_inv.dot(&head).dot(&sigmas[depth - 1]).dot_tr(&factors[depth - 2]));

    Ok(DeepLinearSolution {
        weights,
        factors,
        sigmas,
        alphas,
        s_prime,
        u_tilde,
        v_tilde,
        sigma_x_inv_sqrt: x_inv_sqrt,
        core_target,
        m1: mk(m1),
        m2: mk(m2),
        m3: mk(m3),
        normalization,
    })
}

/// The map `x ↦ h^L(x)` of the balanced solution as one matrix:
/// `U_L α_L √S′ Ṽ Σx^{−1/2}` for `1 ≤ L < D`, and `M₁⁻¹V` for `L = D`.
pub fn predicted_hidden_map(sol: &DeepLinearSolution, layer: usize) -> Result<Matrix> {
    let depth = sol.depth();
    if layer == 0 || layer > depth {
        return Err(invalid(format!("layer {layer} outside 1..={depth}")));
    }
    let core = sqrt_diag(&sol.s_prime).dot(&sol.v_tilde).dot(&sol.sigma_x_inv_sqrt);
    if layer < depth {
        return Ok(sol.factors[layer - 1].dot(&core).scale(sol.alphas[layer - 1]));
    }
    Ok(sol.core_target.clone())
}

/// The scalar relating layer `la` of solution `a` to layer `lb` of solution
/// `b` (built for the same data): `h_a = c₀ R h_b` with `c₀ = α^a_{la} / α^b_{lb}`.
pub fn predicted_c0(a: &DeepLinearSolution, la: usize, b: &DeepLinearSolution, lb: usize) -> Result<f64> {
    let get = |s: &DeepLinearSolution, l: usize| -> Result<f64> {
        if l == 0 || l >= s.depth() {
            return Err(invalid(format!("hidden layer {l} outside 1..{}", s.depth())));
        }
        Ok(s.alphas[l - 1])
    };
    Ok(get(a, la)? / get(b, lb)?)
}

/// The weight-decay-limit solution.
#[derive(Debug, Clone)]
pub struct WdSolution {
    pub weights: Vec<Matrix>,
    /// `U₀ … U_D`; `U₀` and `U_D` come from the SVD, the rest are random.
    pub factors: Vec<Matrix>,
    /// Diagonal `±1` sign matrices `P₁ … P_D` with product `I`.
    pub signs: Vec<Vec<f64>>,
    /// `Σ = S^{1/D}`.
    pub sigma: Vec<f64>,
    /// Singular values `S` of `M₁⁻¹VM₃⁻¹M₂⁻¹`.
    pub s: Vec<f64>,
    pub m1: Option<Matrix>,
    pub m2: Option<Matrix>,
    pub m3: Option<Matrix>,
}

impl WdSolution {
    pub fn network(&self) -> Result<Network> {
        Network::new(Architecture::DeepLinear, self.weights.clone())?.with_embeddings(
            self.m1.clone(),
            self.m2.clone(),
            self.m3.clone(),
        )
    }
}

/// `Wᵢ = Uᵢ Pᵢ Σ U_{i−1}ᵀ` with `Σ = S^{1/D}` from the SVD of
/// `M₁⁻¹ V M₃⁻¹ M₂⁻¹ = U_D S U₀ᵀ`.
pub fn deep_linear_wd_solution(
    v: &Matrix,
    m1: Option<&Matrix>,
    m2: Option<&Matrix>,
    m3: Option<&Matrix>,
    depth: usize,
    widths: &[usize],
    rng: &mut Rng,
) -> Result<WdSolution> {
    let (dy, dx) = v.shape();
    let m1m = embedding_or_identity(m1, dy, "M1")?;
    let m2m = embedding_or_identity(m2, dx, "M2")?;
    let m3m = embedding_or_identity(m3, dx, "M3")?;
    let target = checked_inverse(&m1m, MAX_EMBEDDING_COND)?
        .dot(v)
        .dot(&checked_inverse(&m3m, MAX_EMBEDDING_COND)?)
        .dot(&checked_inverse(&m2m, MAX_EMBEDDING_COND)?);
    let (u_d, s, vt) = truncated_svd(&target)?;
    let d = s.len();
    if d == 0 {
        return Err(invalid("the teacher has rank zero"));
    }
    check_widths(widths, depth, d)?;
    let sigma: Vec<f64> = s.iter().map(|x| x.powf(1.0 / depth as f64)).collect();

    let mut factors = vec![vt.transpose()];
    for &w in widths {
        factors.push(random_orthonormal(rng, w, d)?);
    }
    factors.push(u_d);

    let mut signs: Vec<Vec<f64>> = (0..depth)
        .map(|_| (0..d).map(|_| rng.rademacher()).collect())
        .collect();
    // Force the product of the sign matrices to the identity.
    for k in 0..d {
        let prod: f64 = signs[..depth - 1].iter().map(|p| p[k]).product();
        signs[depth - 1][k] = prod;
    }

    let weights = (1..=depth)
        .map(|i| {
            let ps: Vec<f64> = signs[i - 1].iter().zip(&sigma).map(|(p, s)| p * s).collect();
            factors[i].dot(&Matrix::from_diag(&ps)).dot_tr(&factors[i - 1])
        })
        .collect();
    Ok(WdSolution {
        weights,
        factors,
        signs,
        sigma,
        s,
        m1: m1.cloned(),
        m2: m2.cloned(),
        m3: m3.cloned(),
    })
}

/// `d_y Tr[Σx ṼᵀS′Ṽ] + Tr[Σε⁻¹ŨS′Ũᵀ] Tr[Σx]`, the reduced sharpness formula at the
/// entropic optimum.
pub fn entropic_sharpness_reduced(dm: &DataModel) -> Result<f64> {
    let eps_inv = checked_inverse(dm.sigma_eps(), 1e12)?;
    let v_prime = dm.sqrt_sigma_eps().dot(dm.v()).dot(dm.sqrt_sigma_x());
    let (u, s, vt) = truncated_svd(&v_prime)?;
    let s = Matrix::from_diag(&s);
    let first = dm.output_dim() as f64 * dm.sigma_x().dot(&vt.tr_dot(&s.dot(&vt))).trace();
    let second = eps_inv.dot(&u.dot(&s).dot_tr(&u)).trace() * dm.sigma_x().trace();
    Ok(first + second)
}

/// `2 √(d_y Tr Σx) · Tr Ŝ` with `Ŝ` the singular values of `V Σx`.
pub fn min_sharpness_bound(dm: &DataModel) -> Result<f64> {
    let s_hat: f64 = svd(&dm.v().dot(dm.sigma_x()))?.s.iter().sum();
    Ok(2.0 * (dm.output_dim() as f64 * dm.sigma_x().trace()).sqrt() * s_hat)
}

/// Exact `Tr E∇²ℓ` of `ℓ = ‖y − UWx‖²`: `2 d_y Tr[WΣxWᵀ] + 2‖U‖²_F TrΣx`.
pub fn direct_sharpness_two_layer(w: &Matrix, u: &Matrix, sigma_x: &Matrix, d_y: usize) -> Result<f64> {
    if u.cols() != w.rows() || sigma_x.shape() != (w.cols(), w.cols()) || u.rows() != d_y {
        return Err(shape("direct sharpness needs U (d_y×h), W (h×d_x), Σx (d_x×d_x)"));
    }
    Ok(2.0 * d_y as f64 * w.dot(sigma_x).dot_tr(w).trace() + 2.0 * u.frobenius_sq() * sigma_x.trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso(v: Matrix) -> DataModel {
        let (dy, dx) = v.shape();
        DataModel::new(v, Matrix::identity(dx), Matrix::identity(dy)).unwrap()
    }

    #[test]
    fn identity_depth_two() {
        let sol = deep_linear_solution(&iso(Matrix::identity(2)), None, None, None, 2, &[2], Normalization::Balanced, &mut Rng::new(0)).unwrap();
        for s in &sol.sigmas {
            assert!((s - &Matrix::identity(2)).max_abs() < 1e-12);
        }
        let prod = sol.weights[1].dot(&sol.weights[0]);
        assert!(prod.rel_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn depth_three_scales() {
        let sol = deep_linear_solution(&iso(Matrix::identity(2).scale(4.0)), None, None, None, 3, &[3, 5], Normalization::Balanced, &mut Rng::new(1)).unwrap();
        let c = 4f64.powf(1.0 / 3.0);
        for s in &sol.sigmas {
            assert!((s - &Matrix::identity(2).scale(c)).max_abs() < 1e-12, "{s:?}");
        }
        let prod = sol.network().unwrap().end_to_end().unwrap();
        assert!(prod.rel_diff(&Matrix::identity(2).scale(4.0)) < 1e-12);
    }

    #[test]
    fn trace_scaled_and_balanced_agree_when_boundaries_match() {
        let dm = iso(Matrix::from_diag(&[3.0, 0.5]));
        let a = deep_linear_solution(&dm, None, None, None, 4, &[4, 4, 4], Normalization::Balanced, &mut Rng::new(2)).unwrap();
        let b = deep_linear_solution(&dm, None, None, None, 4, &[4, 4, 4], Normalization::TraceScaled, &mut Rng::new(2)).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!(x.rel_diff(y) < 1e-12);
        }
    }

    #[test]
    fn hidden_map_examples() {
        let dm = DataModel::new(Matrix::from_diag(&[2.0, 1.0]), Matrix::identity(2), Matrix::identity(2)).unwrap();
        let sol = deep_linear_solution(&dm, None, None, None, 2, &[3], Normalization::TraceScaled, &mut Rng::new(3)).unwrap();
        let h = predicted_hidden_map(&sol, 1).unwrap();
        let expect = sol.factors[0].dot(&Matrix::from_diag(&[2f64.sqrt(), 1.0]));
        assert!(h.rel_diff(&expect) < 1e-12);
        let net = sol.network().unwrap();
        assert!(net.hidden_map(1).unwrap().rel_diff(&h) < 1e-12);
        let full = predicted_hidden_map(&sol, 2).unwrap();
        assert!(full.rel_diff(dm.v()) < 1e-12);
        assert!(predicted_hidden_map(&sol, 0).is_err());
        assert!(predicted_hidden_map(&sol, 3).is_err());
    }

    #[test]
    fn wd_examples() {
        let v = Matrix::from_diag(&[4.0, 1.0]);
        let sol = deep_linear_wd_solution(&v, None, None, None, 2, &[2], &mut Rng::new(4)).unwrap();
        assert!((sol.sigma[0] - 2.0).abs() < 1e-14 && (sol.sigma[1] - 1.0).abs() < 1e-14);
        assert!(sol.weights[1].dot(&sol.weights[0]).rel_diff(&v) < 1e-12);
        let one = deep_linear_wd_solution(&v, None, None, None, 1, &[], &mut Rng::new(4)).unwrap();
        assert!(one.weights[0].rel_diff(&v) < 1e-14);
        let deep = deep_linear_wd_solution(&v, None, None, None, 5, &[3, 4, 5, 6], &mut Rng::new(5)).unwrap();
        let traces: Vec<f64> = deep.weights.iter().map(Matrix::frobenius_sq).collect();
        for t in &traces {
            assert!((t - traces[0]).abs() < 1e-10);
        }
        let prod: Vec<f64> = (0..2).map(|k| deep.signs.iter().map(|p| p[k]).product()).collect();
        assert_eq!(prod, vec![1.0, 1.0]);
    }

    #[test]
    fn width_errors() {
        let dm = iso(Matrix::identity(3));
        assert!(deep_linear_solution(&dm, None, None, None, 2, &[2], Normalization::Balanced, &mut Rng::new(0)).is_err());
        assert!(deep_linear_solution(&dm, None, None, None, 3, &[3], Normalization::Balanced, &mut Rng::new(0)).is_err());
        let singular = Matrix::from_diag(&[1.0, 1.0, 0.0]);
        assert!(deep_linear_solution(&dm, Some(&singular), None, None, 2, &[3], Normalization::Balanced, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn sharpness_formulas() {
        let dm = DataModel::new(Matrix::identity(2), Matrix::identity(2), Matrix::from_diag(&[1.0, 0.25])).unwrap();
        assert!((entropic_sharpness_reduced(&dm).unwrap() - 9.0).abs() < 1e-12);
        let dm = iso(Matrix::identity(2));
        assert!((entropic_sharpness_reduced(&dm).unwrap() - 8.0).abs() < 1e-12);
        assert!((min_sharpness_bound(&dm).unwrap() - 8.0).abs() < 1e-12);
        assert_eq!(min_sharpness_bound(&iso(Matrix::zeros(2, 2))).unwrap(), 0.0);

        assert_eq!(direct_sharpness_two_layer(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1), &Matrix::scalar(1.0), 1).unwrap(), 0.0);
        assert_eq!(direct_sharpness_two_layer(&Matrix::scalar(1.0), &Matrix::scalar(1.0), &Matrix::scalar(1.0), 1).unwrap(), 4.0);
    }

    #[test]
    fn imbalanced_input_example() {
        let d = 5;
        let mut sx = vec![0.0; d];
        sx[0] = 1.0;
        let dm = DataModel::new(Matrix::identity(d), Matrix::from_diag(&sx), Matrix::identity(d)).unwrap();
        assert!((entropic_sharpness_reduced(&dm).unwrap() - (d as f64 + 1.0)).abs() < 1e-12);
        assert!((min_sharpness_bound(&dm).unwrap() - 2.0 * (d as f64).sqrt()).abs() < 1e-12);
    }
}
