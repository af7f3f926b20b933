//! Teacher-student data: Gaussian inputs, a linear (or network) teacher and
//! Gaussian label noise, plus fixed datasets and an IDX reader.

mod idx;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, LabelEncoding};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::models::Network;
use crate::numerics::{checked_inverse, condition_number, gaussian_matrix, random_orthonormal, sqrtm_psd, Matrix, Rng};

/// Paired inputs (rows of `x`) and labels (rows of `y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(shape(format!(
                "batch has {} inputs but {} labels",
                x.rows(),
                y.rows()
            )));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("batch"));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// The single example at row `i`.
    pub fn example(&self, i: usize) -> Batch {
        Batch {
            x: self.x.rows_range(i, 1),
            y: self.y.rows_range(i, 1),
        }
    }
}

/// Anything that can hand out i.i.d. minibatches.
pub trait BatchSource: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sample(&self, rng: &mut Rng, batch_size: usize) -> Result<Batch>;

    /// Exact population data for linear models, if this source admits it:
    /// a small weighted batch whose mean loss equals the expected loss of any
    /// model that is linear in its input, up to the returned additive constant.
    fn population(&self) -> Option<(Batch, f64)> {
        None
    }
}

#[derive(Serialize, Deserialize)]
struct DataModelRepr {
    v: Matrix,
    sigma_x: Matrix,
    sigma_eps: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    teacher: Option<Network>,
    #[serde(default)]
    seed: u64,
}

/// Generative model `x ~ N(0, Σx)`, `y = Vx + ε` (or `teacher(x) + ε`),
/// `ε ~ N(0, Σε)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DataModelRepr", into = "DataModelRepr")]
pub struct DataModel {
    v: Matrix,
    sigma_x: Matrix,
    sigma_eps: Matrix,
    teacher: Option<Network>,
    seed: u64,
    sqrt_sigma_x: Matrix,
    sqrt_sigma_eps: Matrix,
}

impl TryFrom<DataModelRepr> for DataModel {
    type Error = Error;

    fn try_from(r: DataModelRepr) -> Result<Self> {
        let mut dm = DataModel::new(r.v, r.sigma_x, r.sigma_eps)?;
        if let Some(t) = r.teacher {
            dm = dm.with_teacher(t)?;
        }
        Ok(dm.with_seed(r.seed))
    }
}

impl From<DataModel> for DataModelRepr {
    fn from(d: DataModel) -> Self {
        DataModelRepr {
            v: d.v,
            sigma_x: d.sigma_x,
            sigma_eps: d.sigma_eps,
            teacher: d.teacher,
            seed: d.seed,
        }
    }
}

fn check_covariance(c: &Matrix, dim: usize, what: &str) -> Result<Matrix> {
    if c.shape() != (dim, dim) {
        return Err(shape(format!(
            "{what} is {}x{}, expected {dim}x{dim}",
            c.rows(),
            c.cols()
        )));
    }
    if !c.is_symmetric(1e-12 * c.max_abs().max(1.0)) {
        return Err(invalid(format!("{what} is not symmetric")));
    }
    sqrtm_psd(c)
}

impl DataModel {
    /// `v` is `d_y × d_x`.
    pub fn new(v: Matrix, sigma_x: Matrix, sigma_eps: Matrix) -> Result<Self> {
        let (dy, dx) = v.shape();
        let sqrt_sigma_x = check_covariance(&sigma_x, dx, "sigma_x")?;
        let sqrt_sigma_eps = check_covariance(&sigma_eps, dy, "sigma_eps")?;
        Ok(Self {
            v,
            sigma_x,
            sigma_eps,
            teacher: None,
            seed: 0,
            sqrt_sigma_x,
            sqrt_sigma_eps,
        })
    }

    /// Identity input covariance and isotropic noise of variance `noise`.
    pub fn isotropic(v: Matrix, noise: f64) -> Result<Self> {
        let (dy, dx) = v.shape();
        Self::new(v, Matrix::identity(dx), Matrix::identity(dy).scale(noise))
    }

    /// Two-output model with `Σε = diag(1, φ)`.
    pub fn with_balance(v: Matrix, sigma_x: Matrix, phi: f64) -> Result<Self> {
        if v.rows() != 2 {
            return Err(shape("the balance knob needs a two-output teacher"));
        }
        if phi < 0.0 {
            return Err(invalid("phi must be non-negative"));
        }
        Self::new(v, sigma_x, Matrix::from_diag(&[1.0, phi]))
    }

    /// Replaces the linear teacher with a network. `V` is kept only for its
    /// shape and is otherwise unused.
    pub fn with_teacher(mut self, teacher: Network) -> Result<Self> {
        if teacher.input_dim() != self.input_dim() || teacher.output_dim() != self.output_dim() {
            return Err(shape(format!(
                "teacher maps {} -> {}, data model is {} -> {}",
                teacher.input_dim(),
                teacher.output_dim(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        self.teacher = Some(teacher);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn sigma_x(&self) -> &Matrix {
        &self.sigma_x
    }

    pub fn sigma_eps(&self) -> &Matrix {
        &self.sigma_eps
    }

    pub fn sqrt_sigma_x(&self) -> &Matrix {
        &self.sqrt_sigma_x
    }

    pub fn sqrt_sigma_eps(&self) -> &Matrix {
        &self.sqrt_sigma_eps
    }

    pub fn teacher(&self) -> Option<&Network> {
        self.teacher.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator seeded from this model's own seed.
    pub fn rng(&self) -> Rng {
        Rng::new(self.seed)
    }

    /// Noiseless teacher output for the rows of `x`.
    pub fn target(&self, x: &Matrix) -> Matrix {
        match &self.teacher {
            Some(t) => t.predict(x),
            None => x.dot_tr(&self.v),
        }
    }
}

impl BatchSource for DataModel {
    fn input_dim(&self) -> usize {
        self.v.cols()
    }

    fn output_dim(&self) -> usize {
        self.v.rows()
    }

    fn sample(&self, rng: &mut Rng, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        // Rows z·√Σ have covariance Σ since √Σ is symmetric.
        let x = gaussian_matrix(rng, batch_size, self.input_dim(), None)?.dot(&self.sqrt_sigma_x);
        let noise =
            gaussian_matrix(rng, batch_size, self.output_dim(), None)?.dot(&self.sqrt_sigma_eps);
        let y = &self.target(&x) + &noise;
        Batch::new(x, y)
    }

    fn population(&self) -> Option<(Batch, f64)> {
        if self.teacher.is_some() {
            return None;
        }
        // Rows √d·(√Σx)ᵢ satisfy (1/d) XᵀX = Σx.
        let d = self.input_dim();
        let x = self.sqrt_sigma_x.scale((d as f64).sqrt());
        let y = x.dot_tr(&self.v);
        Some((Batch { x, y }, self.sigma_eps.trace()))
    }
}

/// A finite dataset sampled uniformly with replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedDataset {
    data: Batch,
}

impl FixedDataset {
    pub fn new(data: Batch) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("a fixed dataset needs at least one example"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Batch {
        &self.data
    }
}

impl BatchSource for FixedDataset {
    fn input_dim(&self) -> usize {
        self.data.x.cols()
    }

    fn output_dim(&self) -> usize {
        self.data.y.cols()
    }

    fn sample(&self, rng: &mut Rng, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        let n = self.data.len();
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.below(n)).collect();
        let x = Matrix::from_fn(batch_size, self.input_dim(), |i, j| self.data.x[(idx[i], j)]);
        let y = Matrix::from_fn(batch_size, self.output_dim(), |i, j| self.data.y[(idx[i], j)]);
        Ok(Batch { x, y })
    }
}

/// Draws one batch with [`BatchSource::sample`]; a convenience for callers
/// holding a concrete [`DataModel`].
pub fn sample_batch(dm: &DataModel, rng: &mut Rng, batch_size: usize) -> Result<Batch> {
    dm.sample(rng, batch_size)
}

/// Replaces every input `x` by `M₃x`.
pub fn apply_view(batch: &Batch, m3: &Matrix) -> Result<Batch> {
    let d = batch.x.cols();
    if m3.shape() != (d, d) {
        return Err(shape(format!(
            "view matrix is {}x{}, inputs have dimension {d}",
            m3.rows(),
            m3.cols()
        )));
    }
    let c = condition_number(m3)?;
    if c > 1e8 {
        return Err(Error::Singular(c));
    }
    Ok(Batch {
        x: batch.x.dot_tr(m3),
        y: batch.y.clone(),
    })
}

/// Gaussian `d × d` matrix redrawn until its condition number is at most
/// `max_cond`.
pub fn random_invertible(rng: &mut Rng, d: usize, max_cond: f64) -> Result<Matrix> {
    const MAX_ATTEMPTS: usize = 100_000;
    if max_cond < 1.0 {
        return Err(invalid("max_cond must be at least 1"));
    }
    for _ in 0..MAX_ATTEMPTS {
        let m = gaussian_matrix(rng, d, d, None)?;
        if condition_number(&m)? <= max_cond {
            return Ok(m);
        }
    }
    Err(Error::NoConvergence("well-conditioned rejection sampling", MAX_ATTEMPTS))
}

/// `Q₁ diag(s) Q₂ᵀ` with Haar orthogonal `Q₁, Q₂` and singular values
/// spaced geometrically from `cond^{-1/2}` to `cond^{1/2}`, so the
/// condition number is exactly `cond` and the determinant has modulus 1.
pub fn conditioned_matrix(rng: &mut Rng, d: usize, cond: f64) -> Result<Matrix> {
    if !(cond >= 1.0) {
        return Err(invalid("cond must be at least 1"));
    }
    let q1 = random_orthonormal(rng, d, d)?;
    let q2 = random_orthonormal(rng, d, d)?;
    let s: Vec<f64> = (0..d)
        .map(|i| {
            let t = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.5 };
            cond.powf(t - 0.5)
        })
        .collect();
    Ok(q1.dot(&Matrix::from_diag(&s)).dot_tr(&q2))
}

/// Inverse that enforces the same conditioning bound as [`apply_view`].
pub fn view_inverse(m3: &Matrix) -> Result<Matrix> {
    checked_inverse(m3, 1e8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditioned_matrix_has_exact_condition() {
        let mut rng = Rng::new(11);
        let m = conditioned_matrix(&mut rng, 4, 5.0).unwrap();
        assert!((condition_number(&m).unwrap() - 5.0).abs() < 1e-9);
        let s = crate::numerics::svd(&m).unwrap().s;
        assert!((s.iter().product::<f64>() - 1.0).abs() < 1e-9);
        assert!(conditioned_matrix(&mut rng, 4, 0.5).is_err());
    }

    #[test]
    fn noiseless_identity_teacher() {
        let dm = DataModel::new(Matrix::identity(3), Matrix::identity(3), Matrix::zeros(3, 3)).unwrap();
        let b = dm.sample(&mut Rng::new(0), 16).unwrap();
        assert_eq!(b.x, b.y);
    }

    #[test]
    fn label_noise_covariance() {
        let dm = DataModel::new(
            Matrix::zeros(2, 3),
            Matrix::identity(3),
            Matrix::from_diag(&[1.0, 0.25]),
        )
        .unwrap();
        let b = dm.sample(&mut Rng::new(4), 100_000).unwrap();
        let cov = b.y.tr_dot(&b.y).scale(1.0 / b.len() as f64);
        assert!((cov[(0, 0)] - 1.0).abs() < 0.05);
        assert!((cov[(1, 1)] - 0.25).abs() < 0.0125);
        assert!(cov[(0, 1)].abs() < 0.02);
    }

    #[test]
    fn deterministic_and_validated() {
        let dm = DataModel::isotropic(Matrix::identity(2), 0.1).unwrap();
        let a = dm.sample(&mut Rng::new(3), 5).unwrap();
        let b = dm.sample(&mut Rng::new(3), 5).unwrap();
        assert_eq!(a, b);
        assert!(dm.sample(&mut Rng::new(3), 0).is_err());
        assert!(DataModel::new(Matrix::identity(2), Matrix::identity(3), Matrix::identity(2)).is_err());
        assert!(DataModel::new(
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::from_diag(&[1.0, -1.0])
        )
        .is_err());
    }

    #[test]
    fn views() {
        let dm = DataModel::isotropic(Matrix::identity(3), 0.0).unwrap();
        let b = dm.sample(&mut Rng::new(1), 8).unwrap();
        assert_eq!(apply_view(&b, &Matrix::identity(3)).unwrap(), b);
        let doubled = apply_view(&b, &Matrix::identity(3).scale(2.0)).unwrap();
        assert_eq!(doubled.x, b.x.scale(2.0));
        let mut rng = Rng::new(2);
        let m = random_invertible(&mut rng, 3, 5.0).unwrap();
        assert!(condition_number(&m).unwrap() <= 5.0);
        let there = apply_view(&b, &m).unwrap();
        let back = apply_view(&there, &view_inverse(&m).unwrap()).unwrap();
        assert!(back.x.rel_diff(&b.x) < 1e-12);
        let singular = Matrix::from_diag(&[1.0, 1.0, 0.0]);
        assert!(apply_view(&b, &singular).is_err());
    }

    #[test]
    fn population_reproduces_second_moment() {
        let sx = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let dm = DataModel::new(Matrix::identity(2), sx.clone(), Matrix::identity(2)).unwrap();
        let (b, c) = dm.population().unwrap();
        let m2 = b.x.tr_dot(&b.x).scale(1.0 / b.len() as f64);
        assert!(m2.rel_diff(&sx) < 1e-12);
        assert_eq!(c, 2.0);
    }

    #[test]
    fn json_round_trip() {
        let dm = DataModel::with_balance(Matrix::identity(2), Matrix::identity(2), 0.5).unwrap().with_seed(9);
        let s = serde_json::to_string(&dm).unwrap();
        let back: DataModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back.sigma_eps(), dm.sigma_eps());
        assert_eq!(back.seed(), 9);
    }
}
