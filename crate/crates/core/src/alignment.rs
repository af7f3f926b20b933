//! Representation-similarity metrics: Gram-cosine, linear CKA and
//! orthogonal Procrustes with a scalar.
//!
//! A representation is a [`Matrix`] with one row per sample and one column
//! per hidden unit.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{svd, Matrix};

/// Samples × units.
pub type ReprMatrix = Matrix;

/// Default evaluation-set size for alignment statistics.
pub const DEFAULT_EVAL_SAMPLES: usize = 512;

fn check_pair(ha: &Matrix, hb: &Matrix) -> Result<()> {
    if ha.rows() != hb.rows() {
        return Err(shape(format!(
            "representations cover {} and {} samples",
            ha.rows(),
            hb.rows()
        )));
    }
    if ha.rows() < 2 {
        return Err(invalid("alignment needs at least two samples"));
    }
    if !ha.is_finite() || !hb.is_finite() {
        return Err(Error::NonFinite("representation"));
    }
    Ok(())
}

/// Cosine similarity between the sample Gram matrices `H_AH_Aᵀ` and `H_BH_Bᵀ`.
pub fn gram_alignment(ha: &ReprMatrix, hb: &ReprMatrix) -> Result<f64> {
    check_pair(ha, hb)?;
    let ga = ha.dot_tr(ha);
    let gb = hb.dot_tr(hb);
    let (na, nb) = (ga.frobenius(), gb.frobenius());
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("gram alignment of a zero representation is undefined"));
    }
    Ok((ga.inner(&gb) / (na * nb)).clamp(-1.0, 1.0))
}

fn center_columns(h: &Matrix) -> Matrix {
    let n = h.rows() as f64;
    let means: Vec<f64> = (0..h.cols()).map(|j| h.column(j).iter().sum::<f64>() / n).collect();
    Matrix::from_fn(h.rows(), h.cols(), |i, j| h[(i, j)] - means[j])
}

/// Linear CKA `‖AᵀB‖²_F / (‖AᵀA‖_F ‖BᵀB‖_F)`, optionally on column-centred
/// representations.
pub fn cka(ha: &ReprMatrix, hb: &ReprMatrix, centered: bool) -> Result<f64> {
    check_pair(ha, hb)?;
    let (a, b) = if centered {
        (center_columns(ha), center_columns(hb))
    } else {
        (ha.clone(), hb.clone())
    };
    let denom = a.tr_dot(&a).frobenius() * b.tr_dot(&b).frobenius();
    if denom == 0.0 {
        return Err(invalid("CKA of a zero representation is undefined"));
    }
    Ok((a.tr_dot(&b).frobenius_sq() / denom).clamp(0.0, 1.0))
}

/// Least-squares fit `H_A ≈ c₀ H_B Rᵀ`.
#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    pub c0: f64,
    /// `units_A × units_B`, orthonormal columns or rows, whichever is shorter.
    pub rotation: Matrix,
    /// `‖H_A − c₀H_BRᵀ‖_F / ‖H_A‖_F`.
    pub residual: f64,
}

/// Orthogonal Procrustes with a scalar: `Rᵀ = UVᵀ` from the SVD
/// `H_BᵀH_A = UΣVᵀ`, then `c₀ = TrΣ / ‖H_B‖²_F`.
pub fn procrustes_fit(ha: &ReprMatrix, hb: &ReprMatrix) -> Result<ProcrustesFit> {
    check_pair(ha, hb)?;
    let nb = hb.frobenius_sq();
    let na = ha.frobenius();
    if nb == 0.0 || na == 0.0 {
        return Err(invalid("procrustes fit needs nonzero representations"));
    }
    let f = svd(&hb.tr_dot(ha))?;
    let rt = f.u.dot(&f.vt);
    let c0 = f.s.iter().sum::<f64>() / nb;
    let fitted = hb.dot(&rt).scale(c0);
    let residual = (ha - &fitted).frobenius() / na;
    Ok(ProcrustesFit {
        c0,
        rotation: rt.transpose(),
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    GramCosine,
    Cka,
    CenteredCka,
    ProcrustesResidual,
    ProcrustesScale,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::GramCosine => "gram_cosine",
            Metric::Cka => "cka",
            Metric::CenteredCka => "centered_cka",
            Metric::ProcrustesResidual => "procrustes_residual",
            Metric::ProcrustesScale => "procrustes_c0",
        }
    }

    pub fn evaluate(self, ha: &Matrix, hb: &Matrix) -> Result<f64> {
        match self {
            Metric::GramCosine => gram_alignment(ha, hb),
            Metric::Cka => cka(ha, hb, false),
            Metric::CenteredCka => cka(ha, hb, true),
            Metric::ProcrustesResidual => Ok(procrustes_fit(ha, hb)?.residual),
            Metric::ProcrustesScale => Ok(procrustes_fit(ha, hb)?.c0),
        }
    }
}

/// One entry of a pairwise layer grid; layers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub layer_a: usize,
    pub layer_b: usize,
    pub metric: Metric,
    pub value: f64,
}

/// Evaluates every metric on every `(layer of A, layer of B)` pair.
pub fn alignment_grid(reprs_a: &[Matrix], reprs_b: &[Matrix], metrics: &[Metric]) -> Result<Vec<GridEntry>> {
    let jobs: Vec<(usize, usize, Metric)> = (0..reprs_a.len())
        .flat_map(|i| (0..reprs_b.len()).flat_map(move |j| metrics.iter().map(move |&m| (i, j, m))))
        .collect();
    jobs.into_par_iter()
        .map(|(i, j, metric)| {
            Ok(GridEntry {
                layer_a: i + 1,
                layer_b: j + 1,
                metric,
                value: metric.evaluate(&reprs_a[i], &reprs_b[j])?,
            })
        })
        .collect()
}

/// Writes `layer_a,layer_b,metric,value` rows.
pub fn write_grid_csv(path: &Path, grid: &[GridEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer_a", "layer_b", "metric", "value"])?;
    for e in grid {
        w.write_record([
            e.layer_a.to_string(),
            e.layer_b.to_string(),
            e.metric.name().to_string(),
            e.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
