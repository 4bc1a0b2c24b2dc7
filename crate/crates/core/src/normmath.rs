//! Exact LayerNorm statistics and the closed-form backward map in `f64`.
//!
//! Everything here uses population statistics (divisor `N`) and no epsilon;
//! a constant input is rejected instead of regularized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Mean square deviation `Σ(v_i − v̄)² / N`.
pub fn mean_square_spread(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormInstance {
    pub x: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub y: Vec<f64>,
}

impl NormInstance {
    pub fn n(&self) -> usize {
        self.x.len()
    }
}

pub fn ln_stats(x: &[f64]) -> Result<NormInstance> {
    if x.len() < 2 {
        return Err(Error::LengthMismatch {
            expected: 2,
            actual: x.len(),
        });
    }
    let mu = mean(x);
    let sigma = (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.len() as f64).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::ConstantVector);
    }
    let y = x.iter().map(|v| (v - mu) / sigma).collect();
    Ok(NormInstance {
        x: x.to_vec(),
        mu,
        sigma,
        y,
    })
}

/// `a = (1/σ)·W₁·b` with `W₁ = I − (y yᵀ + 1 1ᵀ)/N`.
pub fn ln_backward_closed_form(inst: &NormInstance, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != inst.n() {
        return Err(Error::LengthMismatch {
            expected: inst.n(),
            actual: b.len(),
        });
    }
    let w1b = ProjectionW1::new(inst).apply(b)?;
    Ok(w1b.into_iter().map(|v| v / inst.sigma).collect())
}

/// Matrix-free `W₁ = I − (y yᵀ + 1 1ᵀ)/N`.
#[derive(Clone, Debug)]
pub struct ProjectionW1<'a> {
    y: &'a [f64],
}

impl<'a> ProjectionW1<'a> {
    pub fn new(inst: &'a NormInstance) -> Self {
        ProjectionW1 { y: &inst.y }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n() {
            return Err(Error::LengthMismatch {
                expected: self.n(),
                actual: v.len(),
            });
        }
        let n = self.n() as f64;
        let vy = dot(v, self.y) / n;
        let v1 = v.iter().sum::<f64>() / n;
        Ok(v.iter()
            .zip(self.y)
            .map(|(vi, yi)| vi - yi * vy - v1)
            .collect())
    }

    /// Column `j`, i.e. `W₁ e_j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.n() as f64;
        let yj = self.y[j];
        (0..self.n())
            .map(|i| f64::from(u8::from(i == j)) - (self.y[i] * yj + 1.0) / n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDiagnostics {
    pub n: usize,
    /// `‖W₁² − W₁‖_max`.
    pub idempotency_defect: f64,
    /// `‖W₁ 1‖∞`.
    pub ones_residual: f64,
    /// `‖W₁ y‖∞`.
    pub y_residual: f64,
    /// `max |W₁[i,j] − W₁[j,i]|`.
    pub symmetry_defect: f64,
}

impl ProjectionDiagnostics {
    pub fn max_defect(&self) -> f64 {
        self.idempotency_defect
            .max(self.ones_residual)
            .max(self.y_residual)
            .max(self.symmetry_defect)
    }
}

pub fn check_projection(inst: &NormInstance) -> Result<ProjectionDiagnostics> {
    let w = ProjectionW1::new(inst);
    let n = w.n();
    let mut idem = 0.0f64;
    let mut sym = 0.0f64;
    let cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    for (j, col) in cols.iter().enumerate() {
        let wcol = w.apply(col)?;
        idem = idem.max(
            wcol.iter()
                .zip(col)
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        );
        for (i, &cij) in col.iter().enumerate().skip(j + 1) {
            sym = sym.max((cij - cols[i][j]).abs());
        }
    }
    Ok(ProjectionDiagnostics {
        n,
        idempotency_defect: idem,
        ones_residual: max_abs(&w.apply(&vec![1.0; n])?),
        y_residual: max_abs(&w.apply(&inst.y)?),
        symmetry_defect: sym,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub n: usize,
    pub mean_a: f64,
    pub dot_a_ones: f64,
    pub dot_a_y: f64,
    /// `‖σ a‖²`.
    pub scaled_norm_sq: f64,
    /// `‖b − b̄ 1‖²`.
    pub centered_b_norm_sq: f64,
    /// `D_a = Σ(a_i − ā)²/N`.
    pub d_a: f64,
    /// `Σ(b_i − b̄)²/(σ² N)`.
    pub d_b_scaled: f64,
    pub max_abs_a: f64,
    /// Contraction `‖σ a‖² ≤ ‖b − b̄ 1‖²` up to `f64` round-off.
    pub holds: bool,
}

/// Round-off allowance for the contraction comparison.
const ROUNDOFF: f64 = 64.0 * f64::EPSILON;

pub fn variance_bound_check(inst: &NormInstance, b: &[f64]) -> Result<BoundRecord> {
    let a = ln_backward_closed_form(inst, b)?;
    let n = inst.n();
    let b_bar = mean(b);
    let centered: f64 = b.iter().map(|v| (v - b_bar) * (v - b_bar)).sum();
    let scaled: f64 = a.iter().map(|v| (v * inst.sigma) * (v * inst.sigma)).sum();
    let d_a = mean_square_spread(&a);
    let d_b_scaled = centered / (inst.sigma * inst.sigma * n as f64);
    Ok(BoundRecord {
        n,
        mean_a: mean(&a),
        dot_a_ones: a.iter().sum(),
        dot_a_y: dot(&a, &inst.y),
        scaled_norm_sq: scaled,
        centered_b_norm_sq: centered,
        d_a,
        d_b_scaled,
        max_abs_a: max_abs(&a),
        holds: scaled <= centered * (1.0 + ROUNDOFF) + f64::MIN_POSITIVE
            && d_a <= d_b_scaled * (1.0 + ROUNDOFF) + f64::MIN_POSITIVE,
    })
}

/// How the upstream gradient `b` is drawn in the scaling study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upstream {
    /// `b_i ~ N(0, 1)`, independent of `N`.
    Iid,
    /// `b = g/N` with `g_i ~ N(0, 1)`: the gradient of a loss averaged over
    /// the `N` features.
    MeanReduced,
    /// `b = y`, which `W₁` annihilates.
    YComponent,
}

impl std::str::FromStr for Upstream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Upstream::Iid),
            "mean-reduced" => Ok(Upstream::MeanReduced),
            "y-component" => Ok(Upstream::YComponent),
            other => Err(Error::InvalidConfig(format!(
                "unknown upstream sampler `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    /// Inputs are `x_i ~ N(0, x_scale²)`.
    pub x_scale: f64,
    pub upstream: Upstream,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(upstream: Upstream, seed: u64) -> Self {
        SamplerSpec {
            x_scale: 1.0,
            upstream,
            seed,
        }
    }

    /// One `(x, b)` draw of length `n`.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(NormInstance, Vec<f64>)> {
        loop {
            let x: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    self.x_scale * z
                })
                .collect();
            let inst = match ln_stats(&x) {
                Ok(inst) => inst,
                Err(Error::ConstantVector) => continue,
                Err(e) => return Err(e),
            };
            let b = match self.upstream {
                Upstream::Iid => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
                Upstream::MeanReduced => (0..n)
                    .map(|_| StandardNormal.sample(rng))
                    .map(|g: f64| g / n as f64)
                    .collect(),
                Upstream::YComponent => inst.y.clone(),
            };
            return Ok((inst, b));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    /// Median over trials of `D_a`.
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudy {
    pub sampler: SamplerSpec,
    pub trials: usize,
    pub rows: Vec<VarianceRow>,
    /// Least-squares slope of `ln variance` against `ln N`; `None` if any
    /// variance is zero.
    pub log_log_slope: Option<f64>,
    pub strictly_decreasing: bool,
    pub non_increasing: bool,
}

impl VarianceStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,variance\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e}\n", r.n, r.variance));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Median `D_a` per grid point; each `N` uses its own stream seeded from
/// `(sampler.seed, N)` so single-`N` runs reproduce grid entries.
pub fn variance_scaling_study(
    n_grid: &[usize],
    sampler: SamplerSpec,
    trials: usize,
) -> Result<VarianceStudy> {
    if n_grid.is_empty() || trials == 0 {
        return Err(Error::Empty("variance study grid or trials"));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "N_grid must be strictly ascending".into(),
        ));
    }
    let mut rows = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let mut rng = ChaCha8Rng::seed_from_u64(
            sampler.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let mut vals = Vec::with_capacity(trials);
        for _ in 0..trials {
            let (inst, b) = sampler.draw(n, &mut rng)?;
            vals.push(mean_square_spread(&ln_backward_closed_form(&inst, &b)?));
        }
        rows.push(VarianceRow {
            n,
            variance: median(vals),
        });
    }
    let log_log_slope = rows.iter().all(|r| r.variance > 0.0).then(|| {
        let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
        slope(&xs, &ys)
    });
    let strictly_decreasing = rows.windows(2).all(|w| w[1].variance < w[0].variance);
    let non_increasing = rows.windows(2).all(|w| w[1].variance <= w[0].variance);
    Ok(VarianceStudy {
        sampler,
        trials,
        rows,
        log_log_slope,
        strictly_decreasing,
        non_increasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_instance() {
        let inst = ln_stats(&[1.0, 3.0]).unwrap();
        assert_eq!((inst.mu, inst.sigma), (2.0, 1.0));
        assert_eq!(inst.y, vec![-1.0, 1.0]);
        let a = ln_backward_closed_form(&inst, &[0.3, -1.7]).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn four_point_instance() {
        let inst = ln_stats(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(inst.mu, 1.5);
        assert!((inst.sigma - 1.25f64.sqrt()).abs() < 1e-15);
        let want = [
            -1.3416407864998738,
            -0.4472135954999579,
            0.4472135954999579,
            1.3416407864998738,
        ];
        for (y, w) in inst.y.iter().zip(want) {
            assert!((y - w).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_and_short_inputs_rejected() {
        assert!(matches!(
            ln_stats(&[2.0, 2.0, 2.0]),
            Err(Error::ConstantVector)
        ));
        assert!(ln_stats(&[1.0]).is_err());
        let inst = ln_stats(&[1.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            ln_backward_closed_form(&inst, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn kernel_of_projection() {
        let inst = ln_stats(&[0.3, -1.2, 2.5, 0.9, -0.4]).unwrap();
        let a = ln_backward_closed_form(&inst, &[0.7; 5]).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-15));
        let b: Vec<f64> = inst.y.iter().map(|v| v / inst.sigma).collect();
        let a = ln_backward_closed_form(&inst, &b).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn y_component_study_is_zero() {
        let s =
            variance_scaling_study(&[8, 16], SamplerSpec::new(Upstream::YComponent, 1), 5).unwrap();
        assert!(s.rows.iter().all(|r| r.variance < 1e-28));
        assert!(s.log_log_slope.is_none() || s.rows.iter().all(|r| r.variance > 0.0));
    }
}
