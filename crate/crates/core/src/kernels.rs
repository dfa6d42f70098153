//! Inverse multi-quadric kernel and the squared-MMD estimators built on it.
//!
//! The feature map of the IMQ kernel is infinite-dimensional, so every
//! squared RKHS norm is expanded into kernel evaluations:
//!
//! ```text
//! ‖mean Φ(A) − mean Φ(B)‖² = ΣΣk(aᵢ,aⱼ)/m² − 2ΣΣk(aᵢ,bⱼ)/(mn) + ΣΣk(bᵢ,bⱼ)/n²
//! ```
//!
//! The V-statistic above is a squared norm and therefore never negative in
//! exact arithmetic. Cancellation can push it slightly below zero; values in
//! `[MMD2_FLOOR, 0)` are clamped to zero and anything below the floor is
//! reported as a numerical error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor};

/// Most negative squared-MMD estimate that is still treated as rounding noise.
pub const MMD2_FLOOR: f64 = -1e-9;

/// Row cap for [`median_heuristic`].
pub const MEDIAN_HEURISTIC_MAX_ROWS: usize = 512;

/// IMQ kernel `k(x, y) = (ρ + ‖x − y‖²)^(−1/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    rho: f64,
}

impl Kernel {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!(
                "IMQ offset rho must be positive and finite, got {rho}"
            )));
        }
        Ok(Self { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `k(x, x)`, the largest value the kernel takes.
    pub fn diagonal(&self) -> f64 {
        self.rho.powf(-0.5)
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        imq_sq(sq_dist(x, y), self.rho)
    }
}

#[inline]
fn imq_sq(sq: f64, rho: f64) -> f64 {
    1.0 / (rho + sq).sqrt()
}

/// `(ρ + ‖x − y‖²)^(−1/2)` with argument checking.
pub fn imq(x: &[f64], y: &[f64], rho: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::arg(format!(
            "imq inputs have dimensions {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(Kernel::new(rho)?.eval(x, y))
}

/// Squared distance between the empirical kernel mean of `samples` and the
/// embedding of a single point.
pub fn mmd2_mean_vs_point(samples: &Tensor, target: &[f64], kernel: &Kernel) -> Result<f64> {
    if samples.rows() == 0 {
        return Err(Error::arg("mmd2_mean_vs_point needs at least one sample"));
    }
    if samples.cols() != target.len() {
        return Err(Error::arg(format!(
            "sample width {} does not match target width {}",
            samples.cols(),
            target.len()
        )));
    }
    let raw = mmd2_blocks(
        samples.data(),
        samples.rows(),
        target,
        1,
        target.len(),
        kernel.rho,
    );
    clamp_mmd2(raw, "mmd2_mean_vs_point")
}

/// Squared distance between the empirical kernel means of two sample sets.
///
/// Symmetric bit-for-bit: `mmd2_mean_vs_mean(a, b) == mmd2_mean_vs_mean(b, a)`.
pub fn mmd2_mean_vs_mean(a: &Tensor, b: &Tensor, kernel: &Kernel) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::arg("mmd2_mean_vs_mean needs non-empty sample sets"));
    }
    if a.cols() != b.cols() {
        return Err(Error::arg(format!(
            "sample widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let raw = mmd2_blocks(a.data(), a.rows(), b.data(), b.rows(), a.cols(), kernel.rho);
    clamp_mmd2(raw, "mmd2_mean_vs_mean")
}

/// Median of pairwise squared distances, a scale for `ρ`.
///
/// At most [`MEDIAN_HEURISTIC_MAX_ROWS`] evenly strided rows are used. Returns
/// `1.0` when every row is identical. If more than half of the pairs coincide
/// the median of the non-zero distances is returned instead, so the result is
/// always strictly positive.
pub fn median_heuristic(samples: &Tensor) -> Result<f64> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::arg("median_heuristic needs at least two rows"));
    }
    let m = n.min(MEDIAN_HEURISTIC_MAX_ROWS);
    let rows: Vec<&[f64]> = (0..m).map(|i| samples.row(i * n / m)).collect();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            dists.push(sq_dist(rows[i], rows[j]));
        }
    }
    let med = median(&mut dists);
    if med > 0.0 {
        return Ok(med);
    }
    let mut positive: Vec<f64> = dists.into_iter().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        Ok(1.0)
    } else {
        Ok(median(&mut positive))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub(crate) fn clamp_mmd2(raw: f64, op: &str) -> Result<f64> {
    if !raw.is_finite() {
        return Err(Error::numerical(op, format!("non-finite estimate {raw}")));
    }
    if raw < MMD2_FLOOR {
        return Err(Error::numerical(
            op,
            format!("estimate {raw:e} is below the cancellation floor {MMD2_FLOOR:e}"),
        ));
    }
    Ok(raw.max(0.0))
}

/// `Σᵢ Σⱼ k(xᵢ, xⱼ)` over one row-major block of `n` rows of width `d`.
pub(crate) fn self_sum(x: &[f64], n: usize, d: usize, rho: f64) -> f64 {
    let mut off = 0.0;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in i + 1..n {
            off += imq_sq(sq_dist(xi, &x[j * d..(j + 1) * d]), rho);
        }
    }
    n as f64 * imq_sq(0.0, rho) + 2.0 * off
}

/// `Σᵢ Σⱼ k(aᵢ, bⱼ)`. The loop order is fixed by a canonical ordering of the
/// two blocks so the sum does not depend on argument order.
pub(crate) fn cross_sum(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize, rho: f64) -> f64 {
    if na == nb && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        // identical blocks: reuse the within-set sum so the estimate is exactly 0
        return self_sum(a, na, d, rho);
    }
    let (outer, no, inner, ni) = if block_le(a, na, b, nb) {
        (a, na, b, nb)
    } else {
        (b, nb, a, na)
    };
    let mut total = 0.0;
    for i in 0..no {
        let oi = &outer[i * d..(i + 1) * d];
        for j in 0..ni {
            total += imq_sq(sq_dist(oi, &inner[j * d..(j + 1) * d]), rho);
        }
    }
    total
}

fn block_le(a: &[f64], na: usize, b: &[f64], nb: usize) -> bool {
    if na != nb {
        return na < nb;
    }
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// Unclamped squared MMD between two row-major blocks.
pub(crate) fn mmd2_blocks(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize, rho: f64) -> f64 {
    let (fa, fb) = (na as f64, nb as f64);
    let within = self_sum(a, na, d, rho) / (fa * fa) + self_sum(b, nb, d, rho) / (fb * fb);
    within - 2.0 * cross_sum(a, na, b, nb, d, rho) / (fa * fb)
}

/// Accumulates `scale · ∂mmd2/∂a` into `ga` and `scale · ∂mmd2/∂b` into `gb`.
/// Either output may be `None` when that side needs no gradient.
///
/// Uses `∂k(x,y)/∂x = −k(x,y)³ (x − y)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mmd2_blocks_grad(
    a: &[f64],
    na: usize,
    b: &[f64],
    nb: usize,
    d: usize,
    rho: f64,
    scale: f64,
    mut ga: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let (fa, fb) = (na as f64, nb as f64);
    // within-set terms: d/dxᵢ ΣΣk = 2 Σⱼ −k³(xᵢ − xⱼ)
    if let Some(ga) = ga.as_deref_mut() {
        self_grad(a, na, d, rho, -2.0 * scale / (fa * fa), ga);
    }
    if let Some(gb) = gb.as_deref_mut() {
        self_grad(b, nb, d, rho, -2.0 * scale / (fb * fb), gb);
    }
    // cross term
    let c = 2.0 * scale / (fa * fb);
    for i in 0..na {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..nb {
            let bj = &b[j * d..(j + 1) * d];
            let k = imq_sq(sq_dist(ai, bj), rho);
            let w = c * k * k * k;
            if let Some(ga) = ga.as_deref_mut() {
                for t in 0..d {
                    ga[i * d + t] += w * (ai[t] - bj[t]);
                }
            }
            if let Some(gb) = gb.as_deref_mut() {
                for t in 0..d {
                    gb[j * d + t] += w * (bj[t] - ai[t]);
                }
            }
        }
    }
}

/// Adds `coef · Σⱼ k(xᵢ,xⱼ)³ (xᵢ − xⱼ)` to each row `i` of `g`.
fn self_grad(x: &[f64], n: usize, d: usize, rho: f64, coef: f64, g: &mut [f64]) {
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in i + 1..n {
            let xj = &x[j * d..(j + 1) * d];
            let k = imq_sq(sq_dist(xi, xj), rho);
            let w = coef * k * k * k;
            for t in 0..d {
                let diff = w * (xi[t] - xj[t]);
                g[i * d + t] += diff;
                g[j * d + t] -= diff;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn naive_mmd2(a: &Tensor, b: &Tensor, rho: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            (rho + s).powf(-0.5)
        };
        let (m, n) = (a.rows() as f64, b.rows() as f64);
        let mut aa = 0.0;
        let mut ab = 0.0;
        let mut bb = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.rows() {
                aa += k(a.row(i), a.row(j));
            }
            for j in 0..b.rows() {
                ab += k(a.row(i), b.row(j));
            }
        }
        for i in 0..b.rows() {
            for j in 0..b.rows() {
                bb += k(b.row(i), b.row(j));
            }
        }
        aa / (m * m) - 2.0 * ab / (m * n) + bb / (n * n)
    }

    #[test]
    fn imq_examples() {
        assert_eq!(imq(&[0.3, -1.0], &[0.3, -1.0], 1.0).unwrap(), 1.0);
        let v = imq(&[0.0, 0.0], &[1.0, 2f64.sqrt()], 1.0).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let v = imq(&[0.0], &[2.0], 0.25).unwrap();
        assert!((v - 4.25f64.powf(-0.5)).abs() < 1e-15);
        assert!((v - 0.48507).abs() < 1e-5);
    }

    #[test]
    fn imq_rejects_bad_arguments() {
        assert!(matches!(imq(&[0.0], &[0.0, 1.0], 1.0), Err(Error::Argument(_))));
        assert!(matches!(imq(&[0.0], &[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(imq(&[0.0], &[1.0], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_vs_point_examples() {
        let k = Kernel::new(1.0).unwrap();
        let x = [0.4, -0.2];
        let one = Tensor::from_rows(&[x]).unwrap();
        assert_eq!(mmd2_mean_vs_point(&one, &x, &k).unwrap(), 0.0);
        let two = Tensor::from_rows(&[x, x]).unwrap();
        assert_eq!(mmd2_mean_vs_point(&two, &x, &k).unwrap(), 0.0);
        let empty = Tensor::zeros(0, 2);
        assert!(mmd2_mean_vs_point(&empty, &x, &k).is_err());
    }

    #[test]
    fn mean_vs_point_matches_gram_expansion() {
        let mut rng = RngStream::named(3, "kernels/point");
        let k = Kernel::new(0.7).unwrap();
        let s = rng.gaussian(3, 2);
        let t = rng.gaussian(1, 2);
        let got = mmd2_mean_vs_point(&s, t.row(0), &k).unwrap();
        // explicit 3×3 Gram matrix plus the target column
        let mut gram = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] = (0.7 + sq_dist(s.row(i), s.row(j))).powf(-0.5);
            }
        }
        let ss: f64 = gram.iter().flatten().sum::<f64>() / 9.0;
        let st: f64 = (0..3)
            .map(|i| (0.7 + sq_dist(s.row(i), t.row(0))).powf(-0.5))
            .sum::<f64>()
            / 3.0;
        let want = ss - 2.0 * st + 0.7f64.powf(-0.5);
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn mean_vs_mean_examples() {
        let k = Kernel::new(1.0).unwrap();
        let a = Tensor::from_rows(&[[0.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0]]).unwrap();
        let v = mmd2_mean_vs_mean(&a, &b, &k).unwrap();
        assert!((v - (2.0 - 2.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!((v - 0.58579).abs() < 1e-5);

        let mut rng = RngStream::named(4, "kernels/mean");
        let a = rng.gaussian(4, 3);
        let b = rng.gaussian(4, 3);
        assert_eq!(mmd2_mean_vs_mean(&a, &a, &k).unwrap(), 0.0);
        let got = mmd2_mean_vs_mean(&a, &b, &k).unwrap();
        assert!((got - naive_mmd2(&a, &b, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn median_heuristic_examples() {
        let two = Tensor::from_rows(&[[0.0], [2.0]]).unwrap();
        assert_eq!(median_heuristic(&two).unwrap(), 4.0);
        let same = Tensor::from_rows(&[[1.5, 2.0], [1.5, 2.0], [1.5, 2.0]]).unwrap();
        assert_eq!(median_heuristic(&same).unwrap(), 1.0);
        assert!(median_heuristic(&Tensor::from_rows(&[[1.0]]).unwrap()).is_err());

        let five = RngStream::named(9, "kernels/median").gaussian(5, 3);
        let mut pairs = Vec::new();
        for i in 0..5 {
            for j in 0..i {
                let d: f64 = (0..3).map(|t| (five.get(i, t) - five.get(j, t)).powi(2)).sum();
                pairs.push(d);
            }
        }
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = 0.5 * (pairs[4] + pairs[5]);
        assert!((median_heuristic(&five).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn clamp_floor() {
        assert_eq!(clamp_mmd2(-5e-10, "t").unwrap(), 0.0);
        assert!(clamp_mmd2(-2e-9, "t").is_err());
        assert!(clamp_mmd2(f64::NAN, "t").is_err());
    }
}
