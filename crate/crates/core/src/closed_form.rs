//! High-SNR outage approximation for random passive beamforming.
//!
//! With the slot gains treated as i.i.d. exponentials of mean `λ`, the outage
//! event becomes `V = Π_q |X_q|² < v*`. The CDF of `V` is evaluated in the log
//! domain: `W = Σ_q ln(E_q / λ)` has characteristic function `Γ(1 + iω)^Q`,
//! which is inverted numerically. Gil–Pelaez inversion on the real axis gives
//! the bulk of the distribution to an absolute tolerance. Left-tail values
//! below [`TAIL_SWITCH`] are recomputed on a contour shifted to the Chernoff
//! saddle point, which keeps relative accuracy down to the underflow limit;
//! comparing slot counts at high SNR needs that.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;

use crate::special::{ln_gamma, ln_gamma_real};
use crate::sysmodel::SystemParams;
use crate::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Gil–Pelaez estimates below this are recomputed on the shifted contour.
pub const TAIL_SWITCH: f64 = 1e-3;

/// Correlation above which the independence approximation is flagged.
pub const RHO_FLAG: f64 = 0.05;

/// Law of a product of `order` i.i.d. exponentials with common `mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductExpDist {
    order: u32,
    mean: f64,
}

impl ProductExpDist {
    pub fn new(order: u32, mean: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("product order must be at least 1".into()));
        }
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::Domain(format!("exponential mean must be positive, got {mean}")));
        }
        Ok(ProductExpDist { order, mean })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }
}

/// Quadrature controls for the Gil–Pelaez integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionSettings {
    /// Upper frequency limit of the integral.
    pub truncation: f64,
    /// Trapezoidal nodes on `(0, truncation]`.
    pub nodes: usize,
    /// Absolute tolerance between successive refinements.
    pub tolerance: f64,
}

impl Default for InversionSettings {
    fn default() -> Self {
        InversionSettings {
            truncation: 200.0,
            nodes: 4096,
            tolerance: 1e-7,
        }
    }
}

impl InversionSettings {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Domain("inversion tolerance must be positive".into()));
        }
        if self.nodes < 64 {
            return Err(Error::Domain("inversion needs at least 64 nodes".into()));
        }
        if !(self.truncation > 0.0) || !self.truncation.is_finite() {
            return Err(Error::Domain("truncation frequency must be positive".into()));
        }
        Ok(())
    }
}

/// Correlation between the effective gains of two distinct slots.
pub fn pearson_correlation(sigma_g2: f64, sigma_h2: f64, sigma_f2: f64, n_elements: usize) -> Result<f64> {
    if [sigma_g2, sigma_h2, sigma_f2].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("variances must be finite and >= 0".into()));
    }
    let denom = sigma_g2 + n_elements as f64 * sigma_h2 * sigma_f2;
    if denom == 0.0 {
        return Err(Error::Domain("total slot-gain variance is zero".into()));
    }
    Ok(sigma_g2 / denom)
}

/// Outage threshold on `Π_q |X_q|²`, held in natural-log form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub ln_value: f64,
}

impl Threshold {
    /// Linear value; underflows to 0 or overflows to infinity at extreme
    /// parameters.
    pub fn value(&self) -> f64 {
        self.ln_value.exp()
    }
}

/// `v* = 2^{τ / (1/Q - α/L)} / γ^Q`.
pub fn outage_threshold(tau: f64, q: u32, train_per_channel: u32, frame_len: u32, gamma: f64) -> Result<Threshold> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("rate target must be >= 0, got {tau}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("reference SNR must be positive, got {gamma}")));
    }
    let prelog = crate::random_reflect::random_prelog(q, train_per_channel, frame_len)?;
    Ok(Threshold {
        ln_value: tau * LN_2 / prelog - f64::from(q) * gamma.ln(),
    })
}

/// `P(V <= v)` for `V` a product of i.i.d. exponentials.
pub fn product_exp_cdf(v: f64, dist: ProductExpDist, settings: &InversionSettings) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("CDF argument must be >= 0, got {v}")));
    }
    if v == 0.0 {
        return Ok(0.0);
    }
    product_exp_cdf_ln(v.ln(), dist, settings)
}

/// [`product_exp_cdf`] with the argument given as `ln v`.
pub fn product_exp_cdf_ln(ln_v: f64, dist: ProductExpDist, settings: &InversionSettings) -> Result<f64> {
    if ln_v.is_nan() {
        return Err(Error::Domain("CDF argument is NaN".into()));
    }
    let w = ln_v - f64::from(dist.order) * dist.mean.ln();
    log_sum_cdf(w, dist.order, settings)
}

/// CDF of `W = Σ_{q=1}^{Q} ln E_q` with `E_q` i.i.d. unit exponentials.
pub fn log_sum_cdf(w: f64, q: u32, settings: &InversionSettings) -> Result<f64> {
    settings.validate()?;
    if q == 0 {
        return Err(Error::Domain("product order must be at least 1".into()));
    }
    let qf = f64::from(q);
    if w == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if w == f64::INFINITY {
        return Ok(1.0);
    }
    // W > w forces some ln E_q > w / Q, so P(W > w) <= Q exp(-e^{w/Q}).
    if qf * (-(w / qf).exp()).exp() < 1e-17 {
        return Ok(1.0);
    }
    // far enough left that the real-axis estimate is pure round-off
    if w < -40.0 * qf.sqrt() - qf * EULER_GAMMA {
        return Ok(shifted_contour_cdf(w, q));
    }
    let p = gil_pelaez_refined(w, q, settings)?;
    if p < TAIL_SWITCH {
        return Ok(shifted_contour_cdf(w, q));
    }
    Ok(p.min(1.0))
}

fn gil_pelaez_refined(w: f64, q: u32, settings: &InversionSettings) -> Result<f64> {
    let (fine, coarse) = gil_pelaez(w, q, settings.truncation, settings.nodes);
    if (fine - coarse).abs() <= settings.tolerance {
        return Ok(fine.clamp(0.0, 1.0));
    }
    // one refinement: twice the span at half the step
    let (refined, _) = gil_pelaez(w, q, 2.0 * settings.truncation, 4 * settings.nodes);
    if (refined - fine).abs() <= settings.tolerance {
        return Ok(refined.clamp(0.0, 1.0));
    }
    Err(Error::Numerical(format!(
        "Gil-Pelaez inversion did not converge at w = {w}, Q = {q}: {fine} vs {refined}"
    )))
}

/// Trapezoidal Gil–Pelaez estimate on `nodes` steps and on every second
/// node, returned as `(fine, coarse)`.
fn gil_pelaez(w: f64, q: u32, truncation: f64, nodes: usize) -> (f64, f64) {
    let qf = f64::from(q);
    let h = truncation / nodes as f64;
    let integrand = |omega: f64| -> Option<f64> {
        let s = ln_gamma(Complex64::new(1.0, omega)) * qf - Complex64::new(0.0, omega * w);
        (s.re > -745.0).then(|| s.exp().im / omega)
    };
    // limit at ω → 0 is -(w - E[W])
    let f0 = -(w + qf * EULER_GAMMA);
    let mut all = 0.5 * f0;
    let mut even = 0.5 * f0;
    for k in 1..=nodes {
        let weight = if k == nodes { 0.5 } else { 1.0 };
        let Some(v) = integrand(k as f64 * h) else {
            // |Γ(1+iω)| decreases in ω, so every later node underflows too
            break;
        };
        let v = weight * v;
        all += v;
        if k % 2 == 0 {
            even += v;
        }
    }
    let fine = 0.5 - h * all / PI;
    let coarse = 0.5 - 2.0 * h * even / PI;
    (fine, coarse)
}

/// Left-tail CDF from the Bromwich integral on `Re s = c`, `-1 < c < 0`:
///
/// `F(w) = (1/π) ∫_0^∞ Re[Γ(1+s)^Q e^{-s w} / (-s)] dω`, `s = c + iω`.
///
/// `c` is the Chernoff point minimising `Q ln Γ(1+c) - c w`, kept inside the
/// strip so the trapezoid rule stays exponentially accurate.
fn shifted_contour_cdf(w: f64, q: u32) -> f64 {
    const EDGE: f64 = 0.05;
    const SPAN: f64 = 40.0;
    let qf = f64::from(q);
    let chernoff = |c: f64| qf * ln_gamma_real(1.0 + c) - c * w;
    let c = golden_min(chernoff, -1.0 + EDGE, -EDGE, 1e-6);
    let strip = c.abs().min(1.0 + c);
    let h = (strip / 5.0).min(0.05);
    let nodes = (SPAN / h).ceil() as usize;

    let log_term = |omega: f64| -> Complex64 {
        let s = Complex64::new(c, omega);
        ln_gamma(s + 1.0) * qf - s * w - (-s).ln()
    };
    let base = log_term(0.0).re;
    let mut sum = 0.5;
    for k in 1..=nodes {
        let t = log_term(k as f64 * h) - base;
        if t.re < -60.0 {
            // |Γ(1+s)|^Q decays like e^{-πQ|ω|/2}: the rest is negligible
            break;
        }
        sum += t.exp().re;
    }
    let log_f = base + (h * sum / PI).ln();
    if sum <= 0.0 || !log_f.is_finite() {
        return 0.0;
    }
    log_f.exp().min(1.0)
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    0.5 * (a + b)
}

/// Approximate outage of the typical user for `q` reflecting slots.
pub fn approx_outage(params: &SystemParams, q: u32) -> Result<f64> {
    approx_outage_with(params, q, &InversionSettings::default())
}

pub fn approx_outage_with(params: &SystemParams, q: u32, settings: &InversionSettings) -> Result<f64> {
    if q == 0 || q > params.q_max {
        return Err(Error::Domain(format!("Q = {q} outside 1..={}", params.q_max)));
    }
    let stats = params.derived_stats()?;
    let threshold = outage_threshold(
        params.rate_target,
        q,
        params.train_per_channel,
        params.frame_len,
        stats.gamma,
    )?;
    let dist = ProductExpDist::new(q, stats.typical().lambda)?;
    product_exp_cdf_ln(threshold.ln_value, dist, settings)
}

/// Result of the slot-count search.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalQ {
    pub q_star: u32,
    /// Approximate outage for every feasible `Q`, ascending in `Q`.
    pub outage_by_q: Vec<(u32, f64)>,
    /// Slot correlation of the typical user.
    pub rho: f64,
    /// Set when `rho` exceeds [`RHO_FLAG`]; the approximation is then
    /// questionable but still reported.
    pub correlation_flag: bool,
}

impl OptimalQ {
    pub fn outage_at_q_star(&self) -> f64 {
        self.outage_by_q
            .iter()
            .find(|(q, _)| *q == self.q_star)
            .map(|(_, p)| *p)
            .unwrap_or(f64::NAN)
    }
}

/// Exhaustive search over the feasible slot counts. Ties go to the smaller
/// `Q`.
pub fn optimal_q(params: &SystemParams) -> Result<OptimalQ> {
    let feasible = params.feasible_q();
    if feasible.is_empty() {
        return Err(Error::InfeasiblePrelog(format!(
            "no Q in 1..={} satisfies Q < L/α = {}/{}",
            params.q_max, params.frame_len, params.train_per_channel
        )));
    }
    let settings = InversionSettings::default();
    let outage_by_q = feasible
        .iter()
        .map(|&q| approx_outage_with(params, q, &settings).map(|p| (q, p)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = outage_by_q[0];
    for &(q, p) in &outage_by_q[1..] {
        if p < best.1 {
            best = (q, p);
        }
    }
    let stats = params.derived_stats()?;
    let u = stats.typical();
    let rho = pearson_correlation(u.sigma_g2, u.sigma_h2, stats.sigma_f2, params.n_elements)?;
    Ok(OptimalQ {
        q_star: best.0,
        outage_by_q,
        rho,
        correlation_flag: rho > RHO_FLAG,
    })
}
