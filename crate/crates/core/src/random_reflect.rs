//! Random reflection patterns, effective slot gains and the per-interval
//! achievable rate.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;

use crate::sysmodel::{ChannelRealization, RateParams};
use crate::{Error, Result};

/// One slot's IRS phase shifts, each in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectPattern {
    phases: Vec<f64>,
}

impl ReflectPattern {
    pub fn from_phases(phases: Vec<f64>) -> Result<Self> {
        if let Some(p) = phases.iter().find(|p| !(**p >= 0.0 && **p < TAU)) {
            return Err(Error::Domain(format!("phase {p} outside [0, 2π)")));
        }
        Ok(ReflectPattern { phases })
    }

    /// I.i.d. uniform phases.
    pub fn random<R: Rng + ?Sized>(n_elements: usize, rng: &mut R) -> Self {
        let mut p = ReflectPattern {
            phases: Vec::with_capacity(n_elements),
        };
        p.redraw(n_elements, rng);
        p
    }

    /// Redraws in place, reusing the allocation.
    pub fn redraw<R: Rng + ?Sized>(&mut self, n_elements: usize, rng: &mut R) {
        self.phases.clear();
        self.phases
            .extend((0..n_elements).map(|_| uniform_phase(rng)));
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Uniform draw on `[0, 2π)`.
#[inline]
pub(crate) fn uniform_phase<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let p = rng.random::<f64>() * TAU;
    // rounding in the product can land exactly on 2π
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Effective gain `g_k + Σ_n h_{k,n} e^{jθ_n} f_n` of user `k`.
pub fn effective_gain(
    realization: &ChannelRealization,
    pattern: &ReflectPattern,
    user: usize,
) -> Result<Complex64> {
    if pattern.len() != realization.n_elements() {
        return Err(Error::DimensionMismatch(format!(
            "pattern has {} phases, channel has {} elements",
            pattern.len(),
            realization.n_elements()
        )));
    }
    if user >= realization.n_users() {
        return Err(Error::DimensionMismatch(format!(
            "user {user} out of range for {} users",
            realization.n_users()
        )));
    }
    let reflected: Complex64 = realization
        .h_row(user)
        .iter()
        .zip(&realization.f)
        .zip(pattern.phases())
        .map(|((h, f), &theta)| h * Complex64::cis(theta) * f)
        .sum();
    Ok(realization.g[user] + reflected)
}

/// Which rate expression to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateModel {
    /// `log2(1 + γ|X|²)`.
    Exact,
    /// High-SNR surrogate `log2(γ|X|²)` that drops the unit term.
    HighSnr,
}

/// Data-time fraction `1/Q - α/L` of the random scheme.
pub fn random_prelog(q: u32, train_per_channel: u32, frame_len: u32) -> Result<f64> {
    if q == 0 {
        return Err(Error::Domain("slot count must be at least 1".into()));
    }
    if u64::from(q) * u64::from(train_per_channel) >= u64::from(frame_len) {
        return Err(Error::InfeasiblePrelog(format!(
            "Q = {q} with α = {train_per_channel}, L = {frame_len} leaves no data time"
        )));
    }
    Ok(1.0 / f64::from(q) - f64::from(train_per_channel) / f64::from(frame_len))
}

/// Rate from the slot gains `|X_q|²` and a precomputed prelog.
pub fn rate_from_gains<I>(slot_gains: I, prelog: f64, gamma: f64, model: RateModel) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let sum: f64 = match model {
        RateModel::Exact => slot_gains.into_iter().map(|x| (gamma * x).ln_1p()).sum(),
        RateModel::HighSnr => slot_gains.into_iter().map(|x| (gamma * x).ln()).sum(),
    };
    prelog * sum / std::f64::consts::LN_2
}

/// Achievable rate of one coherence interval for user `user` with one
/// pattern per reflecting slot.
pub fn interval_rate(
    realization: &ChannelRealization,
    patterns: &[ReflectPattern],
    user: usize,
    params: &RateParams,
) -> Result<f64> {
    let q = u32::try_from(patterns.len())
        .map_err(|_| Error::Domain("too many slots".into()))?;
    let prelog = random_prelog(q, params.train_per_channel, params.frame_len)?;
    let gains = patterns
        .iter()
        .map(|p| effective_gain(realization, p, user).map(|x| x.norm_sqr()))
        .collect::<Result<Vec<_>>>()?;
    Ok(rate_from_gains(gains, prelog, params.gamma, RateModel::Exact))
}

/// Outage event: the rate falls strictly short of the target.
#[inline]
pub fn outage_indicator(rate: f64, tau: f64) -> bool {
    rate < tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{ChannelModel, FPhasePolicy, SystemParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn realization(k: usize, n: usize, seed: u64) -> ChannelRealization {
        let m = ChannelModel::new(vec![1.0; k], vec![0.5; k], 0.7, n, FPhasePolicy::Random).unwrap();
        m.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn empty_pattern() {
        let p = ReflectPattern::random(0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.is_empty());
        let r = realization(2, 0, 1);
        assert_eq!(effective_gain(&r, &p, 1).unwrap(), r.g[1]);
    }

    #[test]
    fn pattern_deterministic_and_in_range() {
        let a = ReflectPattern::random(1000, &mut ChaCha8Rng::seed_from_u64(4));
        let b = ReflectPattern::random(1000, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.phases().iter().all(|p| *p >= 0.0 && *p < TAU));
        assert!(ReflectPattern::from_phases(vec![TAU]).is_err());
        assert!(ReflectPattern::from_phases(vec![-0.1]).is_err());
    }

    #[test]
    fn phasor_mean_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let mut s = Complex64::default();
        for _ in 0..n {
            s += Complex64::cis(uniform_phase(&mut rng));
        }
        let mean = s / n as f64;
        // each component has variance 1/2
        let se = (0.5 / n as f64).sqrt();
        assert!(mean.re.abs() < 3.0 * se && mean.im.abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn identity_reflection_and_zero_irs() {
        let r = realization(2, 16, 3);
        let zero = ReflectPattern::from_phases(vec![0.0; 16]).unwrap();
        let expect: Complex64 = r.g[1] + r.cascaded(1).sum::<Complex64>();
        assert!((effective_gain(&r, &zero, 1).unwrap() - expect).norm() < 1e-12);

        let mut r0 = r.clone();
        r0.h.iter_mut().for_each(|h| *h = Complex64::default());
        let p = ReflectPattern::random(16, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(effective_gain(&r0, &p, 0).unwrap(), r0.g[0]);
    }

    #[test]
    fn dimension_mismatch() {
        let r = realization(1, 4, 3);
        let p = ReflectPattern::from_phases(vec![0.0; 5]).unwrap();
        assert!(matches!(effective_gain(&r, &p, 0), Err(Error::DimensionMismatch(_))));
        let p = ReflectPattern::from_phases(vec![0.0; 4]).unwrap();
        assert!(matches!(effective_gain(&r, &p, 1), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate_from_gains([0.0, 0.0], 0.3, 1e9, RateModel::Exact), 0.0);
        let gamma = 1e10;
        let r = rate_from_gains([1.0 / gamma], random_prelog(1, 0, 10).unwrap(), gamma, RateModel::Exact);
        assert!((r - 1.0).abs() < 1e-12);
        let pre = random_prelog(2, 20, 1000).unwrap();
        let r = rate_from_gains([3.0, 3.0], pre, 1.0, RateModel::Exact);
        assert!((r - 1.92).abs() < 1e-12);
    }

    #[test]
    fn interval_rate_matches_manual() {
        let r = realization(1, 8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pats: Vec<_> = (0..2).map(|_| ReflectPattern::random(8, &mut rng)).collect();
        let rp = RateParams {
            gamma: 3.0,
            train_per_channel: 20,
            frame_len: 1000,
        };
        let manual: f64 = pats
            .iter()
            .map(|p| (1.0 + 3.0 * effective_gain(&r, p, 0).unwrap().norm_sqr()).log2())
            .sum::<f64>()
            * 0.48;
        assert!((interval_rate(&r, &pats, 0, &rp).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn infeasible_prelog() {
        assert!(matches!(random_prelog(50, 20, 1000), Err(Error::InfeasiblePrelog(_))));
        assert!(random_prelog(49, 20, 1000).unwrap() > 0.0);
    }

    #[test]
    fn outage_is_strict() {
        assert!(!outage_indicator(5.0, 5.0));
        assert!(!outage_indicator(0.0, 0.0));
        assert!(outage_indicator(4.99, 5.0));
    }

    #[test]
    fn second_moment_matches_lambda() {
        let params = SystemParams::default();
        let lambda = params.derived_stats().unwrap().typical().lambda;
        let model = params.channel_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut real = model.empty_realization();
        let mut pat = ReflectPattern::random(0, &mut rng);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                model.sample_into(&mut rng, &mut real);
                pat.redraw(params.n_elements, &mut rng);
                effective_gain(&real, &pat, 0).unwrap().norm_sqr()
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - lambda).abs() < 3.0 * se, "mean {mean} lambda {lambda} se {se}");
    }

    #[test]
    fn f_phase_distribution_invariance() {
        // Under uniform patterns the gain law does not depend on the BS-IRS
        // phases; compare ULA and random-phase samples by a KS statistic.
        let n = 20_000;
        let draw = |policy: FPhasePolicy, seed: u64| {
            let m = ChannelModel::new(vec![0.1], vec![1.0], 1.0, 6, policy).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut xs: Vec<f64> = (0..n)
                .map(|_| {
                    let r = m.sample(&mut rng);
                    let p = ReflectPattern::random(6, &mut rng);
                    effective_gain(&r, &p, 0).unwrap().norm_sqr()
                })
                .collect();
            xs.sort_by(f64::total_cmp);
            xs
        };
        let a = draw(FPhasePolicy::Ula { angle_rad: 0.7 }, 1);
        let b = draw(FPhasePolicy::Random, 2);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
        while i < n && j < n {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 - j as f64).abs() / n as f64);
        }
        // 0.1% two-sample KS critical value
        let crit = 1.95 * (2.0 / n as f64).sqrt();
        assert!(d < crit, "KS {d} >= {crit}");
    }

    proptest! {
        #[test]
        fn f_phase_rotation_is_absorbed(seed in any::<u64>(), shifts in prop::collection::vec(0.0..TAU, 5)) {
            let r = realization(1, 5, seed);
            let p = ReflectPattern::random(5, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let mut r2 = r.clone();
            for (f, s) in r2.f.iter_mut().zip(&shifts) {
                *f *= Complex64::cis(*s);
            }
            let p2 = ReflectPattern::from_phases(
                p.phases().iter().zip(&shifts).map(|(t, s)| wrap_phase(t - s)).collect(),
            ).unwrap();
            let a = effective_gain(&r, &p, 0).unwrap();
            let b = effective_gain(&r2, &p2, 0).unwrap();
            prop_assert!((a - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }

        #[test]
        fn rate_monotone(x in 0.0..10.0f64, dx in 0.0..5.0f64, g in 0.1..100.0f64, dg in 0.0..50.0f64) {
            let pre = 0.3;
            let base = rate_from_gains([x, 1.0], pre, g, RateModel::Exact);
            prop_assert!(rate_from_gains([x + dx, 1.0], pre, g, RateModel::Exact) >= base);
            prop_assert!(rate_from_gains([x, 1.0], pre, g + dg, RateModel::Exact) >= base);
        }
    }
}
