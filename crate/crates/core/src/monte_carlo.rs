//! Approximation-free Monte Carlo estimators.
//!
//! Every trial `i` draws from its own ChaCha8 stream selected by
//! `(master_seed, i)`, so a trial's randomness never depends on which worker
//! ran it. Trials are grouped in fixed chunks of [`CHUNK_TRIALS`]; chunk
//! results are merged in chunk order. Together these make every estimate
//! bit-identical for any worker count.

use std::ops::Range;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::random_reflect::{
    outage_indicator, random_prelog, rate_from_gains, uniform_phase, RateModel,
};
use crate::sysmodel::{ChannelModel, ChannelRealization, SystemParams};
use crate::{Error, Result};

/// Trials per work unit.
pub const CHUNK_TRIALS: u64 = 1024;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Random stream of trial `trial` under `master_seed`.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

/// Worker pool size for trial-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exec {
    workers: usize,
}

impl Default for Exec {
    fn default() -> Self {
        Exec::new(
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        )
    }
}

impl Exec {
    pub fn new(workers: usize) -> Self {
        Exec {
            workers: workers.max(1),
        }
    }

    pub fn serial() -> Self {
        Exec::new(1)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `f` over consecutive trial ranges and returns the results in
    /// range order.
    pub fn map_chunks<T, F>(&self, trials: u64, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Range<u64>) -> T + Sync + Send,
    {
        let n_chunks = trials.div_ceil(CHUNK_TRIALS);
        let chunk = |c: u64| {
            let start = c * CHUNK_TRIALS;
            f(start..(start + CHUNK_TRIALS).min(trials))
        };
        if self.workers == 1 {
            return (0..n_chunks).map(chunk).collect();
        }
        match rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
        {
            Ok(pool) => pool.install(|| (0..n_chunks).into_par_iter().map(chunk).collect()),
            Err(_) => (0..n_chunks).map(chunk).collect(),
        }
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Frequency estimate of an outage probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutageEstimate {
    pub probability: f64,
    pub trials: u64,
    pub outages: u64,
    /// 95% normal-approximation half-width, floored at `1.96 / trials` when
    /// the count is 0 or `trials`.
    pub ci_halfwidth: f64,
}

impl OutageEstimate {
    pub fn from_counts(outages: u64, trials: u64) -> Self {
        assert!(trials >= 1 && outages <= trials);
        let n = trials as f64;
        let p = outages as f64 / n;
        let mut ci = Z95 * (p * (1.0 - p) / n).sqrt();
        if outages == 0 || outages == trials {
            ci = ci.max(Z95 / n);
        }
        OutageEstimate {
            probability: p,
            trials,
            outages,
            ci_halfwidth: ci,
        }
    }

    /// Certain outage, used for infeasible configurations.
    pub fn certain(trials: u64) -> Self {
        OutageEstimate {
            probability: 1.0,
            trials,
            outages: trials,
            ci_halfwidth: 0.0,
        }
    }

    pub fn stderr(&self) -> f64 {
        let p = self.probability;
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Per-user estimates and the worst user's.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiUserOutage {
    pub per_user: Vec<OutageEstimate>,
    pub worst: OutageEstimate,
    pub worst_user: usize,
}

impl MultiUserOutage {
    pub fn from_counts(counts: &[u64], trials: u64) -> Self {
        let per_user: Vec<_> = counts
            .iter()
            .map(|&c| OutageEstimate::from_counts(c, trials))
            .collect();
        let mut worst_user = 0;
        for (k, e) in per_user.iter().enumerate() {
            if e.outages > per_user[worst_user].outages {
                worst_user = k;
            }
        }
        MultiUserOutage {
            worst: per_user[worst_user],
            worst_user,
            per_user,
        }
    }

    pub fn certain(n_users: usize, trials: u64) -> Self {
        MultiUserOutage {
            per_user: vec![OutageEstimate::certain(trials); n_users],
            worst: OutageEstimate::certain(trials),
            worst_user: 0,
        }
    }
}

/// Draws one coherence interval (channels, then one pattern per slot) and
/// keeps every user's slot gains `X_{k,q}`.
pub(crate) struct SlotSampler<'a> {
    model: &'a ChannelModel,
    slots: usize,
    real: ChannelRealization,
    cascaded: Vec<Complex64>,
    phasors: Vec<Complex64>,
    /// `K x Q` row-major.
    gains: Vec<Complex64>,
}

impl<'a> SlotSampler<'a> {
    pub(crate) fn new(model: &'a ChannelModel, slots: usize) -> Self {
        let k = model.n_users();
        let n = model.n_elements();
        SlotSampler {
            model,
            slots,
            real: model.empty_realization(),
            cascaded: vec![Complex64::default(); k * n],
            phasors: vec![Complex64::default(); n],
            gains: vec![Complex64::default(); k * slots],
        }
    }

    pub(crate) fn draw(&mut self, rng: &mut ChaCha8Rng) {
        let k_users = self.model.n_users();
        let n = self.model.n_elements();
        self.model.sample_into(rng, &mut self.real);
        for k in 0..k_users {
            for (c, (h, f)) in self.cascaded[k * n..(k + 1) * n]
                .iter_mut()
                .zip(self.real.h_row(k).iter().zip(&self.real.f))
            {
                *c = h * f;
            }
        }
        for q in 0..self.slots {
            for p in &mut self.phasors {
                *p = Complex64::cis(uniform_phase(rng));
            }
            for k in 0..k_users {
                let reflected: Complex64 = self.cascaded[k * n..(k + 1) * n]
                    .iter()
                    .zip(&self.phasors)
                    .map(|(c, p)| c * p)
                    .sum();
                self.gains[k * self.slots + q] = self.real.g[k] + reflected;
            }
        }
    }

    /// Slot gains of user `k` from the last draw.
    pub(crate) fn user_gains(&self, k: usize) -> &[Complex64] {
        &self.gains[k * self.slots..(k + 1) * self.slots]
    }
}

/// One (SNR, target, rate expression) combination evaluated on shared draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub gamma: f64,
    pub tau: f64,
    pub model: RateModel,
}

fn check_trials(trials: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    Ok(())
}

/// Outage of the random scheme at several evaluation points, all on the same
/// channel and pattern draws.
#[allow(clippy::too_many_arguments)]
pub fn outage_random_points(
    model: &ChannelModel,
    q: u32,
    train_per_channel: u32,
    frame_len: u32,
    points: &[EvalPoint],
    trials: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<Vec<MultiUserOutage>> {
    check_trials(trials)?;
    let prelog = random_prelog(q, train_per_channel, frame_len)?;
    let k_users = model.n_users();
    let chunks = exec.map_chunks(trials, |range| {
        let mut sampler = SlotSampler::new(model, q as usize);
        let mut counts = vec![0u64; points.len() * k_users];
        let mut sq = vec![0.0; q as usize];
        for t in range {
            let mut rng = trial_rng(master_seed, t);
            sampler.draw(&mut rng);
            for k in 0..k_users {
                for (s, x) in sq.iter_mut().zip(sampler.user_gains(k)) {
                    *s = x.norm_sqr();
                }
                for (i, pt) in points.iter().enumerate() {
                    let rate = rate_from_gains(sq.iter().copied(), prelog, pt.gamma, pt.model);
                    if outage_indicator(rate, pt.tau) {
                        counts[i * k_users + k] += 1;
                    }
                }
            }
        }
        counts
    });
    let mut total = vec![0u64; points.len() * k_users];
    for c in chunks {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    Ok(total
        .chunks(k_users)
        .map(|c| MultiUserOutage::from_counts(c, trials))
        .collect())
}

/// Exact outage of the random scheme, per user and worst-case.
pub fn estimate_outage_random_users(
    params: &SystemParams,
    q: u32,
    trials: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<MultiUserOutage> {
    let mut out = outage_curve_random(params, q, &[params.tx_power_dbm], trials, master_seed, exec)?;
    Ok(out.remove(0))
}

/// Exact outage of the random scheme. With several users this is the worst
/// user's estimate.
pub fn estimate_outage_random(
    params: &SystemParams,
    q: u32,
    trials: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<OutageEstimate> {
    Ok(estimate_outage_random_users(params, q, trials, master_seed, exec)?.worst)
}

/// [`estimate_outage_random_users`] over several transmit powers. Each entry
/// is bit-identical to a separate call at that power with the same seed.
pub fn outage_curve_random(
    params: &SystemParams,
    q: u32,
    tx_powers_dbm: &[f64],
    trials: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<Vec<MultiUserOutage>> {
    params.validate()?;
    let model = params.channel_model()?;
    let points: Vec<_> = tx_powers_dbm
        .iter()
        .map(|&p| {
            let mut at = params.clone();
            at.tx_power_dbm = p;
            EvalPoint {
                gamma: at.rate_params().gamma,
                tau: params.rate_target,
                model: RateModel::Exact,
            }
        })
        .collect();
    outage_random_points(
        &model,
        q,
        params.train_per_channel,
        params.frame_len,
        &points,
        trials,
        master_seed,
        exec,
    )
}

/// Histogram and moments of the per-interval rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateHistogram {
    /// `bins + 1` strictly increasing edges in bps/Hz.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Standard error of `variance`, from the fourth central moment.
    pub variance_stderr: f64,
}

impl RateHistogram {
    pub fn mean_stderr(&self) -> f64 {
        (self.variance / self.total as f64).sqrt()
    }

    /// Empirical density per bin.
    pub fn density(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, e)| c as f64 / (self.total as f64 * (e[1] - e[0])))
            .collect()
    }
}

/// Rate distribution of the typical user under `q` random slots.
pub fn empirical_rate_pdf(
    params: &SystemParams,
    q: u32,
    trials: u64,
    bins: usize,
    master_seed: u64,
    exec: &Exec,
) -> Result<RateHistogram> {
    if trials < 2 {
        return Err(Error::Domain("rate histogram needs at least 2 trials".into()));
    }
    if bins < 2 {
        return Err(Error::Domain("rate histogram needs at least 2 bins".into()));
    }
    params.validate()?;
    let prelog = random_prelog(q, params.train_per_channel, params.frame_len)?;
    let gamma = params.rate_params().gamma;
    let model = params.channel_model()?;
    let rates: Vec<f64> = exec
        .map_chunks(trials, |range| {
            let mut sampler = SlotSampler::new(&model, q as usize);
            range
                .map(|t| {
                    sampler.draw(&mut trial_rng(master_seed, t));
                    let sq = sampler.user_gains(0).iter().map(|x| x.norm_sqr());
                    rate_from_gains(sq, prelog, gamma, RateModel::Exact)
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    Ok(histogram(&rates, bins))
}

fn histogram(rates: &[f64], bins: usize) -> RateHistogram {
    let n = rates.len() as f64;
    let mut s = CompensatedSum::default();
    rates.iter().for_each(|&r| s.add(r));
    let mean = s.value() / n;
    let (mut m2, mut m4) = (CompensatedSum::default(), CompensatedSum::default());
    for &r in rates {
        let d2 = (r - mean).powi(2);
        m2.add(d2);
        m4.add(d2 * d2);
    }
    let variance = m2.value() / (n - 1.0);
    let mu2 = m2.value() / n;
    let mu4 = m4.value() / n;
    let variance_stderr = ((mu4 - mu2 * mu2).max(0.0) / n).sqrt();

    let (mut lo, mut hi) = rates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + i as f64 * width })
        .collect();
    let mut counts = vec![0u64; bins];
    for &r in rates {
        let b = (((r - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    RateHistogram {
        edges,
        counts,
        total: rates.len() as u64,
        mean,
        variance,
        variance_stderr,
    }
}

/// Sample correlation between two slots' effective gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotCorrelation {
    /// Real part of the complex sample correlation.
    pub rho: f64,
    /// Imaginary part, zero in expectation.
    pub rho_imag: f64,
    /// Standard error of `rho`.
    pub stderr: f64,
    pub pairs: u64,
}

/// Correlation of `X_{q1}` and `X_{q2}` of the typical user across
/// independent coherence intervals.
pub fn sample_slot_correlation(
    params: &SystemParams,
    pairs: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<SlotCorrelation> {
    params.validate()?;
    sample_slot_correlation_with(&params.channel_model()?, pairs, master_seed, exec)
}

/// [`sample_slot_correlation`] for an explicit channel model.
pub fn sample_slot_correlation_with(
    model: &ChannelModel,
    pairs: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<SlotCorrelation> {
    if pairs < 1000 {
        return Err(Error::Domain(format!("need at least 1000 pairs, got {pairs}")));
    }
    let xs: Vec<(Complex64, Complex64)> = exec
        .map_chunks(pairs, |range| {
            let mut sampler = SlotSampler::new(model, 2);
            range
                .map(|t| {
                    sampler.draw(&mut trial_rng(master_seed, t));
                    let g = sampler.user_gains(0);
                    (g[0], g[1])
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    let n = xs.len() as f64;
    let mean = |sel: fn(&(Complex64, Complex64)) -> Complex64| {
        let (mut re, mut im) = (CompensatedSum::default(), CompensatedSum::default());
        for p in &xs {
            let v = sel(p);
            re.add(v.re);
            im.add(v.im);
        }
        Complex64::new(re.value(), im.value()) / n
    };
    let m1 = mean(|p| p.0);
    let m2 = mean(|p| p.1);
    let (mut v1, mut v2) = (CompensatedSum::default(), CompensatedSum::default());
    let (mut cr, mut ci) = (CompensatedSum::default(), CompensatedSum::default());
    for (a, b) in &xs {
        let (a, b) = (a - m1, b - m2);
        v1.add(a.norm_sqr());
        v2.add(b.norm_sqr());
        let z = a * b.conj();
        cr.add(z.re);
        ci.add(z.im);
    }
    let norm = (v1.value() * v2.value()).sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("slot gains have zero sample variance".into()));
    }
    let rho = cr.value() / norm;
    let rho_imag = ci.value() / norm;
    // spread of the normalised per-pair products
    let scale = n / norm;
    let mut dev = CompensatedSum::default();
    for (a, b) in &xs {
        let z = ((a - m1) * (b - m2).conj()).re * scale;
        dev.add((z - rho).powi(2));
    }
    let stderr = (dev.value() / (n - 1.0) / n).sqrt();
    Ok(SlotCorrelation {
        rho,
        rho_imag,
        stderr,
        pairs,
    })
}
