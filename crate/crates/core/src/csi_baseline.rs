//! CSI-based benchmark: element grouping, max-min phase optimization, the
//! training-limited rate and a phase-aligned (genie) outage lower bound.

use std::f64::consts::{LN_2, TAU};

use num_complex::Complex64;
use rand::Rng;

use crate::monte_carlo::{trial_rng, Exec, MultiUserOutage};
use crate::random_reflect::{outage_indicator, uniform_phase, wrap_phase};
use crate::sysmodel::{ChannelRealization, RateParams, SystemParams};
use crate::{Error, Result};

/// Direct gains and grouped cascaded coefficients of one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedChannels {
    g: Vec<Complex64>,
    /// `K x N̄` row-major.
    c: Vec<Complex64>,
    group_size: usize,
}

impl GroupedChannels {
    pub fn new(g: Vec<Complex64>, c: Vec<Complex64>, group_size: usize) -> Result<Self> {
        if g.is_empty() || !c.len().is_multiple_of(g.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} grouped coefficients do not split over {} users",
                c.len(),
                g.len()
            )));
        }
        if group_size == 0 {
            return Err(Error::Domain("group size must be at least 1".into()));
        }
        Ok(GroupedChannels { g, c, group_size })
    }

    pub fn n_users(&self) -> usize {
        self.g.len()
    }

    /// Effective element count `N̄`.
    pub fn n_groups(&self) -> usize {
        self.c.len() / self.g.len()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn g(&self) -> &[Complex64] {
        &self.g
    }

    pub fn c_row(&self, k: usize) -> &[Complex64] {
        let n = self.n_groups();
        &self.c[k * n..(k + 1) * n]
    }

    /// `|g_k + Σ_m c_{k,m} e^{jθ_m}|²` for every user.
    pub fn gains(&self, phases: &[f64]) -> Result<Vec<f64>> {
        if phases.len() != self.n_groups() {
            return Err(Error::DimensionMismatch(format!(
                "{} phases for {} groups",
                phases.len(),
                self.n_groups()
            )));
        }
        let rot: Vec<Complex64> = phases.iter().map(|&t| Complex64::cis(t)).collect();
        Ok((0..self.n_users())
            .map(|k| self.sum_with(k, &rot).norm_sqr())
            .collect())
    }

    /// Smallest user gain under `phases`.
    pub fn min_gain(&self, phases: &[f64]) -> Result<f64> {
        Ok(self.gains(phases)?.into_iter().fold(f64::INFINITY, f64::min))
    }

    /// Phase-aligned gain `(|g_k| + Σ_m |c_{k,m}|)²` of every user.
    pub fn aligned_gains(&self) -> Vec<f64> {
        (0..self.n_users())
            .map(|k| (self.g[k].norm() + self.c_row(k).iter().map(|c| c.norm()).sum::<f64>()).powi(2))
            .collect()
    }

    /// Upper bound on the min gain of any phase vector.
    pub fn genie_cap(&self) -> f64 {
        self.aligned_gains().into_iter().fold(f64::INFINITY, f64::min)
    }

    fn sum_with(&self, k: usize, rot: &[Complex64]) -> Complex64 {
        self.g[k] + self.c_row(k).iter().zip(rot).map(|(c, r)| c * r).sum::<Complex64>()
    }

    fn scaled_rotated(&self, s: Complex64) -> GroupedChannels {
        GroupedChannels {
            g: self.g.iter().map(|x| x * s).collect(),
            c: self.c.iter().map(|x| x * s).collect(),
            group_size: self.group_size,
        }
    }
}

/// Sums the cascaded coefficients `h_{k,n} f_n` over contiguous blocks of
/// `m` elements.
pub fn group_channels(real: &ChannelRealization, m: usize) -> Result<GroupedChannels> {
    let n = real.n_elements();
    if m == 0 || !n.is_multiple_of(m) {
        return Err(Error::Domain(format!("group size {m} does not divide N = {n}")));
    }
    let mut c = Vec::with_capacity(real.n_users() * (n / m));
    for k in 0..real.n_users() {
        let casc: Vec<Complex64> = real.cascaded(k).collect();
        c.extend(casc.chunks(m).map(|b| b.iter().sum::<Complex64>()));
    }
    GroupedChannels::new(real.g.clone(), c, m)
}

/// Output of [`optimize_maxmin`].
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformResult {
    /// One phase per group, in `[0, 2π)`.
    pub phases: Vec<f64>,
    pub min_gain: f64,
    /// Cyclic passes summed over restarts.
    pub iterations: usize,
    pub restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxMinSettings {
    pub restarts: usize,
    pub grid_points: usize,
    /// Pass cap per restart.
    pub max_passes: usize,
    /// Relative min-gain improvement below which a restart stops.
    pub tolerance: f64,
}

impl Default for MaxMinSettings {
    fn default() -> Self {
        MaxMinSettings {
            restarts: 20,
            grid_points: 256,
            max_passes: 200,
            tolerance: 1e-6,
        }
    }
}

impl MaxMinSettings {
    pub fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(Error::InvalidParams("restarts must be at least 1".into()));
        }
        if self.grid_points < 16 {
            return Err(Error::InvalidParams(format!(
                "grid_points must be at least 16, got {}",
                self.grid_points
            )));
        }
        if self.max_passes < 1 || !(self.tolerance > 0.0) {
            return Err(Error::InvalidParams("need max_passes >= 1 and tolerance > 0".into()));
        }
        Ok(())
    }
}

const TEMP_START: f64 = 1.0;
const TEMP_FLOOR: f64 = 1e-3;
const TEMP_DECAY: f64 = 0.1;
const REFINE_ITERS: usize = 50;
/// Users whose scaled gap to the minimum exceeds this contribute < e^-40.
const SOFTMIN_CUTOFF: f64 = 40.0;

/// `-T ln Σ_k exp(-g_k / T)`; the plain minimum when `temp == 0`.
fn softmin(gains: &[f64], temp: f64) -> f64 {
    let gmin = gains.iter().copied().fold(f64::INFINITY, f64::min);
    if temp == 0.0 {
        return gmin;
    }
    let s: f64 = gains
        .iter()
        .map(|g| (g - gmin) / temp)
        .filter(|&d| d < SOFTMIN_CUTOFF)
        .map(|d| (-d).exp())
        .sum();
    gmin - temp * s.ln()
}

/// Per-user gain `a_k + 2 Re(z_k e^{jφ})` as a function of one phase.
struct Coordinate<'a> {
    a: &'a [f64],
    z: &'a [Complex64],
    buf: Vec<f64>,
}

impl Coordinate<'_> {
    fn value_cs(&mut self, cos: f64, sin: f64, temp: f64) -> f64 {
        for ((b, a), z) in self.buf.iter_mut().zip(self.a).zip(self.z) {
            *b = a + 2.0 * (z.re * cos - z.im * sin);
        }
        softmin(&self.buf, temp)
    }

    fn value(&mut self, phi: f64, temp: f64) -> f64 {
        self.value_cs(phi.cos(), phi.sin(), temp)
    }

    /// Derivative of the objective in `φ`; at a kink of the plain minimum,
    /// the slope of the minimizing user.
    fn slope(&mut self, phi: f64, temp: f64) -> f64 {
        let (sin, cos) = phi.sin_cos();
        self.value_cs(cos, sin, temp);
        let d = |z: &Complex64| -2.0 * (z.re * sin + z.im * cos);
        let (k_min, gmin) = self
            .buf
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (k, g)| if g < a.1 { (k, g) } else { a });
        if temp == 0.0 {
            return d(&self.z[k_min]);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (g, z) in self.buf.iter().zip(self.z) {
            let x = (g - gmin) / temp;
            if x < SOFTMIN_CUTOFF {
                let w = (-x).exp();
                num += w * d(z);
                den += w;
            }
        }
        num / den
    }
}

fn golden_max(co: &mut Coordinate<'_>, mut lo: f64, mut hi: f64, temp: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = co.value(x1, temp);
    let mut f2 = co.value(x2, temp);
    for _ in 0..REFINE_ITERS {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = co.value(x2, temp);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = co.value(x1, temp);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Best phase for one coordinate: dense grid, then a bracketed search
/// around the best grid point. Never returns a worse value than `current`.
pub(crate) fn coordinate_step(
    a: &[f64],
    z: &[Complex64],
    current: f64,
    temp: f64,
    table: &[(f64, f64)],
) -> (f64, f64) {
    let mut co = Coordinate { a, z, buf: vec![0.0; a.len()] };
    let f_cur = co.value(current, temp);
    let (mut i_best, mut f_best) = (0, f64::NEG_INFINITY);
    for (i, &(c, s)) in table.iter().enumerate() {
        let f = co.value_cs(c, s, temp);
        if f > f_best {
            i_best = i;
            f_best = f;
        }
    }
    let step = TAU / table.len() as f64;
    let centre = i_best as f64 * step;
    let (mut lo, mut hi) = (centre - step, centre + step);
    let (x_gs, f_gs) = if co.slope(lo, temp) > 0.0 && co.slope(hi, temp) < 0.0 {
        // bisection on the slope sign pins the maximizer to rounding level,
        // where comparing nearly equal values near a smooth maximum cannot
        for _ in 0..REFINE_ITERS {
            let mid = 0.5 * (lo + hi);
            if co.slope(mid, temp) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        (x, co.value(x, temp))
    } else {
        golden_max(&mut co, lo, hi, temp)
    };
    let (x, f) = if f_gs >= f_best { (x_gs, f_gs) } else { (centre, f_best) };
    if f > f_cur {
        (wrap_phase(x), f)
    } else {
        (current, f_cur)
    }
}

struct Workspace {
    table: Vec<(f64, f64)>,
    sums: Vec<Complex64>,
    a: Vec<f64>,
    z: Vec<Complex64>,
    gains: Vec<f64>,
}

impl Workspace {
    fn refresh(&mut self, gc: &GroupedChannels, phases: &[f64]) -> f64 {
        let rot: Vec<Complex64> = phases.iter().map(|&t| Complex64::cis(t)).collect();
        for k in 0..gc.n_users() {
            self.sums[k] = gc.sum_with(k, &rot);
            self.gains[k] = self.sums[k].norm_sqr();
        }
        self.gains.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn pass(&mut self, gc: &GroupedChannels, phases: &mut [f64], temp: f64) {
        let nb = gc.n_groups();
        for m in 0..nb {
            let rot = Complex64::cis(phases[m]);
            for k in 0..gc.n_users() {
                let c = gc.c[k * nb + m];
                let rest = self.sums[k] - c * rot;
                self.sums[k] = rest;
                self.a[k] = rest.norm_sqr() + c.norm_sqr();
                self.z[k] = rest.conj() * c;
            }
            let (phi, _) = coordinate_step(&self.a, &self.z, phases[m], temp, &self.table);
            phases[m] = phi;
            let rot = Complex64::cis(phi);
            for k in 0..gc.n_users() {
                self.sums[k] += gc.c[k * nb + m] * rot;
            }
        }
    }
}

/// Phases `arg g_k - arg c_{k,m}`, optimal for user `k` alone.
fn aligned_phases(gc: &GroupedChannels, k: usize) -> Vec<f64> {
    let ag = gc.g[k].arg();
    gc.c_row(k).iter().map(|c| wrap_phase(ag - c.arg())).collect()
}

/// Max-min phase optimization by annealed softmin coordinate ascent with
/// restarts. Restart 0 aligns to the user with the weakest direct link; the
/// others start from uniform phases drawn from `rng`.
pub fn optimize_maxmin<R: Rng + ?Sized>(
    gc: &GroupedChannels,
    settings: &MaxMinSettings,
    rng: &mut R,
) -> Result<BeamformResult> {
    optimize_maxmin_until(gc, settings, rng, |_| false)
}

/// [`optimize_maxmin`] that returns as soon as `done(user_gains)` holds
/// after a pass. Outage estimation stops once every user meets the target,
/// since further gain cannot change the outage indicators.
pub(crate) fn optimize_maxmin_until<R, F>(
    gc: &GroupedChannels,
    settings: &MaxMinSettings,
    rng: &mut R,
    done: F,
) -> Result<BeamformResult>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> bool,
{
    settings.validate()?;
    let nb = gc.n_groups();
    let k_users = gc.n_users();
    let scale = (0..k_users)
        .map(|k| gc.g[k].norm() + gc.c_row(k).iter().map(|c| c.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    if scale == 0.0 || nb == 0 {
        let phases = vec![0.0; nb];
        let min_gain = gc.min_gain(&phases)?;
        return Ok(BeamformResult { phases, min_gain, iterations: 0, restarts: 1 });
    }
    // a common rotation of g and c leaves every gain unchanged; fixing it
    // makes the search path independent of the input's global phase
    let anchor = gc
        .g
        .iter()
        .chain(&gc.c)
        .copied()
        .fold(Complex64::default(), |a, x| if x.norm() > a.norm() { x } else { a });
    let norm = gc.scaled_rotated(Complex64::from_polar(1.0 / scale, -anchor.arg()));
    let g2 = scale * scale;
    let g_count = settings.grid_points;
    let mut ws = Workspace {
        table: (0..g_count)
            .map(|i| {
                let t = TAU * i as f64 / g_count as f64;
                (t.cos(), t.sin())
            })
            .collect(),
        sums: vec![Complex64::default(); k_users],
        a: vec![0.0; k_users],
        z: vec![Complex64::default(); k_users],
        gains: vec![0.0; k_users],
    };
    let unscaled = |gains: &[f64]| gains.iter().map(|g| g * g2).collect::<Vec<_>>();

    let weakest = (0..k_users)
        .min_by(|&a, &b| gc.g[a].norm().total_cmp(&gc.g[b].norm()))
        .unwrap_or(0);
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut iterations = 0;
    let mut used = 0;
    for r in 0..settings.restarts {
        used += 1;
        let mut phases = if r == 0 {
            aligned_phases(&norm, weakest)
        } else {
            (0..nb).map(|_| uniform_phase(rng)).collect()
        };
        let mut current = ws.refresh(&norm, &phases);
        if current > best.1 {
            best = (phases.clone(), current);
        }
        if done(&unscaled(&ws.gains)) {
            break;
        }
        // continuation: solve the smoothed problem at each temperature,
        // then cool; finish on the true minimum
        let mut t_rel = TEMP_START;
        let mut temp = t_rel * current.max(1e-12);
        let mut polishing = false;
        let mut stop = false;
        for _ in 0..settings.max_passes {
            let before = softmin(&ws.gains, temp);
            ws.pass(&norm, &mut phases, temp);
            iterations += 1;
            let next = ws.refresh(&norm, &phases);
            if next > best.1 {
                best = (phases.clone(), next);
            }
            if done(&unscaled(&ws.gains)) {
                stop = true;
                break;
            }
            let after = softmin(&ws.gains, temp);
            // the smoothing bias is O(T); solving a level finer than that is wasted
            let level_stalled = after - before <= 1e-2 * t_rel * before.abs();
            let min_stalled = next - current <= settings.tolerance * current.abs();
            current = next;
            if polishing {
                if min_stalled {
                    break;
                }
            } else if level_stalled {
                if t_rel <= TEMP_FLOOR {
                    polishing = true;
                    temp = 0.0;
                } else {
                    t_rel = (t_rel * TEMP_DECAY).max(TEMP_FLOOR);
                    temp = t_rel * current.max(1e-12);
                }
            }
        }
        if stop {
            break;
        }
    }
    let min_gain = gc.min_gain(&best.0)?;
    Ok(BeamformResult { phases: best.0, min_gain, iterations, restarts: used })
}

/// Data fraction `1 - α(N̄+1)/L` left after estimating `N̄ + 1` coefficients.
pub fn csi_prelog(n_groups: usize, train_per_channel: u32, frame_len: u32) -> Result<f64> {
    let train = f64::from(train_per_channel) * (n_groups as f64 + 1.0);
    if train >= f64::from(frame_len) {
        return Err(Error::InfeasiblePrelog(format!(
            "training {train} symbols for {} coefficients leaves no data in a frame of {frame_len}",
            n_groups + 1
        )));
    }
    Ok(1.0 - train / f64::from(frame_len))
}

fn csi_rate(gain: f64, prelog: f64, gamma: f64) -> f64 {
    prelog * (gamma * gain).ln_1p() / LN_2
}

/// Rate of `user` under the beam in `result`.
pub fn csi_interval_rate(
    gc: &GroupedChannels,
    result: &BeamformResult,
    user: usize,
    params: &RateParams,
) -> Result<f64> {
    if user >= gc.n_users() {
        return Err(Error::DimensionMismatch(format!(
            "user {user} out of {}",
            gc.n_users()
        )));
    }
    let prelog = csi_prelog(gc.n_groups(), params.train_per_channel, params.frame_len)?;
    let gain = gc.gains(&result.phases)?[user];
    Ok(csi_rate(gain, prelog, params.gamma))
}

fn csi_setup(params: &SystemParams, m: usize, trials: u64) -> Result<f64> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    if m == 0 || !params.n_elements.is_multiple_of(m) {
        return Err(Error::Domain(format!(
            "group size {m} does not divide N = {}",
            params.n_elements
        )));
    }
    csi_prelog(params.n_elements / m, params.train_per_channel, params.frame_len)
}

fn merge_counts(chunks: Vec<Vec<u64>>, k_users: usize) -> Vec<u64> {
    let mut total = vec![0u64; k_users];
    for c in chunks {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    total
}

/// Outage of the CSI scheme with groups of `m` elements. Trial `t` draws
/// its channels and then its restart phases from stream `t`.
pub fn estimate_outage_csi(
    params: &SystemParams,
    m: usize,
    trials: u64,
    settings: &MaxMinSettings,
    master_seed: u64,
    exec: &Exec,
) -> Result<MultiUserOutage> {
    let prelog = csi_setup(params, m, trials)?;
    settings.validate()?;
    let model = params.channel_model()?;
    let gamma = params.rate_params().gamma;
    let tau = params.rate_target;
    let k_users = params.n_users;
    let short = |g: f64| outage_indicator(csi_rate(g, prelog, gamma), tau);
    let chunks = exec.map_chunks(trials, |range| {
        let mut counts = vec![0u64; k_users];
        let mut real = model.empty_realization();
        let mut run = || -> Result<()> {
            for t in range.clone() {
                let mut rng = trial_rng(master_seed, t);
                model.sample_into(&mut rng, &mut real);
                let gc = group_channels(&real, m)?;
                let caps = gc.aligned_gains();
                if caps.iter().all(|&c| short(c)) {
                    counts.iter_mut().for_each(|c| *c += 1);
                    continue;
                }
                let res = optimize_maxmin_until(&gc, settings, &mut rng, |g| {
                    g.iter().all(|&x| !short(x))
                })?;
                for (c, g) in counts.iter_mut().zip(gc.gains(&res.phases)?) {
                    if short(g) {
                        *c += 1;
                    }
                }
            }
            Ok(())
        };
        run().map(|_| counts)
    });
    let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MultiUserOutage::from_counts(&merge_counts(chunks, k_users), trials))
}

/// Outage with every user at its own phase-aligned gain. Per user this is
/// a lower bound on the outage of any beamformer, so `worst` lower-bounds
/// the worst-case outage of [`estimate_outage_csi`]. Uses the same channel
/// draws as [`estimate_outage_csi`] for a given seed.
pub fn genie_outage_lower_bound(
    params: &SystemParams,
    m: usize,
    trials: u64,
    master_seed: u64,
    exec: &Exec,
) -> Result<MultiUserOutage> {
    let prelog = csi_setup(params, m, trials)?;
    let model = params.channel_model()?;
    let gamma = params.rate_params().gamma;
    let tau = params.rate_target;
    let k_users = params.n_users;
    let chunks = exec.map_chunks(trials, |range| {
        let mut counts = vec![0u64; k_users];
        let mut real = model.empty_realization();
        for t in range {
            model.sample_into(&mut trial_rng(master_seed, t), &mut real);
            let gc = group_channels(&real, m)?;
            for (c, g) in counts.iter_mut().zip(gc.aligned_gains()) {
                if outage_indicator(csi_rate(g, prelog, gamma), tau) {
                    *c += 1;
                }
            }
        }
        Ok(counts)
    });
    let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MultiUserOutage::from_counts(&merge_counts(chunks, k_users), trials))
}
