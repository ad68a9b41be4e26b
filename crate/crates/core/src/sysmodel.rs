//! System constants, geometry-derived path losses and channel sampling.
//!
//! All internal quantities are linear-scale; [`db_to_linear`] and
//! [`dbm_to_watts`] are the only places where logarithmic units are converted.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reference distance for the path-loss law, in metres.
pub const REF_DISTANCE_M: f64 = 1.0;

/// Converts a power ratio in dB to linear scale.
#[inline]
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Converts a power in dBm to watts.
#[inline]
pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Distance-dependent path loss `σ0² (d / d0)^(-exponent)` in linear scale.
pub fn path_loss(distance_m: f64, exponent: f64, ref_loss_db: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(Error::Domain(format!(
            "path loss distance must be positive, got {distance_m}"
        )));
    }
    Ok(db_to_linear(ref_loss_db) * (distance_m / REF_DISTANCE_M).powf(-exponent))
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// How users are positioned relative to the IRS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Every user sits directly below the IRS at `user_height_m`.
    BelowIrs { user_height_m: f64 },
    /// Users are spread uniformly at random on a horizontal circle centred
    /// on the IRS. Angles are drawn once from `seed`.
    Circle {
        radius_m: f64,
        user_height_m: f64,
        seed: u64,
    },
}

/// Node coordinates in metres and the user placement rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub bs_m: [f64; 3],
    pub irs_m: [f64; 3],
    pub placement: Placement,
}

impl Geometry {
    /// Positions of `n_users` users.
    pub fn user_positions(&self, n_users: usize) -> Vec<[f64; 3]> {
        match self.placement {
            Placement::BelowIrs { user_height_m } => {
                vec![[self.irs_m[0], self.irs_m[1], user_height_m]; n_users]
            }
            Placement::Circle {
                radius_m,
                user_height_m,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n_users)
                    .map(|_| {
                        let phi = rng.random::<f64>() * 2.0 * PI;
                        [
                            self.irs_m[0] + radius_m * phi.cos(),
                            self.irs_m[1] + radius_m * phi.sin(),
                            user_height_m,
                        ]
                    })
                    .collect()
            }
        }
    }
}

/// Log-distance path-loss constants for the three links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossModel {
    /// Loss at the 1 m reference distance, in dB.
    pub ref_loss_db: f64,
    /// Exponent of the direct BS-user link.
    pub exponent_direct: f64,
    /// Exponent of the BS-IRS link.
    pub exponent_bs_irs: f64,
    /// Exponent of the IRS-user link.
    pub exponent_irs_user: f64,
}

/// Phase profile of the line-of-sight BS-IRS channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum FPhasePolicy {
    /// Uniform linear array steering phases `n π sin(angle)`.
    Ula { angle_rad: f64 },
    /// Fresh uniform phases in every coherence interval.
    Random,
}

impl Default for FPhasePolicy {
    fn default() -> Self {
        FPhasePolicy::Ula { angle_rad: 0.0 }
    }
}

/// All scalar system constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub n_elements: usize,
    pub n_users: usize,
    /// Symbols per coherence interval.
    pub frame_len: u32,
    /// Training symbols per estimated channel coefficient.
    pub train_per_channel: u32,
    /// Rate target in bps/Hz.
    pub rate_target: f64,
    pub q_max: u32,
    pub geometry: Geometry,
    pub pathloss: PathLossModel,
    #[serde(default)]
    pub bs_irs_phase: FPhasePolicy,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            tx_power_dbm: 20.0,
            noise_power_dbm: -90.0,
            n_elements: 300,
            n_users: 1,
            frame_len: 1000,
            train_per_channel: 20,
            rate_target: 6.0,
            q_max: 8,
            geometry: Geometry {
                bs_m: [0.0, 0.0, 2.0],
                irs_m: [100.0, 0.0, 2.0],
                placement: Placement::BelowIrs { user_height_m: 1.0 },
            },
            pathloss: PathLossModel {
                ref_loss_db: -30.0,
                exponent_direct: 3.5,
                exponent_bs_irs: 2.0,
                exponent_irs_user: 2.5,
            },
            bs_irs_phase: FPhasePolicy::default(),
        }
    }
}

/// Per-user second-order statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserStats {
    pub d_g: f64,
    pub d_h: f64,
    pub sigma_g2: f64,
    pub sigma_h2: f64,
    /// Variance of one slot's effective gain, `σg² + N σh² σf²`.
    pub lambda: f64,
}

/// Quantities derived from [`SystemParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedStats {
    pub d_f: f64,
    pub sigma_f2: f64,
    /// Reference SNR `P / σz²` in linear scale.
    pub gamma: f64,
    pub users: Vec<UserStats>,
}

impl DerivedStats {
    /// Statistics of the typical (first) user.
    pub fn typical(&self) -> &UserStats {
        &self.users[0]
    }
}

/// Everything the rate expressions need besides the channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParams {
    pub gamma: f64,
    pub train_per_channel: u32,
    pub frame_len: u32,
}

impl SystemParams {
    /// Checks the parameter invariants.
    ///
    /// `frame_len > train_per_channel * q_max` is not enforced here: slot
    /// counts that leave no data time are simply dropped from
    /// [`SystemParams::feasible_q`]. Only an empty feasible set is an error.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidParams(format!("{field}: {why}")));
        if !self.tx_power_dbm.is_finite() {
            return bad("tx_power_dbm", "must be finite".into());
        }
        if !self.noise_power_dbm.is_finite() {
            return bad("noise_power_dbm", "must be finite".into());
        }
        if self.n_users == 0 {
            return bad("n_users", "must be at least 1".into());
        }
        if self.frame_len == 0 {
            return bad("frame_len", "must be at least 1".into());
        }
        if !(self.rate_target >= 0.0) || !self.rate_target.is_finite() {
            return bad("rate_target", format!("must be finite and >= 0, got {}", self.rate_target));
        }
        if self.q_max == 0 {
            return bad("q_max", "must be at least 1".into());
        }
        if self.frame_len <= self.train_per_channel {
            return bad(
                "frame_len",
                format!(
                    "no feasible slot count: frame_len {} <= train_per_channel {}",
                    self.frame_len, self.train_per_channel
                ),
            );
        }
        let pl = &self.pathloss;
        for (name, v) in [
            ("pathloss.ref_loss_db", pl.ref_loss_db),
            ("pathloss.exponent_direct", pl.exponent_direct),
            ("pathloss.exponent_bs_irs", pl.exponent_bs_irs),
            ("pathloss.exponent_irs_user", pl.exponent_irs_user),
        ] {
            if !v.is_finite() {
                return bad(name, "must be finite".into());
            }
        }
        if let Placement::Circle { radius_m, .. } = self.geometry.placement {
            if !(radius_m >= 0.0) {
                return bad("geometry.placement.radius_m", "must be >= 0".into());
            }
        }
        let stats = self.derived_stats()?;
        if !(stats.gamma > 0.0) || !stats.gamma.is_finite() {
            return bad("tx_power_dbm", "reference SNR must be positive and finite".into());
        }
        if !(stats.sigma_f2 > 0.0) {
            return bad("geometry", "BS-IRS variance is not positive".into());
        }
        for (k, u) in stats.users.iter().enumerate() {
            if !(u.sigma_g2 > 0.0 && u.sigma_h2 > 0.0) {
                return bad("geometry", format!("user {k} has a non-positive link variance"));
            }
        }
        Ok(())
    }

    /// Slot counts `Q` in `1..=q_max` with a positive prelog `1/Q - α/L`.
    pub fn feasible_q(&self) -> Vec<u32> {
        (1..=self.q_max)
            .filter(|&q| u64::from(q) * u64::from(self.train_per_channel) < u64::from(self.frame_len))
            .collect()
    }

    /// Path-loss variances, reference SNR and per-user slot-gain variance.
    pub fn derived_stats(&self) -> Result<DerivedStats> {
        let pl = &self.pathloss;
        let geo = &self.geometry;
        let d_f = distance(geo.bs_m, geo.irs_m);
        let sigma_f2 = path_loss(d_f, pl.exponent_bs_irs, pl.ref_loss_db)
            .map_err(|e| Error::InvalidParams(format!("BS-IRS link: {e}")))?;
        let users = geo
            .user_positions(self.n_users)
            .into_iter()
            .enumerate()
            .map(|(k, pos)| {
                let d_g = distance(geo.bs_m, pos);
                let d_h = distance(geo.irs_m, pos);
                let sigma_g2 = path_loss(d_g, pl.exponent_direct, pl.ref_loss_db)
                    .map_err(|e| Error::InvalidParams(format!("user {k} direct link: {e}")))?;
                let sigma_h2 = path_loss(d_h, pl.exponent_irs_user, pl.ref_loss_db)
                    .map_err(|e| Error::InvalidParams(format!("user {k} IRS link: {e}")))?;
                Ok(UserStats {
                    d_g,
                    d_h,
                    sigma_g2,
                    sigma_h2,
                    lambda: sigma_g2 + self.n_elements as f64 * sigma_h2 * sigma_f2,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DerivedStats {
            d_f,
            sigma_f2,
            gamma: db_to_linear(self.tx_power_dbm - self.noise_power_dbm),
            users,
        })
    }

    pub fn rate_params(&self) -> RateParams {
        RateParams {
            gamma: db_to_linear(self.tx_power_dbm - self.noise_power_dbm),
            train_per_channel: self.train_per_channel,
            frame_len: self.frame_len,
        }
    }

    /// Channel generator for these parameters.
    pub fn channel_model(&self) -> Result<ChannelModel> {
        let stats = self.derived_stats()?;
        ChannelModel::new(
            stats.users.iter().map(|u| u.sigma_g2).collect(),
            stats.users.iter().map(|u| u.sigma_h2).collect(),
            stats.sigma_f2.sqrt(),
            self.n_elements,
            self.bs_irs_phase.clone(),
        )
    }
}

/// One coherence interval's channel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// Direct BS-user gains, one per user.
    pub g: Vec<Complex64>,
    /// IRS-user gains, `K x N` row-major.
    pub h: Vec<Complex64>,
    /// BS-IRS gains, constant modulus.
    pub f: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn new(g: Vec<Complex64>, h: Vec<Complex64>, f: Vec<Complex64>) -> Result<Self> {
        if h.len() != g.len() * f.len() {
            return Err(Error::DimensionMismatch(format!(
                "h has {} entries, expected K*N = {}*{}",
                h.len(),
                g.len(),
                f.len()
            )));
        }
        Ok(ChannelRealization { g, h, f })
    }

    pub fn n_users(&self) -> usize {
        self.g.len()
    }

    pub fn n_elements(&self) -> usize {
        self.f.len()
    }

    /// IRS-user gains of user `k`.
    pub fn h_row(&self, k: usize) -> &[Complex64] {
        let n = self.n_elements();
        &self.h[k * n..(k + 1) * n]
    }

    /// Cascaded coefficients `h_{k,n} f_n` of user `k`.
    pub fn cascaded(&self, k: usize) -> impl Iterator<Item = Complex64> + '_ {
        self.h_row(k).iter().zip(&self.f).map(|(h, f)| h * f)
    }
}

/// Statistical channel model: Rayleigh direct and IRS-user links, LoS
/// BS-IRS link.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    sigma_g2: Vec<f64>,
    sigma_h2: Vec<f64>,
    sigma_f: f64,
    n_elements: usize,
    f_phase: FPhasePolicy,
}

impl ChannelModel {
    /// Zero variances are allowed; they produce exactly-zero gains.
    pub fn new(
        sigma_g2: Vec<f64>,
        sigma_h2: Vec<f64>,
        sigma_f: f64,
        n_elements: usize,
        f_phase: FPhasePolicy,
    ) -> Result<Self> {
        if sigma_g2.is_empty() || sigma_g2.len() != sigma_h2.len() {
            return Err(Error::DimensionMismatch(format!(
                "need one direct and one IRS variance per user, got {} and {}",
                sigma_g2.len(),
                sigma_h2.len()
            )));
        }
        if sigma_g2.iter().chain(&sigma_h2).any(|v| !(*v >= 0.0) || !v.is_finite())
            || !(sigma_f >= 0.0)
        {
            return Err(Error::Domain("channel variances must be finite and >= 0".into()));
        }
        Ok(ChannelModel {
            sigma_g2,
            sigma_h2,
            sigma_f,
            n_elements,
            f_phase,
        })
    }

    pub fn n_users(&self) -> usize {
        self.sigma_g2.len()
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn sigma_g2(&self) -> &[f64] {
        &self.sigma_g2
    }

    pub fn sigma_h2(&self) -> &[f64] {
        &self.sigma_h2
    }

    pub fn sigma_f(&self) -> f64 {
        self.sigma_f
    }

    /// Empty realization with the right dimensions, for [`Self::sample_into`].
    pub fn empty_realization(&self) -> ChannelRealization {
        let k = self.n_users();
        let n = self.n_elements;
        ChannelRealization {
            g: vec![Complex64::default(); k],
            h: vec![Complex64::default(); k * n],
            f: vec![Complex64::default(); n],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let mut out = self.empty_realization();
        self.sample_into(rng, &mut out);
        out
    }

    /// Redraws `out` in place. Draw order: `g`, then `h` row by row, then the
    /// BS-IRS phases when they are random.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut ChannelRealization) {
        let n = self.n_elements;
        for (g, &var) in out.g.iter_mut().zip(&self.sigma_g2) {
            *g = cscg(rng, var);
        }
        for (k, &var) in self.sigma_h2.iter().enumerate() {
            for h in &mut out.h[k * n..(k + 1) * n] {
                *h = cscg(rng, var);
            }
        }
        match self.f_phase {
            FPhasePolicy::Ula { angle_rad } => {
                let step = PI * angle_rad.sin();
                for (i, f) in out.f.iter_mut().enumerate() {
                    *f = Complex64::from_polar(self.sigma_f, i as f64 * step);
                }
            }
            FPhasePolicy::Random => {
                for f in &mut out.f {
                    let phi = rng.random::<f64>() * 2.0 * PI;
                    *f = Complex64::from_polar(self.sigma_f, phi);
                }
            }
        }
    }
}

/// Circularly symmetric complex Gaussian draw with total variance `var`.
#[inline]
pub fn cscg<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * (0.5 * var).sqrt()
}
