//! Network model: non-linear energy harvesting, uplink rates and random
//! instance generation on the quadrant geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sigmoid energy-harvesting circuit constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EhParams {
    /// Steepness `a`.
    pub a_sat: f64,
    /// Turn-on point `b` in watts.
    pub b_sat: f64,
    /// Saturation power `M` in watts.
    pub m_sat: f64,
}

impl Default for EhParams {
    fn default() -> Self {
        Self { a_sat: 150.0, b_sat: 0.014, m_sat: 0.024 }
    }
}

impl EhParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_sat > 0.0 && self.b_sat > 0.0 && self.m_sat > 0.0) {
            return Err(Error::InvalidParameter(format!("EH constants must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// AP transmit power in watts.
    pub p_ap: f64,
    /// Uplink power cap in watts.
    pub p_max: f64,
    /// Bandwidth in Hz.
    pub bandwidth_w: f64,
    /// Noise spectral density in W/Hz.
    pub noise_n0: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            p_ap: 4.0,
            p_max: 0.01,
            bandwidth_w: 1e6,
            noise_n0: dbm_to_watts(-90.0),
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.p_ap, self.p_max, self.bandwidth_w, self.noise_n0]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(Error::InvalidParameter(format!("system parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Noise power over the band, `W * N0`.
    pub fn noise_power(&self) -> f64 {
        self.bandwidth_w * self.noise_n0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub source_radius_min: f64,
    pub source_radius_max: f64,
    pub relay_radius: f64,
    /// Path loss at the reference distance, dB.
    pub pl_d0_db: f64,
    pub d0: f64,
    pub path_exp: f64,
    pub shadow_sigma_db: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            source_radius_min: 3.0,
            source_radius_max: 4.0,
            relay_radius: 2.0,
            pl_d0_db: 31.67,
            d0: 1.0,
            path_exp: 2.0,
            shadow_sigma_db: 2.0,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        let radii_ok = self.source_radius_min > 0.0
            && self.source_radius_min < self.source_radius_max
            && self.relay_radius > 0.0
            && self.d0 > 0.0;
        if !radii_ok || self.shadow_sigma_db < 0.0 {
            return Err(Error::InvalidParameter(format!("bad geometry: {self:?}")));
        }
        Ok(())
    }

    /// Mean linear power gain (shadowing excluded) at distance `d`.
    pub fn median_gain(&self, d: f64) -> f64 {
        let db = -self.pl_d0_db - 10.0 * self.path_exp * (d / self.d0).log10();
        10f64.powf(db / 10.0)
    }

    /// Expected linear gain at distance `d` once lognormal shadowing and
    /// unit-mean exponential fading are averaged out.
    pub fn mean_gain(&self, d: f64) -> f64 {
        let s = self.shadow_sigma_db * std::f64::consts::LN_10 / 10.0;
        self.median_gain(d) * (0.5 * s * s).exp()
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Ω = 1 / (1 + exp(a b)).
pub fn eh_omega(eh: &EhParams) -> f64 {
    1.0 / (1.0 + (eh.a_sat * eh.b_sat).exp())
}

/// Ψ = M / (1 + exp(-a (p_rx - b))).
pub fn eh_psi(eh: &EhParams, p_rx: f64) -> f64 {
    eh.m_sat / (1.0 + (-eh.a_sat * (p_rx - eh.b_sat)).exp())
}

/// Harvested power `(Ψ - MΩ) / (1 - Ω)`; energy over `τ0` is this times `τ0`.
pub fn harvest_rate(eh: &EhParams, p_rx: f64) -> f64 {
    let omega = eh_omega(eh);
    let r = (eh_psi(eh, p_rx) - eh.m_sat * omega) / (1.0 - omega);
    r.clamp(0.0, eh.m_sat)
}

/// Shannon rate `W log2(1 + p g / (W N0))` in bits/s.
pub fn rate(p: f64, g: f64, sys: &SystemParams) -> f64 {
    sys.bandwidth_w * (p * g / sys.noise_power()).ln_1p() / std::f64::consts::LN_2
}

/// One channel realization together with the parameters needed to schedule it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkInstance {
    #[serde(rename = "n")]
    pub n_sources: usize,
    #[serde(rename = "k")]
    pub k_relays: usize,
    /// Downlink gains from the AP, sources first then relays.
    pub dl_gain: Vec<f64>,
    /// `ul_src[i][j]`: gain from source `i` to relay `j`, column 0 is the AP.
    pub ul_src: Vec<Vec<f64>>,
    /// Relay-to-AP gains.
    pub ul_relay: Vec<f64>,
    /// Per-source demand in bits.
    pub demand: Vec<f64>,
    /// Per-device EH constants, sources then relays.
    pub eh: Vec<EhParams>,
    pub sys: SystemParams,
}

impl NetworkInstance {
    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n_sources, self.k_relays);
        if n == 0 {
            return Err(Error::InvalidParameter("instance needs at least one source".into()));
        }
        let dims_ok = self.dl_gain.len() == n + k
            && self.ul_src.len() == n
            && self.ul_src.iter().all(|row| row.len() == k + 1)
            && self.ul_relay.len() == k
            && self.demand.len() == n
            && self.eh.len() == n + k;
        if !dims_ok {
            return Err(Error::Shape(format!("instance dimensions inconsistent with n={n}, k={k}")));
        }
        let gains_ok = self
            .dl_gain
            .iter()
            .chain(self.ul_src.iter().flatten())
            .chain(self.ul_relay.iter())
            .all(|g| g.is_finite() && *g > 0.0);
        if !gains_ok {
            return Err(Error::InvalidParameter("all gains must be positive and finite".into()));
        }
        if !self.demand.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::InvalidParameter("all demands must be positive".into()));
        }
        for eh in &self.eh {
            eh.validate()?;
        }
        self.sys.validate()
    }

    pub fn source_eh(&self, i: usize) -> &EhParams {
        &self.eh[i]
    }

    pub fn relay_eh(&self, j: usize) -> &EhParams {
        &self.eh[self.n_sources + j - 1]
    }

    /// Received downlink power at source `i`.
    pub fn source_p_rx(&self, i: usize) -> f64 {
        self.dl_gain[i] * self.sys.p_ap
    }

    /// Received downlink power at relay `j` (1-based).
    pub fn relay_p_rx(&self, j: usize) -> f64 {
        self.dl_gain[self.n_sources + j - 1] * self.sys.p_ap
    }

    pub fn source_harvest(&self, i: usize) -> f64 {
        harvest_rate(self.source_eh(i), self.source_p_rx(i))
    }

    pub fn relay_harvest(&self, j: usize) -> f64 {
        harvest_rate(self.relay_eh(j), self.relay_p_rx(j))
    }

    /// DL gain of relay `j` (1-based).
    pub fn relay_dl(&self, j: usize) -> f64 {
        self.dl_gain[self.n_sources + j - 1]
    }
}

/// Per-source relay choice; 0 means direct to the AP, `j` means relay `R_j`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment {
    pub choice: Vec<usize>,
}

impl Assignment {
    pub fn new(choice: Vec<usize>) -> Self {
        Self { choice }
    }

    pub fn all_direct(n: usize) -> Self {
        Self { choice: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_empty()
    }

    pub fn validate(&self, n: usize, k: usize) -> Result<()> {
        if self.choice.len() != n {
            return Err(Error::Shape(format!("assignment has {} entries, expected {n}", self.choice.len())));
        }
        if let Some(bad) = self.choice.iter().find(|&&j| j > k) {
            return Err(Error::InvalidParameter(format!("relay index {bad} exceeds k={k}")));
        }
        Ok(())
    }

    /// Position of this assignment in lexicographic order over `(k+1)^n`,
    /// source 0 being the most significant digit.
    pub fn to_index(&self, k: usize) -> u64 {
        self.choice.iter().fold(0u64, |acc, &j| acc * (k as u64 + 1) + j as u64)
    }

    pub fn from_index(mut index: u64, n: usize, k: usize) -> Self {
        let base = k as u64 + 1;
        let mut choice = vec![0; n];
        for slot in choice.iter_mut().rev() {
            *slot = (index % base) as usize;
            index /= base;
        }
        Self { choice }
    }
}

fn sample_gain<R: Rng>(rng: &mut R, geo: &GeometryConfig, d: f64, shadow: &Normal<f64>) -> f64 {
    let z: f64 = shadow.sample(rng);
    let mean = geo.median_gain(d) * 10f64.powf(z / 10.0);
    let fading: f64 = Exp::new(1.0).expect("unit rate").sample(rng);
    // An exact zero would break the log-domain features downstream.
    (mean * fading).max(f64::MIN_POSITIVE)
}

/// Relay positions: on the relay circle, equally spaced across the quadrant.
pub fn relay_positions(k: usize, geo: &GeometryConfig) -> Vec<(f64, f64)> {
    let sector = std::f64::consts::FRAC_PI_2 / k.max(1) as f64;
    (0..k)
        .map(|j| {
            let theta = (j as f64 + 0.5) * sector;
            (geo.relay_radius * theta.cos(), geo.relay_radius * theta.sin())
        })
        .collect()
}

/// Uniform (by area) source positions in the quadrant annulus.
pub fn sample_source_positions<R: Rng>(rng: &mut R, n: usize, geo: &GeometryConfig) -> Vec<(f64, f64)> {
    let (r2_lo, r2_hi) = (geo.source_radius_min.powi(2), geo.source_radius_max.powi(2));
    (0..n)
        .map(|_| {
            let r = rng.random_range(r2_lo..r2_hi).sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            (r * theta.cos(), r * theta.sin())
        })
        .collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Default per-source demand in bits.
pub const DEFAULT_DEMAND_BITS: f64 = 50.0;

/// Draw one network realization. Deterministic in `seed`.
pub fn sample_instance(
    n: usize,
    k: usize,
    geo: &GeometryConfig,
    ehp: &EhParams,
    sys: &SystemParams,
    seed: u64,
) -> Result<NetworkInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_instance_with(&mut rng, n, k, geo, ehp, sys)
}

pub fn sample_instance_with<R: Rng>(
    rng: &mut R,
    n: usize,
    k: usize,
    geo: &GeometryConfig,
    ehp: &EhParams,
    sys: &SystemParams,
) -> Result<NetworkInstance> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    geo.validate()?;
    ehp.validate()?;
    sys.validate()?;

    let shadow = Normal::new(0.0, geo.shadow_sigma_db)
        .map_err(|e| Error::InvalidParameter(format!("shadowing sigma: {e}")))?;
    let ap = (0.0, 0.0);
    let sources = sample_source_positions(rng, n, geo);
    let relays = relay_positions(k, geo);

    let mut dl_gain = Vec::with_capacity(n + k);
    for &s in &sources {
        dl_gain.push(sample_gain(rng, geo, dist(ap, s), &shadow));
    }
    for &r in &relays {
        dl_gain.push(sample_gain(rng, geo, dist(ap, r), &shadow));
    }
    let ul_src = sources
        .iter()
        .map(|&s| {
            std::iter::once(ap)
                .chain(relays.iter().copied())
                .map(|dst| sample_gain(rng, geo, dist(s, dst), &shadow))
                .collect()
        })
        .collect();
    let ul_relay = relays
        .iter()
        .map(|&r| sample_gain(rng, geo, dist(r, ap), &shadow))
        .collect();

    Ok(NetworkInstance {
        n_sources: n,
        k_relays: k,
        dl_gain,
        ul_src,
        ul_relay,
        demand: vec![DEFAULT_DEMAND_BITS; n],
        eh: vec![*ehp; n + k],
        sys: *sys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn omega_reference_values() {
        let eh = EhParams::default();
        // 1 / (1 + e^2.1), evaluated with mpmath at 30 digits.
        assert_relative_eq!(eh_omega(&eh), 0.109_096_821_195_612_9, max_relative = 1e-12);
        let zero = EhParams { a_sat: 1e-300, b_sat: 1e-300, m_sat: 1.0 };
        assert_relative_eq!(eh_omega(&zero), 0.5, max_relative = 1e-15);
        let huge = EhParams { a_sat: 1e6, b_sat: 1.0, m_sat: 1.0 };
        assert_eq!(eh_omega(&huge), 0.0);
    }

    #[test]
    fn psi_limits() {
        let eh = EhParams::default();
        assert_relative_eq!(eh_psi(&eh, eh.b_sat), eh.m_sat / 2.0);
        assert_relative_eq!(eh_psi(&eh, 1e3), eh.m_sat);
        assert_relative_eq!(eh_psi(&eh, 0.0), eh.m_sat * eh_omega(&eh), max_relative = 1e-14);
    }

    #[test]
    fn harvest_reference_values() {
        let eh = EhParams::default();
        assert_eq!(harvest_rate(&eh, 0.0), 0.0);
        assert_relative_eq!(harvest_rate(&eh, 1e3), eh.m_sat, max_relative = 1e-12);
        // (0.012 - 0.024 Ω) / (1 - Ω) at p_rx = b.
        assert_relative_eq!(harvest_rate(&eh, 0.014), 0.010_530_522_860_964_2, max_relative = 1e-12);
    }

    #[test]
    fn rate_reference_values() {
        let sys = SystemParams::default();
        let wn0 = sys.noise_power();
        assert_eq!(rate(0.0, 1.0, &sys), 0.0);
        assert_relative_eq!(rate(wn0, 1.0, &sys), sys.bandwidth_w, max_relative = 1e-14);
        assert_relative_eq!(rate(3.0 * wn0, 1.0, &sys), 2.0 * sys.bandwidth_w, max_relative = 1e-14);
    }

    #[test]
    fn defaults_match_simulation_setup() {
        let sys = SystemParams::default();
        assert_eq!(sys.p_ap, 4.0);
        assert_eq!(sys.p_max, 0.01);
        assert_eq!(sys.bandwidth_w, 1e6);
        assert_relative_eq!(sys.noise_n0, 1e-12, max_relative = 1e-12);
        let geo = GeometryConfig::default();
        assert_eq!((geo.pl_d0_db, geo.shadow_sigma_db, geo.path_exp), (31.67, 2.0, 2.0));
        let eh = EhParams::default();
        assert_eq!((eh.a_sat, eh.b_sat, eh.m_sat), (150.0, 0.014, 0.024));
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_empty() {
        let (geo, eh, sys) = Default::default();
        let a = sample_instance(3, 2, &geo, &eh, &sys, 11).unwrap();
        let b = sample_instance(3, 2, &geo, &eh, &sys, 11).unwrap();
        let c = sample_instance(3, 2, &geo, &eh, &sys, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        assert!(sample_instance(0, 2, &geo, &eh, &sys, 1).is_err());
    }

    #[test]
    fn geometry_radii() {
        let geo = GeometryConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (x, y) in sample_source_positions(&mut rng, 2000, &geo) {
            let r = (x * x + y * y).sqrt();
            assert!((geo.source_radius_min..=geo.source_radius_max).contains(&r));
            assert!(x >= 0.0 && y >= 0.0);
        }
        for k in 1..6 {
            let pos = relay_positions(k, &geo);
            for &(x, y) in &pos {
                assert_relative_eq!((x * x + y * y).sqrt(), geo.relay_radius, max_relative = 1e-12);
            }
            let gaps: Vec<f64> = pos.windows(2).map(|w| dist(w[0], w[1])).collect();
            for g in &gaps {
                assert_relative_eq!(*g, gaps[0], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn assignment_index_roundtrip() {
        for idx in 0..81 {
            let a = Assignment::from_index(idx, 4, 2);
            assert_eq!(a.to_index(2), idx);
        }
        assert_eq!(Assignment::from_index(5, 2, 2).choice, vec![1, 2]);
    }
}
