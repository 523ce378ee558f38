//! Tapped-delay-line channels.
//!
//! Each tap is an independent Rayleigh process built from a sum of
//! sinusoids with equally spaced arrival angles, a random angle offset per
//! process and random phases. MIMO channels draw one process per
//! `(rx, tx)` pair and tap and color the stack with a Kronecker root.

use crate::seed::{role, seed_stream};
use crate::tensor::{max_abs, CMat, ChannelTensor};
use num_complex::Complex64;
use rand::Rng;
use serde::Deserialize;
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

/// Default number of sinusoids per process.
pub const DEFAULT_M0: usize = 32;
/// Eigenvalues below `-PSD_TOLERANCE` reject a correlation matrix.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TdlError {
    #[error("at least 8 sinusoids per process are required, got {0}")]
    TooFewSinusoids(usize),
    #[error("correlation matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("invalid correlation specification: {0}")]
    InvalidCorrelation(String),
    #[error("invalid tap profile: {0}")]
    InvalidProfile(String),
    #[error("cannot read {path}: {msg}")]
    Load { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub delay_s: f64,
    pub power_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapProfile {
    pub name: String,
    pub taps: Vec<Tap>,
    pub rms_delay_spread_target: Option<f64>,
    pub max_doppler_hz: f64,
}

#[derive(Debug, Deserialize)]
struct TapRow {
    #[allow(dead_code)]
    tap: usize,
    delay_ns: f64,
    power_db: f64,
}

impl TapProfile {
    /// Loads a `tap,delay_ns,power_db` table; taps are sorted by delay.
    pub fn load_csv(path: &Path, name: &str, max_doppler_hz: f64) -> Result<Self, TdlError> {
        let load_err = |msg: String| TdlError::Load {
            path: path.display().to_string(),
            msg,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| load_err(e.to_string()))?;
        let mut taps = Vec::new();
        for row in rdr.deserialize::<TapRow>() {
            let r = row.map_err(|e| load_err(e.to_string()))?;
            taps.push(Tap {
                delay_s: r.delay_ns * 1e-9,
                power_db: r.power_db,
            });
        }
        let p = Self::new(name, taps, max_doppler_hz)?;
        Ok(p)
    }

    pub fn new(name: &str, mut taps: Vec<Tap>, max_doppler_hz: f64) -> Result<Self, TdlError> {
        if taps.is_empty() {
            return Err(TdlError::InvalidProfile("no taps".into()));
        }
        if taps.iter().any(|t| !(t.delay_s >= 0.0) || !t.power_db.is_finite()) {
            return Err(TdlError::InvalidProfile("delays must be >= 0 and powers finite".into()));
        }
        if !(max_doppler_hz >= 0.0) {
            return Err(TdlError::InvalidProfile("maximum Doppler must be >= 0".into()));
        }
        taps.sort_by(|a, b| a.delay_s.total_cmp(&b.delay_s));
        let mut p = Self {
            name: name.to_string(),
            taps,
            rms_delay_spread_target: None,
            max_doppler_hz,
        };
        p.rms_delay_spread_target = Some(p.rms_delay_spread());
        Ok(p)
    }

    /// Linear tap powers normalized to unit sum.
    pub fn normalized_powers(&self) -> Vec<f64> {
        let lin: Vec<f64> = self.taps.iter().map(|t| 10f64.powf(t.power_db / 10.0)).collect();
        let s: f64 = lin.iter().sum();
        lin.into_iter().map(|p| p / s).collect()
    }

    pub fn delays(&self) -> Vec<f64> {
        self.taps.iter().map(|t| t.delay_s).collect()
    }

    pub fn rms_delay_spread(&self) -> f64 {
        rms_delay_spread(&self.delays(), &self.normalized_powers())
    }
}

/// Power-weighted rms delay spread.
pub fn rms_delay_spread(delays: &[f64], powers: &[f64]) -> f64 {
    let s: f64 = powers.iter().sum();
    let mean: f64 = delays.iter().zip(powers).map(|(d, p)| d * p).sum::<f64>() / s;
    let var: f64 = delays
        .iter()
        .zip(powers)
        .map(|(d, p)| p * (d - mean).powi(2))
        .sum::<f64>()
        / s;
    var.max(0.0).sqrt()
}

/// Sinusoid angles and phases of one fading process per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct SoSState {
    pub m0: usize,
    pub f_d: f64,
    /// `angles[n][m]` and `phases[n][m]` for tap `n`, sinusoid `m`.
    pub angles: Vec<Vec<f64>>,
    pub phases: Vec<Vec<f64>>,
}

impl SoSState {
    pub fn new<R: Rng>(n_taps: usize, m0: usize, f_d: f64, rng: &mut R) -> Result<Self, TdlError> {
        if m0 < 8 {
            return Err(TdlError::TooFewSinusoids(m0));
        }
        let mut angles = Vec::with_capacity(n_taps);
        let mut phases = Vec::with_capacity(n_taps);
        for _ in 0..n_taps {
            let offset = rng.random::<f64>() * 2.0 * PI;
            angles.push(
                (1..=m0)
                    .map(|m| (2.0 * PI * m as f64 + offset) / m0 as f64 % (2.0 * PI))
                    .collect(),
            );
            phases.push((0..m0).map(|_| rng.random::<f64>() * 2.0 * PI).collect());
        }
        Ok(Self { m0, f_d, angles, phases })
    }
}

/// `c_n(t) = M₀^{-1/2} Σ_m exp(j(2π f_D t cos θ_{n,m} + φ_{n,m}))`.
pub fn sos_coefficient(state: &SoSState, n: usize, t: f64) -> Complex64 {
    let w = 2.0 * PI * state.f_d * t;
    let mut acc = Complex64::new(0.0, 0.0);
    for (th, ph) in state.angles[n].iter().zip(&state.phases[n]) {
        acc += Complex64::from_polar(1.0, w * th.cos() + ph);
    }
    acc / (state.m0 as f64).sqrt()
}

/// Empirical `Re E[c(0) c*(τ)] / E[|c(0)|²]` over independent processes.
pub fn autocorrelation_estimate(
    m0: usize,
    f_d: f64,
    lags: &[f64],
    realizations: usize,
    seed: u64,
) -> Result<Vec<f64>, TdlError> {
    let mut acc = vec![Complex64::new(0.0, 0.0); lags.len()];
    let mut p0 = 0.0;
    for r in 0..realizations {
        let mut rng = seed_stream(seed, &[r as u64, role::TDL_SOS]);
        let s = SoSState::new(1, m0, f_d, &mut rng)?;
        let c0 = sos_coefficient(&s, 0, 0.0);
        p0 += c0.norm_sqr();
        for (a, &tau) in acc.iter_mut().zip(lags) {
            *a += c0 * sos_coefficient(&s, 0, tau).conj();
        }
    }
    Ok(acc.into_iter().map(|a| a.re / p0).collect())
}

/// Jakes Doppler spectrum, zero outside `(−f_D, f_D)`.
pub fn jakes_psd(f: f64, f_d: f64) -> f64 {
    if f.abs() >= f_d {
        return 0.0;
    }
    1.0 / (PI * f_d * (1.0 - (f / f_d).powi(2)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum CorrelationKind {
    Low,
    MediumA,
    Explicit,
}

/// Per-end correlation matrices. Downlink convention: BS transmits.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSpec {
    pub kind: CorrelationKind,
    pub bs: CMat,
    pub ue: CMat,
}

#[derive(Deserialize)]
struct CorrelationFile {
    name: String,
    bs: Vec<Vec<[f64; 2]>>,
    ue: Vec<Vec<[f64; 2]>>,
}

fn parse_matrix(rows: &[Vec<[f64; 2]>], what: &str) -> Result<CMat, TdlError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(TdlError::InvalidCorrelation(format!("{what} matrix must be square and non-empty")));
    }
    Ok(CMat::from_fn(n, n, |i, k| Complex64::new(rows[i][k][0], rows[i][k][1])))
}

impl CorrelationSpec {
    pub fn low() -> Self {
        Self {
            kind: CorrelationKind::Low,
            bs: CMat::identity(2, 2),
            ue: CMat::identity(2, 2),
        }
    }

    pub fn new(kind: CorrelationKind, bs: CMat, ue: CMat) -> Result<Self, TdlError> {
        let s = Self { kind, bs, ue };
        s.validate()?;
        Ok(s)
    }

    pub fn load_json(path: &Path) -> Result<Self, TdlError> {
        let load_err = |msg: String| TdlError::Load {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let f: CorrelationFile = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        let kind = match f.name.as_str() {
            "Low" => CorrelationKind::Low,
            "MediumA" => CorrelationKind::MediumA,
            _ => CorrelationKind::Explicit,
        };
        Self::new(kind, parse_matrix(&f.bs, "bs")?, parse_matrix(&f.ue, "ue")?)
    }

    pub fn validate(&self) -> Result<(), TdlError> {
        for m in [&self.bs, &self.ue] {
            if max_abs(&(m - m.adjoint())) > 1e-12 {
                return Err(TdlError::InvalidCorrelation("matrix is not Hermitian".into()));
            }
            if (0..m.nrows()).any(|i| (m[(i, i)] - Complex64::new(1.0, 0.0)).norm() > 1e-12) {
                return Err(TdlError::InvalidCorrelation("diagonal must be 1".into()));
            }
            check_psd(m)?;
        }
        Ok(())
    }
}

fn check_psd(m: &CMat) -> Result<(), TdlError> {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(TdlError::NotPositiveSemidefinite(min));
    }
    Ok(())
}

/// Correlation matrix of one link end at dimension `n`.
///
/// The base matrix is used as is when its size matches. A 2×2 base with
/// off-diagonal `a` is extended to `n` antennas by `r_ik = a^{((i−k)/(n−1))²}`.
pub fn end_correlation(base: &CMat, n: usize) -> Result<CMat, TdlError> {
    if n == base.nrows() {
        return Ok(base.clone());
    }
    if n == 1 {
        return Ok(CMat::identity(1, 1));
    }
    if base.nrows() != 2 {
        return Err(TdlError::InvalidCorrelation(format!(
            "cannot extend a {}x{} matrix to {n} antennas",
            base.nrows(),
            base.nrows()
        )));
    }
    let a = base[(1, 0)];
    let mut r = CMat::identity(n, n);
    for i in 0..n {
        for k in 0..i {
            let e = ((i - k) as f64 / (n - 1) as f64).powi(2);
            let v = if a.norm() == 0.0 { Complex64::new(0.0, 0.0) } else { a.powf(e) };
            r[(i, k)] = v;
            r[(k, i)] = v.conj();
        }
    }
    Ok(r)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// Hermitian square root factor `L` with `L·Lᴴ = R_UE ⊗ R_BS`, indexed
/// `rx·n_tx + tx`.
pub fn correlation_root(spec: &CorrelationSpec, n_tx: usize, n_rx: usize) -> Result<CMat, TdlError> {
    if spec.kind == CorrelationKind::Low {
        return Ok(CMat::identity(n_rx * n_tx, n_rx * n_tx));
    }
    let r = kron(&end_correlation(&spec.ue, n_rx)?, &end_correlation(&spec.bs, n_tx)?);
    psd_root(&r)
}

/// Eigen-decomposition square root of a Hermitian PSD matrix.
pub fn psd_root(r: &CMat) -> Result<CMat, TdlError> {
    let eig = r.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(TdlError::NotPositiveSemidefinite(min));
    }
    let n = r.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    Ok(&scaled * eig.eigenvectors.adjoint())
}

/// Generation options beyond the physical profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdlOptions {
    pub m0: usize,
    pub drop: u64,
}

impl Default for TdlOptions {
    fn default() -> Self {
        Self { m0: DEFAULT_M0, drop: 0 }
    }
}

/// MIMO TDL channel `H(t,f) = Σ_n C̃_n(t) e^{−j2π f τ_n}`.
#[allow(clippy::too_many_arguments)]
pub fn generate_tdl_channel(
    profile: &TapProfile,
    spec: &CorrelationSpec,
    n_tx: usize,
    n_rx: usize,
    times: &[f64],
    subcarriers: &[f64],
    seed: u64,
    opts: TdlOptions,
) -> Result<ChannelTensor, TdlError> {
    let root = correlation_root(spec, n_tx, n_rx)?;
    let n_links = n_tx * n_rx;
    let powers = profile.normalized_powers();
    let delays = profile.delays();
    let n_taps = powers.len();
    let states: Vec<SoSState> = (0..n_links)
        .map(|k| {
            let mut rng = seed_stream(seed, &[opts.drop, k as u64, role::TDL_SOS]);
            SoSState::new(n_taps, opts.m0, profile.max_doppler_hz, &mut rng)
        })
        .collect::<Result<_, _>>()?;

    let mut h = ChannelTensor::zeros(times.to_vec(), subcarriers.to_vec(), n_rx, n_tx);
    let identity = spec.kind == CorrelationKind::Low;
    // phase ramps e^{−j2π f τ_n}, reused for every time sample
    let ramps: Vec<Vec<Complex64>> = (0..n_taps)
        .map(|n| subcarriers.iter().map(|f| Complex64::from_polar(1.0, -2.0 * PI * f * delays[n])).collect())
        .collect();
    let mut c = nalgebra::DVector::<Complex64>::zeros(n_links);
    for (ti, &t) in times.iter().enumerate() {
        for n in 0..n_taps {
            let amp = powers[n].sqrt();
            for (k, s) in states.iter().enumerate() {
                c[k] = sos_coefficient(s, n, t) * amp;
            }
            let colored = if identity { c.clone() } else { &root * &c };
            for (fi, ramp) in ramps[n].iter().enumerate() {
                let dst = h.slice_mut(ti, fi);
                for k in 0..n_links {
                    dst[k] += colored[k] * ramp;
                }
            }
        }
    }
    Ok(h)
}
