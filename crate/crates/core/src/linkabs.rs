//! Physical-layer abstraction.
//!
//! Channel-estimation error models for CSI-RS and DMRS, the LMMSE receiver
//! and its per-layer SINR, MIESM compression to one effective SINR, logistic
//! BLER curves and Chase-combining HARQ.

use crate::tensor::{CMat, ChannelTensor, TensorError};
use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

/// Default retransmission limit.
pub const DEFAULT_N_RT_MAX: usize = 4;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("failed to load {path}: {msg}")]
    Load { path: String, msg: String },
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error("MCS {0} is not in the table")]
    UnknownMcs(usize),
    #[error("invalid estimation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn load_err(path: &Path, msg: impl ToString) -> LinkError {
    LinkError::Load {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    sinr_db: f64,
    value: f64,
}

/// Sampled BICM mutual information `I_Q(γ)` in bits per symbol.
///
/// Linear interpolation in dB between samples. Below the first sample MI is
/// extended proportionally to the linear SINR (the low-SNR slope of every
/// constellation); above the last sample it is held at the last value.
#[derive(Debug, Clone, PartialEq)]
pub struct MiCurve {
    q_bits: u32,
    sinr_db: Vec<f64>,
    mi: Vec<f64>,
}

impl MiCurve {
    pub fn new(q_bits: u32, sinr_db: Vec<f64>, mi: Vec<f64>) -> Result<Self, LinkError> {
        if sinr_db.len() != mi.len() || sinr_db.len() < 2 {
            return Err(LinkError::InvalidCurve("need at least two matching samples".into()));
        }
        for w in sinr_db.windows(2) {
            if w[1] <= w[0] {
                return Err(LinkError::InvalidCurve(format!("SINR grid not increasing at {}", w[1])));
            }
        }
        for w in mi.windows(2) {
            if w[1] <= w[0] {
                return Err(LinkError::InvalidCurve(format!("MI not strictly increasing at {}", w[1])));
            }
        }
        let cap = q_bits as f64;
        if mi[0] <= 0.0 || mi[mi.len() - 1] > cap + 1e-12 {
            return Err(LinkError::InvalidCurve(format!("MI outside (0, {cap}]")));
        }
        Ok(Self { q_bits, sinr_db, mi })
    }

    pub fn load_csv(path: &Path, q_bits: u32) -> Result<Self, LinkError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| load_err(path, e))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for row in rdr.deserialize::<CurveRow>() {
            let row = row.map_err(|e| load_err(path, e))?;
            x.push(row.sinr_db);
            y.push(row.value);
        }
        Self::new(q_bits, x, y)
    }

    /// Bits per symbol, `log₂Q`.
    pub fn q_bits(&self) -> u32 {
        self.q_bits
    }

    pub fn domain_db(&self) -> (f64, f64) {
        (self.sinr_db[0], self.sinr_db[self.sinr_db.len() - 1])
    }

    pub fn mi_db(&self, sinr_db: f64) -> f64 {
        if sinr_db == f64::NEG_INFINITY {
            return 0.0;
        }
        let n = self.sinr_db.len();
        if sinr_db <= self.sinr_db[0] {
            return self.mi[0] * db_to_lin(sinr_db - self.sinr_db[0]);
        }
        if sinr_db >= self.sinr_db[n - 1] {
            return self.mi[n - 1];
        }
        let k = self.sinr_db.partition_point(|&x| x <= sinr_db) - 1;
        let w = (sinr_db - self.sinr_db[k]) / (self.sinr_db[k + 1] - self.sinr_db[k]);
        self.mi[k] + w * (self.mi[k + 1] - self.mi[k])
    }

    /// `I_Q` of a linear SINR; zero SINR carries zero information.
    pub fn mi(&self, sinr_lin: f64) -> f64 {
        if sinr_lin <= 0.0 {
            return 0.0;
        }
        self.mi_db(lin_to_db(sinr_lin))
    }

    /// `I_Q⁻¹` in dB. Values at or above the last sample map to its SINR.
    pub fn inverse_db(&self, mi: f64) -> f64 {
        let n = self.mi.len();
        if mi <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if mi <= self.mi[0] {
            return self.sinr_db[0] + lin_to_db(mi / self.mi[0]);
        }
        if mi >= self.mi[n - 1] {
            return self.sinr_db[n - 1];
        }
        let k = self.mi.partition_point(|&v| v <= mi) - 1;
        let w = (mi - self.mi[k]) / (self.mi[k + 1] - self.mi[k]);
        self.sinr_db[k] + w * (self.sinr_db[k + 1] - self.sinr_db[k])
    }
}

/// One row of the PDSCH MCS table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub mcs: usize,
    /// Modulation order as bits per symbol.
    pub q: u32,
    pub code_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McsTable {
    entries: Vec<McsEntry>,
}

impl McsTable {
    pub fn load_csv(path: &Path) -> Result<Self, LinkError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| load_err(path, e))?;
        let entries: Vec<McsEntry> = rdr
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| load_err(path, e))?;
        if entries.is_empty() {
            return Err(load_err(path, "empty MCS table"));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, mcs: usize) -> Result<McsEntry, LinkError> {
        self.entries.iter().find(|e| e.mcs == mcs).copied().ok_or(LinkError::UnknownMcs(mcs))
    }

    pub fn entries(&self) -> &[McsEntry] {
        &self.entries
    }
}

#[derive(Debug, Deserialize)]
struct BlerRow {
    mcs: usize,
    threshold_db: f64,
    slope_per_db: f64,
}

/// Logistic BLER `1/(1 + e^{s(γ−γ₅₀)})` anchored at the 50% point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlerCurve {
    pub mcs: usize,
    pub q: u32,
    pub code_rate: f64,
    pub threshold_db: f64,
    pub slope_per_db: f64,
}

impl BlerCurve {
    /// Reads the `(threshold, slope)` pair of `mcs` and joins it with the
    /// modulation and code rate from the MCS table.
    pub fn load(params_path: &Path, mcs_table: &McsTable, mcs: usize) -> Result<Self, LinkError> {
        let entry = mcs_table.get(mcs)?;
        let mut rdr = csv::Reader::from_path(params_path).map_err(|e| load_err(params_path, e))?;
        for row in rdr.deserialize::<BlerRow>() {
            let row = row.map_err(|e| load_err(params_path, e))?;
            if row.mcs == mcs {
                if row.slope_per_db <= 0.0 {
                    return Err(LinkError::InvalidCurve(format!("non-positive slope for MCS {mcs}")));
                }
                return Ok(Self {
                    mcs,
                    q: entry.q,
                    code_rate: entry.code_rate,
                    threshold_db: row.threshold_db,
                    slope_per_db: row.slope_per_db,
                });
            }
        }
        Err(LinkError::UnknownMcs(mcs))
    }

    pub fn bler(&self, sinr_db: f64) -> f64 {
        if sinr_db == f64::NEG_INFINITY {
            return 1.0;
        }
        let z = self.slope_per_db * (sinr_db - self.threshold_db);
        // split to avoid overflow of e^z on either tail
        if z > 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    #[default]
    Ideal,
    Practical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotRole {
    CsiRs,
    Dmrs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub mode: EstimationMode,
    /// DMRS bundle size in PRBs.
    pub dmrs_bundle_prb: usize,
    /// CSI-RS to PDSCH EPRE ratio, linear.
    pub csi_rs_epre_ratio: f64,
    /// Support of the flat delay profile assumed by the CSI-RS smoother.
    pub smoothing_support_s: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            mode: EstimationMode::Ideal,
            dmrs_bundle_prb: 2,
            csi_rs_epre_ratio: 1.0,
            smoothing_support_s: 4.7e-6,
        }
    }
}

impl EstimationConfig {
    pub fn practical(dmrs_bundle_prb: usize, csi_rs_epre_ratio: f64) -> Self {
        Self {
            mode: EstimationMode::Practical,
            dmrs_bundle_prb,
            csi_rs_epre_ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if self.dmrs_bundle_prb == 0 {
            return Err(LinkError::InvalidConfig("bundle size must be at least 1".into()));
        }
        if !(self.csi_rs_epre_ratio > 0.0) {
            return Err(LinkError::InvalidConfig("EPRE ratio must be positive".into()));
        }
        if !(self.smoothing_support_s > 0.0) {
            return Err(LinkError::InvalidConfig("smoothing support must be positive".into()));
        }
        Ok(())
    }
}

/// Circularly symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Least-squares CSI-RS estimate: truth plus noise of variance `σ²/(P·EPRE)`.
pub fn csi_rs_ls<R: Rng + ?Sized>(h: &ChannelTensor, cfg: &EstimationConfig, noise_var: f64, rng: &mut R) -> ChannelTensor {
    let var = noise_var / cfg.csi_rs_epre_ratio;
    let mut out = h.clone();
    for v in out.data_mut() {
        *v += complex_gaussian(rng, var);
    }
    out
}

/// Frequency correlation of a flat delay profile on `[0, T]`:
/// `R(Δf) = e^{−jπΔfT}·sinc(ΔfT)`.
pub fn flat_pdp_correlation(df: f64, support_s: f64) -> Complex64 {
    let x = df * support_s;
    let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
    Complex64::from_polar(sinc, -PI * x)
}

/// Wiener smoothing matrix `R(R + v/p·I)⁻¹` over the frequency samples.
pub fn wiener_matrix(freqs: &[f64], support_s: f64, noise_to_signal: f64) -> CMat {
    let n = freqs.len();
    let r = CMat::from_fn(n, n, |i, k| flat_pdp_correlation(freqs[i] - freqs[k], support_s));
    let mut a = r.clone();
    for i in 0..n {
        a[(i, i)] += Complex64::new(noise_to_signal, 0.0);
    }
    // (R + vI) is Hermitian PD, so R(R+vI)⁻¹ = ((R+vI)⁻¹R)ᴴ
    let chol = a.cholesky().expect("regularized correlation is positive definite");
    chol.solve(&r).adjoint()
}

/// Mismatched LMMSE smoothing of a noisy CSI-RS estimate along frequency.
/// The signal power per coefficient is estimated from the data.
pub fn wiener_smooth(y: &ChannelTensor, support_s: f64, noise_var: f64) -> ChannelTensor {
    let nf = y.n_freqs();
    let mut out = y.clone();
    if nf < 2 {
        return out;
    }
    let links = y.n_rx() * y.n_tx();
    for t in 0..y.n_times() {
        let mut power = 0.0;
        for f in 0..nf {
            power += y.slice(t, f).iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        power = (power / (nf * links) as f64 - noise_var).max(noise_var * 1e-3).max(f64::MIN_POSITIVE);
        let w = wiener_matrix(y.freqs(), support_s, noise_var / power);
        for k in 0..links {
            let v = DVector::from_iterator(nf, (0..nf).map(|f| y.slice(t, f)[k]));
            let s = &w * v;
            for f in 0..nf {
                out.slice_mut(t, f)[k] = s[f];
            }
        }
    }
    out
}

/// DMRS estimate: LS noise of variance `σ²/P` per PRB, averaged over
/// consecutive bundles of PRBs along the frequency axis. The channel is taken
/// as constant within a bundle, so only the noise is averaged.
pub fn dmrs_estimate<R: Rng + ?Sized>(g: &ChannelTensor, bundle: usize, noise_var: f64, rng: &mut R) -> ChannelTensor {
    let mut out = g.clone();
    let nf = g.n_freqs();
    let links = g.n_rx() * g.n_tx();
    for t in 0..g.n_times() {
        let mut start = 0;
        while start < nf {
            let end = (start + bundle).min(nf);
            let size = (end - start) as f64;
            for k in 0..links {
                let mut acc = Complex64::new(0.0, 0.0);
                for _ in start..end {
                    acc += complex_gaussian(rng, noise_var);
                }
                let avg = acc / size;
                for f in start..end {
                    out.slice_mut(t, f)[k] += avg;
                }
            }
            start = end;
        }
    }
    out
}

/// Channel seen by the receiver for the given pilot role. `noise_var` is
/// `σ²/P`.
pub fn estimate_channel<R: Rng + ?Sized>(
    h: &ChannelTensor,
    cfg: &EstimationConfig,
    role: PilotRole,
    noise_var: f64,
    rng: &mut R,
) -> Result<ChannelTensor, LinkError> {
    cfg.validate()?;
    if cfg.mode == EstimationMode::Ideal {
        return Ok(h.clone());
    }
    Ok(match role {
        PilotRole::Dmrs => dmrs_estimate(h, cfg.dmrs_bundle_prb, noise_var, rng),
        PilotRole::CsiRs => {
            let ls = csi_rs_ls(h, cfg, noise_var, rng);
            wiener_smooth(&ls, cfg.smoothing_support_s, noise_var / cfg.csi_rs_epre_ratio)
        }
    })
}

/// LMMSE equalizer `Fᴴ = Ĝᴴ(ĜĜᴴ + (σ²/P)I)⁻¹`, returned as the `ν × N_R`
/// matrix. Evaluated through the equivalent `(ĜᴴĜ + (σ²/P)I)⁻¹Ĝᴴ`.
pub fn lmmse_filter(g_hat: &CMat, noise_var: f64) -> CMat {
    let nu = g_hat.ncols();
    let gh = g_hat.adjoint();
    let mut a = &gh * g_hat;
    for i in 0..nu {
        a[(i, i)] += Complex64::new(noise_var, 0.0);
    }
    match a.clone().cholesky() {
        Some(c) => c.solve(&gh),
        None => a.lu().solve(&gh).unwrap_or_else(|| CMat::zeros(nu, g_hat.nrows())),
    }
}

/// Post-equalization SINR of every layer, linear. `f` holds the filter rows
/// `f_lᴴ` and `g` the true precoded channel.
pub fn per_layer_sinr(g: &CMat, f: &CMat, noise_var: f64) -> Vec<f64> {
    let fg = f * g;
    (0..g.ncols())
        .map(|l| {
            let sig = fg[(l, l)].norm_sqr();
            let interf: f64 = (0..g.ncols()).filter(|&k| k != l).map(|k| fg[(l, k)].norm_sqr()).sum();
            let noise = noise_var * f.row(l).iter().map(|v| v.norm_sqr()).sum::<f64>();
            let den = interf + noise;
            if den > 0.0 {
                sig / den
            } else if sig > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect()
}

/// `I_Q⁻¹` of the mean `I_Q` over all supplied SINRs (linear), in dB.
pub fn miesm_effective_sinr(sinrs: &[f64], mi: &MiCurve) -> f64 {
    if sinrs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mean = sinrs.iter().map(|&g| mi.mi(g)).sum::<f64>() / sinrs.len() as f64;
    mi.inverse_db(mean)
}

pub fn chase_gain_db(n_rt: usize) -> f64 {
    10.0 * ((n_rt + 1) as f64).log10()
}

/// Sampled Chase-combining outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarqOutcome {
    /// BLER of every attempt made, first transmission included.
    pub blers: Vec<f64>,
    pub retransmissions: usize,
    pub success: bool,
}

/// Draws block errors attempt by attempt with `BLER(γ + 10log₁₀(N_rt+1))`
/// until success or `n_rt_max` attempts have been spent.
pub fn harq_chase<R: Rng + ?Sized>(gamma_eff_db: f64, bler: &BlerCurve, n_rt_max: usize, rng: &mut R) -> HarqOutcome {
    let mut blers = Vec::new();
    for k in 0..n_rt_max.max(1) {
        let p = bler.bler(gamma_eff_db + chase_gain_db(k));
        blers.push(p);
        let u: f64 = rng.random();
        if u >= p {
            return HarqOutcome { blers, retransmissions: k, success: true };
        }
    }
    let retransmissions = blers.len() - 1;
    HarqOutcome { blers, retransmissions, success: false }
}

/// Expectation of the normalized throughput `1/(1+N_rt)` (zero on failure)
/// under the same attempt process as [`harq_chase`].
pub fn harq_expected_throughput(gamma_eff_db: f64, bler: &BlerCurve, n_rt_max: usize) -> f64 {
    let mut reach = 1.0;
    let mut out = 0.0;
    for k in 0..n_rt_max.max(1) {
        let p = bler.bler(gamma_eff_db + chase_gain_db(k));
        out += reach * (1.0 - p) / (k + 1) as f64;
        reach *= p;
    }
    out
}

/// `ν·Q·R/(1 + N_rt)` on success, 0 on failure, with the fraction of the
/// zero-retransmission efficiency.
pub fn spectral_efficiency(table: &McsTable, mcs: usize, rank: usize, n_rt: usize, success: bool) -> Result<(f64, f64), LinkError> {
    let e = table.get(mcs)?;
    let peak = rank as f64 * e.q as f64 * e.code_rate;
    if !success {
        return Ok((0.0, 0.0));
    }
    let se = peak / (1 + n_rt) as f64;
    Ok((se, 1.0 / (1 + n_rt) as f64))
}

/// Per-drop outcome of one scheme at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub effective_sinr_db: f64,
    pub blers: Vec<f64>,
    pub retransmissions: usize,
    pub success: bool,
    pub spectral_efficiency: f64,
    pub normalized_throughput: f64,
    /// Expectation of `normalized_throughput` over the HARQ draws.
    pub expected_throughput: f64,
}

/// Link-level knobs shared by every drop.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub mi: MiCurve,
    pub bler: BlerCurve,
    pub mcs_table: McsTable,
    pub rank: usize,
    pub n_rt_max: usize,
}

impl LinkModel {
    /// Collapses per-PRB per-layer SINRs into a [`LinkResult`].
    pub fn evaluate<R: Rng + ?Sized>(&self, sinrs: &[f64], rng: &mut R) -> Result<LinkResult, LinkError> {
        let g = miesm_effective_sinr(sinrs, &self.mi);
        let h = harq_chase(g, &self.bler, self.n_rt_max, rng);
        let (se, norm) = spectral_efficiency(&self.mcs_table, self.bler.mcs, self.rank, h.retransmissions, h.success)?;
        Ok(LinkResult {
            effective_sinr_db: g,
            expected_throughput: harq_expected_throughput(g, &self.bler, self.n_rt_max),
            blers: h.blers,
            retransmissions: h.retransmissions,
            success: h.success,
            spectral_efficiency: se,
            normalized_throughput: norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_stream;
    use proptest::prelude::*;

    fn data(name: &str) -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
    }

    fn qpsk() -> MiCurve {
        MiCurve::load_csv(&data("mi_q2.csv"), 2).unwrap()
    }

    fn mcs7() -> BlerCurve {
        let t = McsTable::load_csv(&data("mcs_table2.csv")).unwrap();
        BlerCurve::load(&data("bler_params.csv"), &t, 7).unwrap()
    }

    fn cmat(rows: usize, cols: usize, seed: u64) -> CMat {
        let mut rng = seed_stream(seed, &[0]);
        CMat::from_fn(rows, cols, |_, _| complex_gaussian(&mut rng, 1.0))
    }

    #[test]
    fn mi_tables_load_and_saturate() {
        for q in [2u32, 4, 6, 8] {
            let c = MiCurve::load_csv(&data(&format!("mi_q{q}.csv")), q).unwrap();
            assert!(c.mi_db(-200.0) < 1e-12);
            assert!((c.mi_db(200.0) - q as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn mcs7_parameters() {
        let t = McsTable::load_csv(&data("mcs_table2.csv")).unwrap();
        let e = t.get(7).unwrap();
        assert_eq!(e.q, 4);
        assert!((e.code_rate - 490.0 / 1024.0).abs() < 1e-9);
        assert!(matches!(t.get(99), Err(LinkError::UnknownMcs(99))));
    }

    #[test]
    fn mi_round_trip_on_grid_domain() {
        let c = MiCurve::load_csv(&data("mi_q4.csv"), 4).unwrap();
        let (lo, hi) = c.domain_db();
        let mut x = lo;
        while x < hi - 0.5 {
            assert!((c.inverse_db(c.mi_db(x)) - x).abs() < 0.01, "{x}");
            x += 0.37;
        }
    }

    #[test]
    fn bler_limits_and_slope() {
        let b = mcs7();
        assert_eq!(b.bler(f64::NEG_INFINITY), 1.0);
        assert!(b.bler(1e6) < 1e-300);
        assert!((b.bler(b.threshold_db) - 0.5).abs() < 1e-12);
        // slope 2 ln 9 per dB puts 90% and 10% half a dB either side
        assert!((b.bler(b.threshold_db - 0.5) - 0.9).abs() < 1e-4);
        assert!((b.bler(b.threshold_db + 0.5) - 0.1).abs() < 1e-4);
    }

    #[test]
    fn ideal_estimation_is_identity() {
        let h = ChannelTensor::from_raw(vec![0.0], vec![0.0, 1.0], 2, 2, (0..8).map(|k| Complex64::new(k as f64, 1.0)).collect()).unwrap();
        let mut rng = seed_stream(1, &[1]);
        let out = estimate_channel(&h, &EstimationConfig::default(), PilotRole::Dmrs, 0.3, &mut rng).unwrap();
        assert_eq!(out, h);
    }

    fn error_variance(a: &ChannelTensor, b: &ChannelTensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / a.data().len() as f64
    }

    #[test]
    fn bundle_four_halves_dmrs_error() {
        let h = ChannelTensor::from_raw(vec![0.0], (0..104).map(|k| k as f64).collect(), 4, 4, vec![Complex64::new(1.0, 0.0); 104 * 16]).unwrap();
        let mut e = [0.0; 2];
        for (i, b) in [2usize, 4].iter().enumerate() {
            let mut rng = seed_stream(5, &[*b as u64]);
            let mut acc = 0.0;
            for _ in 0..200 {
                acc += error_variance(&dmrs_estimate(&h, *b, 0.5, &mut rng), &h);
            }
            e[i] = acc / 200.0;
        }
        assert!((e[0] - 0.25).abs() < 0.01, "{}", e[0]);
        assert!((e[1] / e[0] - 0.5).abs() < 0.03, "{}", e[1] / e[0]);
    }

    #[test]
    fn epre_four_quarters_csi_rs_noise() {
        let h = ChannelTensor::zeros(vec![0.0], (0..100).map(|k| k as f64).collect(), 4, 8);
        let mut rng = seed_stream(6, &[0]);
        let base = EstimationConfig::practical(2, 1.0);
        let boosted = EstimationConfig::practical(2, 4.0);
        let mut e1 = 0.0;
        let mut e4 = 0.0;
        for _ in 0..100 {
            e1 += error_variance(&csi_rs_ls(&h, &base, 0.8, &mut rng), &h);
            e4 += error_variance(&csi_rs_ls(&h, &boosted, 0.8, &mut rng), &h);
        }
        assert!((e4 / e1 - 0.25).abs() < 0.01, "{}", e4 / e1);
    }

    #[test]
    fn wiener_smoothing_reduces_error_on_short_channel() {
        // two taps inside a 1 µs support, sampled every 30 kHz
        let freqs: Vec<f64> = (0..106).map(|j| (j as f64 - 52.5) * 30e3).collect();
        let mut rng = seed_stream(7, &[0]);
        let mut raw = 0.0;
        let mut smooth = 0.0;
        for _ in 0..20 {
            let a = complex_gaussian(&mut rng, 0.5);
            let b = complex_gaussian(&mut rng, 0.5);
            let data: Vec<Complex64> = freqs
                .iter()
                .map(|f| a + b * Complex64::from_polar(1.0, -2.0 * PI * f * 1e-6))
                .collect();
            let h = ChannelTensor::from_raw(vec![0.0], freqs.clone(), 1, 1, data).unwrap();
            let cfg = EstimationConfig {
                smoothing_support_s: 1e-6,
                ..EstimationConfig::practical(2, 1.0)
            };
            let ls = csi_rs_ls(&h, &cfg, 0.1, &mut rng);
            raw += error_variance(&ls, &h);
            smooth += error_variance(&wiener_smooth(&ls, cfg.smoothing_support_s, 0.1), &h);
        }
        assert!(smooth < 0.2 * raw, "{smooth} vs {raw}");
    }

    #[test]
    fn flat_correlation_matches_numeric_integral() {
        let t = 4.7e-6;
        for df in [0.0, 30e3, 360e3, 1.2e6] {
            let n = 20000;
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                let tau = (k as f64 + 0.5) / n as f64 * t;
                acc += Complex64::from_polar(1.0 / n as f64, -2.0 * PI * df * tau);
            }
            assert!((acc - flat_pdp_correlation(df, t)).norm() < 1e-6, "{df}");
        }
    }

    #[test]
    fn lmmse_matches_dense_oracle() {
        let g = cmat(4, 3, 11);
        let n = 0.3;
        let mut a = &g * g.adjoint();
        for i in 0..4 {
            a[(i, i)] += Complex64::new(n, 0.0);
        }
        let oracle = g.adjoint() * a.try_inverse().unwrap();
        assert!(crate::tensor::max_abs(&(lmmse_filter(&g, n) - oracle)) < 1e-10);
    }

    #[test]
    fn lmmse_limits() {
        let f = lmmse_filter(&CMat::identity(3, 3), 1e-12);
        assert!(crate::tensor::max_abs(&(f - CMat::identity(3, 3))) < 1e-9);
        let g = cmat(4, 2, 12);
        let n = 1e6;
        let f = lmmse_filter(&g, n);
        let mf = g.adjoint() / Complex64::new(n, 0.0);
        for (a, b) in f.iter().zip(mf.iter()) {
            assert!((a / b - 1.0).norm() < 1e-4);
        }
    }

    #[test]
    fn single_layer_matched_sinr() {
        let mut g = CMat::zeros(3, 1);
        g[(0, 0)] = Complex64::new(1.0, 0.0);
        let f = g.adjoint();
        let s = per_layer_sinr(&g, &f, 0.01);
        assert!((s[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_layers_get_equal_sinr() {
        let q = cmat(4, 4, 13).qr().q();
        let g = q.columns(0, 3).into_owned() * Complex64::new(2.0, 0.0);
        let s = per_layer_sinr(&g, &lmmse_filter(&g, 1e-6), 1e-6);
        for v in &s {
            assert!((v / s[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ideal_filter_dominates_perturbed() {
        let mut rng = seed_stream(14, &[0]);
        let n = 0.1;
        for k in 0..100 {
            let g = cmat(4, 2, 100 + k);
            let ideal = per_layer_sinr(&g, &lmmse_filter(&g, n), n);
            let noisy = CMat::from_fn(4, 2, |r, c| g[(r, c)] + complex_gaussian(&mut rng, 0.05));
            let pert = per_layer_sinr(&g, &lmmse_filter(&noisy, n), n);
            for l in 0..2 {
                assert!(ideal[l] >= pert[l] * (1.0 - 1e-12), "{k}");
            }
        }
    }

    #[test]
    fn miesm_fixed_point_and_bracket() {
        let c = qpsk();
        for db in [-10.0, 0.0, 7.5, 15.0] {
            let g = miesm_effective_sinr(&[db_to_lin(db); 12], &c);
            assert!((g - db).abs() < 0.01, "{db} -> {g}");
        }
        let mixed = [1.0, 10.0];
        let g = miesm_effective_sinr(&mixed, &c);
        assert!(g > 0.0 && g < 10.0);
    }

    #[test]
    fn miesm_mixed_qpsk_matches_curve_oracle() {
        // independent evaluation straight from the samples and a bisection inverse
        let path = data("mi_q2.csv");
        let rows: Vec<(f64, f64)> = csv::Reader::from_path(&path)
            .unwrap()
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[0].parse().unwrap(), r[1].parse().unwrap())
            })
            .collect();
        let lookup = |x: f64| {
            let i = rows.iter().position(|r| r.0 > x).unwrap();
            let (x0, y0) = rows[i - 1];
            let (x1, y1) = rows[i];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        let target = 0.5 * (lookup(0.0) + lookup(10.0));
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if lookup(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let got = miesm_effective_sinr(&[1.0, 10.0], &qpsk());
        assert!((got - lo).abs() < 1e-6, "{got} vs {lo}");
    }

    #[test]
    fn chase_gain_and_harq_edges() {
        assert!((chase_gain_db(1) - 3.0103).abs() < 1e-4);
        let b = mcs7();
        let mut rng = seed_stream(15, &[0]);
        for _ in 0..100 {
            let h = harq_chase(1e3, &b, 4, &mut rng);
            assert_eq!((h.retransmissions, h.success), (0, true));
        }
        let h = harq_chase(-1e3, &b, 4, &mut rng);
        assert_eq!(h.blers.len(), 4);
        assert_eq!((h.retransmissions, h.success), (3, false));
        assert_eq!(harq_expected_throughput(-1e3, &b, 4), 0.0);
        assert!((harq_expected_throughput(1e3, &b, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn harq_expectation_matches_sampling() {
        let b = mcs7();
        let table = McsTable::load_csv(&data("mcs_table2.csv")).unwrap();
        let mut rng = seed_stream(16, &[0]);
        for g in [3.0, 5.0, 6.0] {
            let n = 20000;
            let mut acc = 0.0;
            for _ in 0..n {
                let h = harq_chase(g, &b, 4, &mut rng);
                acc += spectral_efficiency(&table, 7, 4, h.retransmissions, h.success).unwrap().1;
            }
            let e = harq_expected_throughput(g, &b, 4);
            assert!((acc / n as f64 - e).abs() < 0.01, "{g}: {} vs {e}", acc / n as f64);
        }
    }

    #[test]
    fn harq_success_nondecreasing_in_sinr() {
        let b = mcs7();
        let mut last = -1.0;
        for k in 0..12 {
            let g = b.threshold_db - 8.0 + k as f64;
            let mut rng = seed_stream(17, &[k]);
            let wins = (0..10_000).filter(|_| harq_chase(g, &b, 4, &mut rng).success).count() as f64 / 1e4;
            // one binomial sigma of slack at p = 0.5 over 10⁴ trials
            assert!(wins >= last - 0.005, "{g}");
            last = wins;
        }
    }

    #[test]
    fn spectral_efficiency_cases() {
        let t = McsTable::load_csv(&data("mcs_table2.csv")).unwrap();
        let (se, n) = spectral_efficiency(&t, 7, 4, 0, true).unwrap();
        assert!((se - 4.0 * 4.0 * 490.0 / 1024.0).abs() < 1e-9);
        assert_eq!(n, 1.0);
        assert_eq!(spectral_efficiency(&t, 7, 4, 1, true).unwrap().1, 0.5);
        assert_eq!(spectral_efficiency(&t, 7, 4, 3, false).unwrap(), (0.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn miesm_monotone(base in proptest::collection::vec(-20.0f64..30.0, 1..20), idx in 0usize..20, bump in 0.0f64..10.0) {
            let c = qpsk();
            let lin: Vec<f64> = base.iter().map(|&d| db_to_lin(d)).collect();
            let mut up = lin.clone();
            let i = idx % up.len();
            up[i] *= db_to_lin(bump);
            let a = miesm_effective_sinr(&lin, &c);
            let b = miesm_effective_sinr(&up, &c);
            prop_assert!(b >= a - 1e-12);
            // the curve saturates at the top of its sampled domain
            let top = c.domain_db().1;
            let lo = base.iter().cloned().fold(f64::INFINITY, f64::min).min(top);
            let hi = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(top);
            prop_assert!(a >= lo - 0.01 && a <= hi + 0.01);
        }

        #[test]
        fn sinr_invariant_to_common_rotation(seed in 0u64..1000, n in 0.01f64..1.0) {
            let g = cmat(4, 3, seed);
            let ghat = cmat(4, 3, seed + 5000) * Complex64::new(0.1, 0.0) + &g;
            let u = cmat(4, 4, seed + 9000).qr().q();
            let a = per_layer_sinr(&g, &lmmse_filter(&ghat, n), n);
            let b = per_layer_sinr(&(&u * &g), &lmmse_filter(&(&u * &ghat), n), n);
            for l in 0..3 {
                prop_assert!((a[l] - b[l]).abs() < 1e-9 * a[l].max(1.0));
            }
        }
    }
}
