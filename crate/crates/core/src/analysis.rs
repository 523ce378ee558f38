//! Spatial and eigenmode diagnostics.
//!
//! Bartlett profiles scan steering vectors of a uniform linear array over
//! the receive ports; the decorrelation curve tracks how fast those profiles
//! change. Per-layer SINR reports cover both exact SVD transmission and a
//! given precoder with an LMMSE receiver.

use crate::csi::{Precoder, SubbandLayout};
use crate::linkabs::{lmmse_filter, per_layer_sinr};
use crate::tensor::ChannelTensor;
use num_complex::Complex64;
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {rank} exceeds min(rx, tx) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `1°` steps over `[−90°, 90°]`.
pub fn default_azimuth_grid() -> Vec<f64> {
    (-90..=90).map(f64::from).collect()
}

/// Bartlett power per `(time, RE, azimuth)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialProfile {
    pub azimuth_deg: Vec<f64>,
    pub times: Vec<f64>,
    /// Frequency indices of the source tensor.
    pub re_indices: Vec<usize>,
    /// Row-major `(time, RE, azimuth)`, dB.
    pub power_db: Vec<f64>,
    /// Grid index of the maximum, row-major `(time, RE)`.
    pub peaks: Vec<usize>,
}

impl SpatialProfile {
    pub fn n_az(&self) -> usize {
        self.azimuth_deg.len()
    }

    pub fn n_re(&self) -> usize {
        self.re_indices.len()
    }

    pub fn power(&self, t: usize, re: usize) -> &[f64] {
        let k = (t * self.n_re() + re) * self.n_az();
        &self.power_db[k..k + self.n_az()]
    }

    pub fn peak_deg(&self, t: usize, re: usize) -> f64 {
        self.azimuth_deg[self.peaks[t * self.n_re() + re]]
    }

    /// Standard deviation of the peak azimuth over all times and REs.
    pub fn peak_std_deg(&self) -> f64 {
        let v: Vec<f64> = self.peaks.iter().map(|&i| self.azimuth_deg[i]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// Local maxima within `floor_db` of the global maximum of one slice.
    pub fn local_peaks(&self, t: usize, re: usize, floor_db: f64) -> Vec<usize> {
        let p = self.power(t, re);
        let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0..p.len())
            .filter(|&i| {
                let left = i == 0 || p[i] > p[i - 1];
                let right = i + 1 == p.len() || p[i] >= p[i + 1];
                left && right && p[i] >= top - floor_db
            })
            .collect()
    }
}

/// ULA steering vector `a_k(φ) = e^{j2π d k sin φ}`.
pub fn steering_vector(n: usize, spacing: f64, az_deg: f64) -> Vec<Complex64> {
    let s = 2.0 * PI * spacing * az_deg.to_radians().sin();
    (0..n).map(|k| Complex64::from_polar(1.0, s * k as f64)).collect()
}

/// `P(φ,t,f) = (1/N_T) Σ_s |a(φ)ᴴ h(t,f,·,s)|² / N_R`, in dB.
pub fn bartlett_profile(h: &ChannelTensor, azimuth_deg: &[f64], spacing: f64) -> Result<SpatialProfile, AnalysisError> {
    let n_rx = h.n_rx();
    if n_rx < 2 {
        return Err(AnalysisError::ShapeMismatch(format!("Bartlett scan needs at least 2 rx ports, got {n_rx}")));
    }
    if azimuth_deg.is_empty() || azimuth_deg.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::ShapeMismatch("azimuth grid must be non-empty and strictly increasing".into()));
    }
    let steer: Vec<Vec<Complex64>> = azimuth_deg.iter().map(|&a| steering_vector(n_rx, spacing, a)).collect();
    let n_tx = h.n_tx();
    let norm = 1.0 / (n_tx * n_rx) as f64;
    let mut power_db = Vec::with_capacity(h.n_times() * h.n_freqs() * azimuth_deg.len());
    let mut peaks = Vec::with_capacity(h.n_times() * h.n_freqs());
    for t in 0..h.n_times() {
        for f in 0..h.n_freqs() {
            let m = h.slice(t, f);
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, a) in steer.iter().enumerate() {
                let mut p = 0.0;
                for s in 0..n_tx {
                    let y: Complex64 = (0..n_rx).map(|r| a[r].conj() * m[r * n_tx + s]).sum();
                    p += y.norm_sqr();
                }
                let db = 10.0 * (p * norm).max(1e-300).log10();
                if db > best.0 {
                    best = (db, i);
                }
                power_db.push(db);
            }
            peaks.push(best.1);
        }
    }
    Ok(SpatialProfile {
        azimuth_deg: azimuth_deg.to_vec(),
        times: h.times().to_vec(),
        re_indices: (0..h.n_freqs()).collect(),
        power_db,
        peaks,
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    let scale = 1e-24 * (ma.abs() + mb.abs()).powi(2) * n;
    match (saa <= scale, sbb <= scale) {
        (true, true) => 1.0,
        (false, false) => sab / (saa * sbb).sqrt(),
        _ => 0.0,
    }
}

/// Correlation between the profile at the reference time and each later
/// sample, averaged over REs: `(lag in s, ρ)`.
///
/// `ρ` is the Pearson coefficient of the linear-power profiles along
/// azimuth. Removing the mean keeps the common power floor of the steering
/// sidelobes from reading as similarity.
pub fn profile_decorrelation(p: &SpatialProfile, reference_time: f64) -> Vec<(f64, f64)> {
    if p.times.is_empty() {
        return Vec::new();
    }
    let t0 = (0..p.times.len())
        .min_by(|&a, &b| (p.times[a] - reference_time).abs().total_cmp(&(p.times[b] - reference_time).abs()))
        .expect("non-empty");
    let lin = |t: usize, re: usize| -> Vec<f64> { p.power(t, re).iter().map(|d| 10f64.powf(d / 10.0)).collect() };
    let refs: Vec<Vec<f64>> = (0..p.n_re()).map(|re| lin(t0, re)).collect();
    (t0..p.times.len())
        .map(|t| {
            let rho = (0..p.n_re()).map(|re| pearson(&refs[re], &lin(t, re))).sum::<f64>() / p.n_re() as f64;
            (p.times[t] - p.times[t0], rho)
        })
        .collect()
}

/// Pointwise mean of decorrelation curves sharing one lag grid.
pub fn mean_curve(curves: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|k| (curves[0][k].0, curves.iter().map(|c| c[k].1).sum::<f64>() / curves.len() as f64))
        .collect()
}

/// Linear interpolation of a curve at `x`.
pub fn curve_at(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let i = curve.iter().position(|p| p.0 >= x)?;
    if i == 0 {
        return Some(curve[0].1);
    }
    let (x0, y0) = curve[i - 1];
    let (x1, y1) = curve[i];
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOrdering {
    /// Layer `l` is the `l`-th largest singular value.
    SingularValue,
    /// Layer `l` is column `l` of a precoder.
    Precoder,
}

/// Per-layer SINR samples (dB) with the drop each sample came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenmodeReport {
    pub ordering: LayerOrdering,
    pub layers: Vec<Vec<f64>>,
    pub drops: Vec<usize>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 || s[n / 2 - 1] == s[n / 2] {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl EigenmodeReport {
    pub fn new(ordering: LayerOrdering, rank: usize) -> Self {
        Self {
            ordering,
            layers: vec![Vec::new(); rank],
            drops: Vec::new(),
        }
    }

    pub fn medians(&self) -> Vec<f64> {
        self.layers.iter().map(|l| median(l)).collect()
    }

    /// Strongest minus weakest layer median, dB.
    pub fn spread_db(&self) -> f64 {
        let m = self.medians();
        let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    pub fn merge(&mut self, other: &EigenmodeReport) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.extend_from_slice(b);
        }
        self.drops.extend_from_slice(&other.drops);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "drop,layer,sinr_db")?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, v) in layer.iter().enumerate() {
                writeln!(w, "{},{},{}", self.drops[k], l, v)?;
            }
        }
        Ok(())
    }
}

/// `(P/σ²)·σ_l²` for every `(t, f)`, layers ordered by singular value.
/// A zero singular value yields `−∞`.
pub fn svd_layer_sinr(h: &ChannelTensor, rank: usize, snr_db: f64, drop: usize) -> Result<EigenmodeReport, AnalysisError> {
    let max = h.n_rx().min(h.n_tx());
    if rank == 0 || rank > max {
        return Err(AnalysisError::RankTooLarge { rank, max });
    }
    let mut out = EigenmodeReport::new(LayerOrdering::SingularValue, rank);
    for t in 0..h.n_times() {
        for f in 0..h.n_freqs() {
            let mut sv: Vec<f64> = h.matrix(t, f).singular_values().iter().cloned().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            let top = sv[0];
            for l in 0..rank {
                // numerically zero relative to the strongest mode
                let s = if sv[l] <= 1e-12 * top { 0.0 } else { sv[l] };
                out.layers[l].push(snr_db + 20.0 * s.log10());
            }
            out.drops.push(drop);
        }
    }
    Ok(out)
}

/// Per-layer LMMSE SINR of the precoded channel at time index `t`, one
/// sample per frequency (PRB). The receiver knows the channel.
pub fn precoded_layer_sinr(
    h: &ChannelTensor,
    t: usize,
    precoder: &Precoder,
    layout: &SubbandLayout,
    snr_db: f64,
    drop: usize,
) -> Result<EigenmodeReport, AnalysisError> {
    if precoder.n_ports() != h.n_tx() || layout.n_prb != h.n_freqs() {
        return Err(AnalysisError::ShapeMismatch(format!(
            "precoder for {} ports on {} tx, layout {} PRBs on {} frequencies",
            precoder.n_ports(),
            h.n_tx(),
            layout.n_prb,
            h.n_freqs()
        )));
    }
    let nv = 10f64.powf(-snr_db / 10.0);
    let mut out = EigenmodeReport::new(LayerOrdering::Precoder, precoder.rank());
    for j in 0..h.n_freqs() {
        let g = h.matrix(t, j) * precoder.for_prb(j, layout.prb_per_sb);
        for (l, s) in per_layer_sinr(&g, &lmmse_filter(&g, nv), nv).into_iter().enumerate() {
            out.layers[l].push(10.0 * s.log10());
        }
        out.drops.push(drop);
    }
    Ok(out)
}

pub fn write_profile_csv<W: Write>(p: &SpatialProfile, mut w: W) -> std::io::Result<()> {
    writeln!(w, "time_ms,re_index,azimuth_deg,power_db")?;
    for t in 0..p.times.len() {
        for re in 0..p.n_re() {
            for (i, v) in p.power(t, re).iter().enumerate() {
                writeln!(w, "{},{},{},{}", p.times[t] * 1e3, p.re_indices[re], p.azimuth_deg[i], v)?;
            }
        }
    }
    Ok(())
}
