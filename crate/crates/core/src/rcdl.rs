//! Reduced CDL derivation.
//!
//! Starting from a full CDL table the reduction
//! 1. measures the ray-level circular angular spreads of the base table,
//! 2. scales cluster mean angles and per-cluster spreads to the target spreads,
//! 3. couples the ray angles and polarization phases with fixed tables,
//! 4. ranks clusters by received power through the antenna patterns and the
//!    virtualizer and keeps the strongest ones,
//! 5. rescales the delays of the kept clusters to the target delay spread.
//!
//! Angular scaling happens once, before truncation. The spread drift caused
//! by dropping clusters is reported, not corrected.

use crate::cdl::{cluster_power_probe, ray_angles, AngleKind, CdlError, CdlLink, ClusterTable, CouplingMode, FixedRayData, RaySet};
use crate::geometry::wrap_deg;
use crate::tdl::rms_delay_spread;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RcdlError {
    #[error("total power is zero")]
    ZeroPower,
    #[error("angular spread is zero, cannot scale to {0} deg")]
    ZeroSpread(f64),
    #[error("delay profile has zero rms spread")]
    DegenerateDelayProfile,
    #[error("cannot keep {keep} of {total} clusters")]
    InvalidKeep { keep: usize, total: usize },
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error(transparent)]
    Cdl(#[from] CdlError),
}

/// Desired ray-level spreads (deg) and rms delay spread (ns).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadTargets {
    pub asd_deg: f64,
    pub asa_deg: f64,
    pub zsd_deg: f64,
    pub zsa_deg: f64,
    pub ds_ns: f64,
}

impl SpreadTargets {
    pub fn load(path: &Path) -> Result<Self, RcdlError> {
        let err = |m: String| CdlError::Load {
            path: path.display().to_string(),
            msg: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), RcdlError> {
        if [self.asd_deg, self.asa_deg, self.zsd_deg, self.zsa_deg, self.ds_ns]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(RcdlError::InvalidTargets(format!("{self:?}")))
        }
    }

    pub fn angular(&self) -> [f64; 4] {
        [self.asd_deg, self.asa_deg, self.zsd_deg, self.zsa_deg]
    }
}

/// Outcome of cluster truncation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    /// Base-table cluster ids kept, in table order.
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    /// rms delay spread of the kept clusters before and after rescaling.
    pub ds_truncated_ns: f64,
    pub ds_final_ns: f64,
    /// Ray-level spreads `[ASD, ASA, ZSD, ZSA]` before and after truncation.
    pub spreads_before_deg: [f64; 4],
    pub spreads_after_deg: [f64; 4],
    /// Per-cluster probe power, base table order.
    pub probe_power: Vec<f64>,
}

/// Power-weighted circular spread `sqrt(−2 ln |Σ P e^{jφ} / Σ P|)` and mean
/// direction, both in degrees.
pub fn angular_spread(powers: &[f64], angles_deg: &[f64]) -> Result<(f64, f64), RcdlError> {
    let total: f64 = powers.iter().sum();
    if !(total > 0.0) {
        return Err(RcdlError::ZeroPower);
    }
    let z: Complex64 = powers
        .iter()
        .zip(angles_deg)
        .map(|(p, a)| Complex64::from_polar(*p, a.to_radians()))
        .sum::<Complex64>()
        / total;
    let r = z.norm().min(1.0);
    let spread = (-2.0 * r.ln()).max(0.0).sqrt().to_degrees();
    Ok((spread, z.arg().to_degrees()))
}

/// `wrap((AS_desired/AS) · wrap(φ − μ) + μ)`.
pub fn scale_angles(angles_deg: &[f64], spread: f64, mu: f64, desired: f64) -> Result<Vec<f64>, RcdlError> {
    if spread == 0.0 {
        if desired == 0.0 {
            return Ok(angles_deg.iter().map(|a| wrap_deg(*a)).collect());
        }
        return Err(RcdlError::ZeroSpread(desired));
    }
    let r = desired / spread;
    Ok(angles_deg.iter().map(|a| wrap_deg(r * wrap_deg(a - mu) + mu)).collect())
}

/// `τ · DS_desired / DS(τ, P)`.
pub fn rescale_delays(delays: &[f64], powers: &[f64], ds_desired: f64) -> Result<Vec<f64>, RcdlError> {
    let ds = rms_delay_spread(delays, powers);
    if !(ds > 0.0) {
        return Err(RcdlError::DegenerateDelayProfile);
    }
    Ok(delays.iter().map(|d| d * ds_desired / ds).collect())
}

/// Ray-level spreads of all four angle families.
pub fn table_spreads(table: &ClusterTable) -> Result<[(f64, f64); 4], RcdlError> {
    let mut out = [(0.0, 0.0); 4];
    for k in AngleKind::ALL {
        let (p, a) = table.ray_powers_and_angles(k);
        out[k as usize] = angular_spread(&p, &a)?;
    }
    Ok(out)
}

/// Scales cluster means and per-cluster spreads of every family so the
/// ray-level spreads hit the targets.
pub fn scale_table(table: &ClusterTable, targets: &[f64; 4]) -> Result<ClusterTable, RcdlError> {
    let spreads = table_spreads(table)?;
    let mut out = table.clone();
    for k in AngleKind::ALL {
        let i = k as usize;
        let (s, mu) = spreads[i];
        out.angles[i] = scale_angles(&table.angles[i], s, mu, targets[i])?;
        out.spreads[i] = if s == 0.0 { table.spreads[i] } else { table.spreads[i] * targets[i] / s };
    }
    Ok(out)
}

/// Keeps the `n_keep` clusters with the largest probe power (ties: lower
/// index first), preserving table order, and renormalizes powers.
pub fn truncate_clusters(
    table: &ClusterTable,
    n_keep: usize,
    link: &CdlLink,
    mode: CouplingMode,
) -> Result<(ClusterTable, ReductionReport), RcdlError> {
    let n = table.n_clusters();
    if n_keep == 0 || n_keep > n {
        return Err(RcdlError::InvalidKeep { keep: n_keep, total: n });
    }
    let rays = ray_angles(table, mode)?;
    let probe = cluster_power_probe(table, &rays, link)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probe[b].total_cmp(&probe[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order[..n_keep].to_vec();
    keep.sort_unstable();

    let total: f64 = keep.iter().map(|&i| table.powers[i]).sum();
    if !(total > 0.0) {
        return Err(RcdlError::ZeroPower);
    }
    let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let out = ClusterTable {
        ids: keep.iter().map(|&i| table.ids[i]).collect(),
        delays_s: pick(&table.delays_s),
        powers: keep.iter().map(|&i| table.powers[i] / total).collect(),
        angles: [pick(&table.angles[0]), pick(&table.angles[1]), pick(&table.angles[2]), pick(&table.angles[3])],
        spreads: table.spreads,
        xpr_db: table.xpr_db,
        ray_offsets: table.ray_offsets.clone(),
    };
    let before = table_spreads(table)?;
    let after = table_spreads(&out)?;
    let ds = out.rms_delay_spread() * 1e9;
    let report = ReductionReport {
        kept: out.ids.clone(),
        removed: (0..n).filter(|i| !keep.contains(i)).map(|i| table.ids[i]).collect(),
        ds_truncated_ns: ds,
        ds_final_ns: ds,
        spreads_before_deg: before.map(|s| s.0),
        spreads_after_deg: after.map(|s| s.0),
        probe_power: probe,
    };
    Ok((out, report))
}

/// Result of the full reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct RcdlBuild {
    pub table: ClusterTable,
    pub rays: RaySet,
    pub report: ReductionReport,
}

/// Runs the whole reduction: spreads, scaling, fixed coupling, truncation
/// and delay rescaling. Pure function of its inputs.
pub fn build_rcdl(
    base: &ClusterTable,
    targets: &SpreadTargets,
    fixed: &FixedRayData,
    link: &CdlLink,
    n_keep: usize,
) -> Result<RcdlBuild, RcdlError> {
    base.validate()?;
    targets.validate()?;
    let scaled = scale_table(base, &targets.angular())?;
    let (mut table, mut report) = truncate_clusters(&scaled, n_keep, link, CouplingMode::Fixed(fixed))?;
    table.delays_s = rescale_delays(&table.delays_s, &table.powers, targets.ds_ns * 1e-9)?;
    report.ds_final_ns = table.rms_delay_spread() * 1e9;
    let dev: Vec<String> = AngleKind::ALL
        .iter()
        .map(|k| {
            let i = *k as usize;
            format!("{} {:+.1}%", k.name(), 100.0 * (report.spreads_after_deg[i] / targets.angular()[i] - 1.0))
        })
        .collect();
    log::info!("rCDL kept clusters {:?}; spread deviation after truncation: {}", report.kept, dev.join(", "));
    let rays = ray_angles(&table, CouplingMode::Fixed(fixed))?;
    Ok(RcdlBuild { table, rays, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn concentrated_rays() {
        let (s, mu) = angular_spread(&[1.0, 2.0, 3.0], &[37.0, 37.0, 37.0]).unwrap();
        assert!(s < 1e-6);
        assert!((mu - 37.0).abs() < 1e-12);
        assert!(matches!(angular_spread(&[0.0, 0.0], &[1.0, 2.0]), Err(RcdlError::ZeroPower)));
    }

    #[test]
    fn two_rays_small_angle() {
        for x in [0.1f64, 0.5, 1.0, 2.0] {
            let (s, mu) = angular_spread(&[1.0, 1.0], &[x, -x]).unwrap();
            // |z| = cos x, so AS = sqrt(−2 ln cos x) → x
            let brute = (-2.0 * x.to_radians().cos().ln()).sqrt().to_degrees();
            assert!((s - brute).abs() < 1e-9);
            assert!((s - x).abs() / x < 1e-3);
            assert!(mu.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spread_scaling() {
        assert!(matches!(scale_angles(&[1.0], 0.0, 1.0, 5.0), Err(RcdlError::ZeroSpread(_))));
        assert_eq!(scale_angles(&[190.0], 0.0, 1.0, 0.0).unwrap(), vec![-170.0]);
    }

    #[test]
    fn identity_scaling() {
        let a = [10.0, -50.0, 120.0, 179.0];
        let out = scale_angles(&a, 30.0, 15.0, 30.0).unwrap();
        for (x, y) in a.iter().zip(&out) {
            assert!((wrap_deg(x - y)).abs() < 1e-9);
        }
    }

    #[test]
    fn halving_spread() {
        let p = [0.3, 0.2, 0.25, 0.15, 0.1];
        let a = [-12.0, 3.0, 8.0, 20.0, -4.0];
        let (s, mu) = angular_spread(&p, &a).unwrap();
        let scaled = scale_angles(&a, s, mu, s / 2.0).unwrap();
        let (s2, mu2) = angular_spread(&p, &scaled).unwrap();
        assert!((s2 / (s / 2.0) - 1.0).abs() < 0.01);
        // circular mean is preserved to first order; the linear mean exactly
        assert!((mu2 - mu).abs() < 0.01);
        let lin = |v: &[f64]| v.iter().zip(&p).map(|(x, w)| x * w).sum::<f64>();
        assert!((lin(&scaled) - (0.5 * lin(&a) + 0.5 * mu)).abs() < 1e-9);
    }

    #[test]
    fn two_point_delay_rescale() {
        let t = 100e-9;
        let out = rescale_delays(&[0.0, 2.0 * t], &[1.0, 1.0], 365e-9).unwrap();
        assert!(out[0].abs() < 1e-18);
        assert!((out[1] - 730e-9).abs() < 1e-15);
        assert!(matches!(rescale_delays(&[5e-9, 5e-9], &[1.0, 1.0], 1e-7), Err(RcdlError::DegenerateDelayProfile)));
        let d = [0.0, 1e-7, 4e-7];
        let p = [0.5, 0.3, 0.2];
        let same = rescale_delays(&d, &p, rms_delay_spread(&d, &p)).unwrap();
        for (a, b) in d.iter().zip(&same) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    proptest! {
        #[test]
        fn spread_shift_invariance(
            p in proptest::collection::vec(0.01f64..1.0, 2..12),
            base in proptest::collection::vec(-60.0f64..60.0, 12),
            shift in -180.0f64..180.0,
        ) {
            let a = &base[..p.len()];
            let (s, mu) = angular_spread(&p, a).unwrap();
            let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let (s2, mu2) = angular_spread(&p, &shifted).unwrap();
            prop_assert!((s - s2).abs() < 1e-7);
            prop_assert!(wrap_deg(mu2 - mu - shift).abs() < 1e-7);
        }

        #[test]
        fn scaling_inverts(
            a in proptest::collection::vec(-40.0f64..40.0, 1..10),
            r in 0.3f64..3.0,
        ) {
            let mu = 5.0;
            let s = 10.0;
            let fwd = scale_angles(&a, s, mu, s * r).unwrap();
            let back = scale_angles(&fwd, s * r, mu, s).unwrap();
            for (x, y) in a.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn rescale_is_exact(
            d in proptest::collection::vec(0.0f64..3e-6, 3..10),
            p in proptest::collection::vec(0.01f64..1.0, 10),
            target in 1e-8f64..1e-6,
        ) {
            let p = &p[..d.len()];
            prop_assume!(rms_delay_spread(&d, p) > 1e-12);
            let out = rescale_delays(&d, p, target).unwrap();
            prop_assert!((rms_delay_spread(&out, p) / target - 1.0).abs() < 1e-12);
        }
    }
}
