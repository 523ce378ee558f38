//! Clustered delay line channels.
//!
//! The element-level coefficient of cluster `n` between rx element `u`
//! and tx element `s` is the sum over its `M` rays of
//! `√(P_n/M) · F_rxᵀ · M_pol · F_tx · a_rx · a_tx · e^{j2π ν t}`, with
//! fields in the GCS, per-ray polarization coupling `M_pol`, array phasors
//! `a` evaluated in each panel's LCS′ and the Doppler term `ν` set by the
//! UE velocity. Ports are formed from elements afterwards through the
//! configured virtualizer.
//!
//! Downlink convention: the BS transmits and the UE receives, so departure
//! angles belong to the BS panel and arrival angles to the UE panel.

use crate::antenna::{apply_aav, element_field, element_position, AntennaError, PanelConfig, PortMap};
use crate::geometry::{composite_rotation, unit_direction, wrap_deg, Orientation, PolarizationModel, SphericalDirection};
use crate::seed::{role, seed_stream};
use crate::tensor::{CMat, ChannelTensor};
use nalgebra::{Matrix2, Vector2, Vector3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum CdlError {
    #[error("fixed coupling requested but cluster {cluster} has no {what} entry")]
    MissingCouplingTable { cluster: usize, what: &'static str },
    #[error("invalid cluster table: {0}")]
    InvalidTable(String),
    #[error("cannot read {path}: {msg}")]
    Load { path: String, msg: String },
    #[error(transparent)]
    Antenna(#[from] AntennaError),
}

/// The four angle families of a cluster, in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleKind {
    Aod = 0,
    Aoa = 1,
    Zod = 2,
    Zoa = 3,
}

impl AngleKind {
    pub const ALL: [AngleKind; 4] = [AngleKind::Aod, AngleKind::Aoa, AngleKind::Zod, AngleKind::Zoa];

    pub fn name(self) -> &'static str {
        match self {
            AngleKind::Aod => "aod",
            AngleKind::Aoa => "aoa",
            AngleKind::Zod => "zod",
            AngleKind::Zoa => "zoa",
        }
    }
}

/// Cluster parameters. `ids` keep the base-table cluster numbers (1-based)
/// so that fixed ray data stays addressable after truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTable {
    pub ids: Vec<usize>,
    pub delays_s: Vec<f64>,
    pub powers: Vec<f64>,
    /// Mean angles in degrees, indexed by [`AngleKind`].
    pub angles: [Vec<f64>; 4],
    /// Per-cluster spreads `c_ASD, c_ASA, c_ZSD, c_ZSA` in degrees.
    pub spreads: [f64; 4],
    pub xpr_db: f64,
    /// Ray offset angles α_m in degrees.
    pub ray_offsets: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct ClusterRow {
    cluster: usize,
    delay_ns: f64,
    power_db: f64,
    aod_deg: f64,
    aoa_deg: f64,
    zod_deg: f64,
    zoa_deg: f64,
}

impl ClusterTable {
    pub fn n_clusters(&self) -> usize {
        self.ids.len()
    }

    pub fn n_rays(&self) -> usize {
        self.ray_offsets.len()
    }

    pub fn validate(&self) -> Result<(), CdlError> {
        let n = self.ids.len();
        if n == 0 {
            return Err(CdlError::InvalidTable("no clusters".into()));
        }
        if self.delays_s.len() != n || self.powers.len() != n || self.angles.iter().any(|a| a.len() != n) {
            return Err(CdlError::InvalidTable("column lengths differ".into()));
        }
        if self.delays_s.iter().any(|d| !(*d >= 0.0)) {
            return Err(CdlError::InvalidTable("delays must be >= 0".into()));
        }
        let s: f64 = self.powers.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.powers.iter().any(|p| !(*p >= 0.0)) {
            return Err(CdlError::InvalidTable(format!("powers must be non-negative and sum to 1 (sum {s})")));
        }
        if self.ray_offsets.is_empty() {
            return Err(CdlError::InvalidTable("no ray offsets".into()));
        }
        if self.spreads.iter().any(|c| !(*c >= 0.0)) || self.angles.iter().flatten().any(|a| !a.is_finite()) {
            return Err(CdlError::InvalidTable("spreads must be >= 0 and angles finite".into()));
        }
        if self.xpr_db.is_nan() {
            return Err(CdlError::InvalidTable("xpr is NaN".into()));
        }
        Ok(())
    }

    /// Loads the CSV format: `# key=value` header lines for the spreads,
    /// XPR and ray offsets, then the cluster columns. Powers are
    /// normalized to unit sum.
    pub fn load_csv(path: &Path) -> Result<Self, CdlError> {
        let load_err = |msg: String| CdlError::Load {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            if let Some(body) = line.trim().strip_prefix('#') {
                if let Some((k, v)) = body.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
        }
        let num = |key: &str| -> Result<f64, CdlError> {
            header
                .get(key)
                .ok_or_else(|| load_err(format!("missing header `{key}`")))?
                .parse::<f64>()
                .map_err(|e| load_err(format!("header `{key}`: {e}")))
        };
        let spreads = [num("c_asd_deg")?, num("c_asa_deg")?, num("c_zsd_deg")?, num("c_zsa_deg")?];
        let xpr_db = num("xpr_db")?;
        let ray_offsets = header
            .get("ray_offsets")
            .ok_or_else(|| load_err("missing header `ray_offsets`".into()))?
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| load_err(format!("ray_offsets: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;

        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for r in rdr.deserialize::<ClusterRow>() {
            rows.push(r.map_err(|e| load_err(e.to_string()))?);
        }
        let lin: Vec<f64> = rows.iter().map(|r| 10f64.powf(r.power_db / 10.0)).collect();
        let total: f64 = lin.iter().sum();
        let t = Self {
            ids: rows.iter().map(|r| r.cluster).collect(),
            delays_s: rows.iter().map(|r| r.delay_ns * 1e-9).collect(),
            powers: lin.iter().map(|p| p / total).collect(),
            angles: [
                rows.iter().map(|r| r.aod_deg).collect(),
                rows.iter().map(|r| r.aoa_deg).collect(),
                rows.iter().map(|r| r.zod_deg).collect(),
                rows.iter().map(|r| r.zoa_deg).collect(),
            ],
            spreads,
            xpr_db,
            ray_offsets,
        };
        t.validate()?;
        Ok(t)
    }

    /// Writes the table in the format read by [`ClusterTable::load_csv`].
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let keys = ["c_asd_deg", "c_asa_deg", "c_zsd_deg", "c_zsa_deg"];
        for (k, c) in keys.iter().zip(self.spreads) {
            writeln!(w, "# {k}={c:.9}")?;
        }
        writeln!(w, "# xpr_db={}", self.xpr_db)?;
        let offs: Vec<String> = self.ray_offsets.iter().map(|o| o.to_string()).collect();
        writeln!(w, "# ray_offsets={}", offs.join(","))?;
        writeln!(w, "cluster,delay_ns,power_db,aod_deg,aoa_deg,zod_deg,zoa_deg")?;
        for i in 0..self.n_clusters() {
            writeln!(
                w,
                "{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9}",
                self.ids[i],
                self.delays_s[i] * 1e9,
                10.0 * self.powers[i].log10(),
                self.angles[0][i],
                self.angles[1][i],
                self.angles[2][i],
                self.angles[3][i]
            )?;
        }
        Ok(())
    }

    pub fn rms_delay_spread(&self) -> f64 {
        crate::tdl::rms_delay_spread(&self.delays_s, &self.powers)
    }

    /// Ray angle `mean + c · α_m` in degrees, before coupling.
    pub fn ray_angle(&self, kind: AngleKind, cluster: usize, offset_idx: usize) -> f64 {
        self.angles[kind as usize][cluster] + self.spreads[kind as usize] * self.ray_offsets[offset_idx]
    }

    /// Per-ray powers `P_n / M` and uncoupled ray angles of one family.
    pub fn ray_powers_and_angles(&self, kind: AngleKind) -> (Vec<f64>, Vec<f64>) {
        let m = self.n_rays();
        let mut p = Vec::with_capacity(self.n_clusters() * m);
        let mut a = Vec::with_capacity(self.n_clusters() * m);
        for n in 0..self.n_clusters() {
            for k in 0..m {
                p.push(self.powers[n] / m as f64);
                a.push(self.ray_angle(kind, n, k));
            }
        }
        (p, a)
    }
}

/// Fixed ray couplings and polarization phases keyed by base cluster id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixedRayData {
    /// 1-based offset index used by ray `m` for each angle family.
    pub coupling: BTreeMap<usize, [Vec<usize>; 4]>,
    /// Phases `(θθ, θφ, φθ, φφ)` in degrees per ray.
    pub phases_deg: BTreeMap<usize, Vec<[f64; 4]>>,
}

#[derive(Deserialize)]
struct CouplingFile {
    n_rays: usize,
    clusters: Vec<CouplingEntry>,
}

#[derive(Deserialize)]
struct CouplingEntry {
    cluster: usize,
    aod: Vec<usize>,
    aoa: Vec<usize>,
    zod: Vec<usize>,
    zoa: Vec<usize>,
}

#[derive(Deserialize)]
struct PhaseFile {
    n_rays: usize,
    order: Vec<String>,
    clusters: Vec<PhaseEntry>,
}

#[derive(Deserialize)]
struct PhaseEntry {
    cluster: usize,
    phases_deg: Vec<[f64; 4]>,
}

fn is_permutation(v: &[usize], m: usize) -> bool {
    let mut seen = vec![false; m];
    v.len() == m
        && v.iter().all(|&k| {
            if k == 0 || k > m || seen[k - 1] {
                false
            } else {
                seen[k - 1] = true;
                true
            }
        })
}

impl FixedRayData {
    pub fn load(coupling_path: &Path, phases_path: &Path) -> Result<Self, CdlError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| CdlError::Load {
                path: p.display().to_string(),
                msg: e.to_string(),
            })
        };
        let bad = |p: &Path, msg: String| CdlError::Load {
            path: p.display().to_string(),
            msg,
        };
        let cf: CouplingFile =
            serde_json::from_str(&read(coupling_path)?).map_err(|e| bad(coupling_path, e.to_string()))?;
        let pf: PhaseFile = serde_json::from_str(&read(phases_path)?).map_err(|e| bad(phases_path, e.to_string()))?;
        if pf.order != ["theta_theta", "theta_phi", "phi_theta", "phi_phi"] {
            return Err(bad(phases_path, format!("unexpected phase order {:?}", pf.order)));
        }
        let mut out = Self::default();
        for c in cf.clusters {
            let lists = [c.aod, c.aoa, c.zod, c.zoa];
            if let Some(k) = lists.iter().position(|l| !is_permutation(l, cf.n_rays)) {
                return Err(bad(
                    coupling_path,
                    format!("cluster {} {} coupling is not a permutation of 1..{}", c.cluster, AngleKind::ALL[k].name(), cf.n_rays),
                ));
            }
            out.coupling.insert(c.cluster, lists);
        }
        for c in pf.clusters {
            if c.phases_deg.len() != pf.n_rays || c.phases_deg.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad(phases_path, format!("cluster {} has a malformed phase list", c.cluster)));
            }
            out.phases_deg.insert(c.cluster, c.phases_deg);
        }
        Ok(out)
    }
}

/// How rays are coupled and how polarization phases are drawn.
#[derive(Debug, Clone, Copy)]
pub enum CouplingMode<'a> {
    /// Random permutations and uniform phases from `(seed, drop)` streams.
    Random { seed: u64, drop: u64 },
    Fixed(&'a FixedRayData),
}

/// Coupled ray directions and polarization phases.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySet {
    /// `departure[n][m]`, `arrival[n][m]` in the GCS.
    pub departure: Vec<Vec<SphericalDirection>>,
    pub arrival: Vec<Vec<SphericalDirection>>,
    /// `(Φθθ, Φθφ, Φφθ, Φφφ)` in radians, wrapped to `[−π, π)`.
    pub phases: Vec<Vec<[f64; 4]>>,
}

/// Ray angles in degrees `[aod, aoa, zod, zoa]` after coupling, plus phases.
pub fn coupled_ray_angles(table: &ClusterTable, mode: CouplingMode) -> Result<(Vec<Vec<[f64; 4]>>, Vec<Vec<[f64; 4]>>), CdlError> {
    let m = table.n_rays();
    let mut angles = Vec::with_capacity(table.n_clusters());
    let mut phases = Vec::with_capacity(table.n_clusters());
    for n in 0..table.n_clusters() {
        let id = table.ids[n];
        // offset index used by ray r for each family (0-based)
        let idx: [Vec<usize>; 4] = match mode {
            CouplingMode::Fixed(data) => {
                let c = data.coupling.get(&id).ok_or(CdlError::MissingCouplingTable { cluster: id, what: "coupling" })?;
                if c.iter().any(|l| l.len() != m) {
                    return Err(CdlError::InvalidTable(format!("cluster {id} coupling has the wrong ray count")));
                }
                [0, 1, 2, 3].map(|k| c[k].iter().map(|v| v - 1).collect())
            }
            CouplingMode::Random { seed, drop } => {
                let mut rng = seed_stream(seed, &[drop, id as u64, role::CDL_COUPLING]);
                let mut out: [Vec<usize>; 4] = Default::default();
                out[0] = (0..m).collect();
                for l in out.iter_mut().skip(1) {
                    *l = (0..m).collect();
                    l.shuffle(&mut rng);
                }
                out
            }
        };
        let ray_ph: Vec<[f64; 4]> = match mode {
            CouplingMode::Fixed(data) => {
                let p = data.phases_deg.get(&id).ok_or(CdlError::MissingCouplingTable { cluster: id, what: "phase" })?;
                if p.len() != m {
                    return Err(CdlError::InvalidTable(format!("cluster {id} phase list has the wrong ray count")));
                }
                p.iter().map(|q| q.map(|d| wrap_deg(d).to_radians())).collect()
            }
            CouplingMode::Random { seed, drop } => (0..m)
                .map(|r| {
                    let mut rng = seed_stream(seed, &[drop, id as u64, r as u64, role::CDL_PHASE]);
                    [0; 4].map(|_| rng.random::<f64>() * 2.0 * PI - PI)
                })
                .collect(),
        };
        angles.push(
            (0..m)
                .map(|r| AngleKind::ALL.map(|k| table.ray_angle(k, n, idx[k as usize][r])))
                .collect(),
        );
        phases.push(ray_ph);
    }
    Ok((angles, phases))
}

/// Per-ray angles from cluster means, spreads and offsets, coupled per mode.
pub fn ray_angles(table: &ClusterTable, mode: CouplingMode) -> Result<RaySet, CdlError> {
    table.validate()?;
    let (angles, phases) = coupled_ray_angles(table, mode)?;
    let dep = angles
        .iter()
        .map(|c| c.iter().map(|a| SphericalDirection::from_degrees(a[2], a[0])).collect())
        .collect();
    let arr = angles
        .iter()
        .map(|c| c.iter().map(|a| SphericalDirection::from_degrees(a[3], a[1])).collect())
        .collect();
    Ok(RaySet {
        departure: dep,
        arrival: arr,
        phases,
    })
}

/// Polarization coupling matrix of one ray.
pub fn polarization_matrix(phases: &[f64; 4], xpr_db: f64) -> Matrix2<Complex64> {
    let x = 10f64.powf(-xpr_db / 20.0);
    Matrix2::new(
        Complex64::from_polar(1.0, phases[0]),
        Complex64::from_polar(x, phases[1]),
        Complex64::from_polar(x, phases[2]),
        Complex64::from_polar(1.0, phases[3]),
    )
}

/// Far-field phasor of an element at LCS′ position `pos` (wavelengths).
pub fn array_phase(pos: &Vector3<f64>, d: &SphericalDirection, o: &Orientation) -> Complex64 {
    let local = composite_rotation(o, 0.0).to_local(&unit_direction(d));
    Complex64::from_polar(1.0, 2.0 * PI * local.dot(pos))
}

/// UE velocity.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct MotionConfig {
    pub speed_mps: f64,
    pub phi_v_deg: f64,
    pub theta_v_deg: f64,
}

impl MotionConfig {
    pub fn from_kmh(kmh: f64, phi_v_deg: f64, theta_v_deg: f64) -> Self {
        Self {
            speed_mps: kmh / 3.6,
            phi_v_deg,
            theta_v_deg,
        }
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.speed_mps * unit_direction(&SphericalDirection::from_degrees(self.theta_v_deg, self.phi_v_deg))
    }
}

/// Doppler shift in Hz of a ray arriving from `d`.
pub fn doppler_frequency(d: &SphericalDirection, motion: &MotionConfig, wavelength: f64) -> f64 {
    unit_direction(d).dot(&motion.velocity()) / wavelength
}

pub fn doppler_phasor(d: &SphericalDirection, motion: &MotionConfig, wavelength: f64, t: f64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * doppler_frequency(d, motion, wavelength) * t)
}

/// Both panels and everything else needed to evaluate coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CdlLink {
    pub bs: PanelConfig,
    pub ue: PanelConfig,
    pub bs_map: PortMap,
    pub ue_map: PortMap,
    pub carrier_hz: f64,
    pub motion: MotionConfig,
    pub model: PolarizationModel,
}

impl CdlLink {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn validate(&self) -> Result<(), CdlError> {
        self.bs.validate()?;
        self.ue.validate()?;
        self.bs_map.validate_for(&self.bs)?;
        self.ue_map.validate_for(&self.ue)?;
        if !(self.carrier_hz > 0.0) || !(self.motion.speed_mps >= 0.0) {
            return Err(CdlError::InvalidTable("carrier must be > 0 and speed >= 0".into()));
        }
        Ok(())
    }
}

/// Per-ray quantities that do not depend on time.
struct RayTerms {
    amp: f64,
    doppler_hz: f64,
    /// `g_rx[u] = a_rx(u) · F_rx(pol(u))`.
    g_rx: Vec<Vector2<Complex64>>,
    /// `M_pol · a_tx(s) · F_tx(pol(s))`.
    w_tx: Vec<Vector2<Complex64>>,
}

fn element_terms(
    panel: &PanelConfig,
    d: &SphericalDirection,
    model: PolarizationModel,
) -> Result<Vec<Vector2<Complex64>>, CdlError> {
    let fields = (0..panel.n_pols())
        .map(|p| element_field(panel, p, d, model))
        .collect::<Result<Vec<_>, _>>()?;
    (0..panel.n_elements())
        .map(|e| {
            let (c, r, p) = panel.element_coords(e);
            let a = array_phase(&element_position(c, r, panel)?, d, &panel.orientation);
            Ok(Vector2::new(fields[p].f_theta * a, fields[p].f_phi * a))
        })
        .collect()
}

fn ray_terms(table: &ClusterTable, rays: &RaySet, link: &CdlLink, n: usize) -> Result<Vec<RayTerms>, CdlError> {
    let m = table.n_rays();
    let amp = (table.powers[n] / m as f64).sqrt();
    (0..m)
        .map(|r| {
            let arr = &rays.arrival[n][r];
            let dep = &rays.departure[n][r];
            let pol = polarization_matrix(&rays.phases[n][r], table.xpr_db);
            let g_rx = element_terms(&link.ue, arr, link.model)?;
            let w_tx = element_terms(&link.bs, dep, link.model)?.into_iter().map(|g| pol * g).collect();
            Ok(RayTerms {
                amp,
                doppler_hz: doppler_frequency(arr, &link.motion, link.wavelength()),
                g_rx,
                w_tx,
            })
        })
        .collect()
}

/// Single element-level coefficient `H_{u,s,n}(t)`.
pub fn cdl_coefficient(
    u: usize,
    s: usize,
    n: usize,
    t: f64,
    table: &ClusterTable,
    rays: &RaySet,
    link: &CdlLink,
) -> Result<Complex64, CdlError> {
    let m = table.n_rays();
    let amp = (table.powers[n] / m as f64).sqrt();
    let (uc, ur, up) = link.ue.element_coords(u);
    let (sc, sr, sp) = link.bs.element_coords(s);
    let pu = element_position(uc, ur, &link.ue)?;
    let ps = element_position(sc, sr, &link.bs)?;
    let mut acc = Complex64::new(0.0, 0.0);
    for r in 0..m {
        let arr = &rays.arrival[n][r];
        let dep = &rays.departure[n][r];
        let fr = element_field(&link.ue, up, arr, link.model)?;
        let ft = element_field(&link.bs, sp, dep, link.model)?;
        let pol = polarization_matrix(&rays.phases[n][r], table.xpr_db);
        let frx = Vector2::new(fr.f_theta, fr.f_phi);
        let ftx = Vector2::new(ft.f_theta, ft.f_phi);
        let core = frx.transpose() * pol * ftx;
        acc += core[(0, 0)]
            * array_phase(&pu, arr, &link.ue.orientation)
            * array_phase(&ps, dep, &link.bs.orientation)
            * doppler_phasor(arr, &link.motion, link.wavelength(), t);
    }
    Ok(acc * amp)
}

/// Element-level cluster matrices `H_n(t)` (rx elements × tx elements)
/// for every cluster and time sample: `out[t][n]`.
pub fn cluster_matrices(
    table: &ClusterTable,
    rays: &RaySet,
    link: &CdlLink,
    times: &[f64],
) -> Result<Vec<Vec<CMat>>, CdlError> {
    let n_rx = link.ue.n_elements();
    let n_tx = link.bs.n_elements();
    let terms = (0..table.n_clusters())
        .map(|n| ray_terms(table, rays, link, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut per_cluster = Vec::with_capacity(table.n_clusters());
        for ray_list in &terms {
            let mut h = CMat::zeros(n_rx, n_tx);
            for rt in ray_list {
                let d = Complex64::from_polar(rt.amp, 2.0 * PI * rt.doppler_hz * t);
                for u in 0..n_rx {
                    let g = rt.g_rx[u] * d;
                    for s in 0..n_tx {
                        let w = &rt.w_tx[s];
                        h[(u, s)] += g[0] * w[0] + g[1] * w[1];
                    }
                }
            }
            per_cluster.push(h);
        }
        out.push(per_cluster);
    }
    Ok(out)
}

/// Port-level channel `H(t,f) = Σ_n H_n(t) e^{−j2π f τ_n}` with the
/// virtualizers applied to the element channel.
pub fn generate_cdl_channel(
    table: &ClusterTable,
    link: &CdlLink,
    times: &[f64],
    subcarriers: &[f64],
    mode: CouplingMode,
) -> Result<ChannelTensor, CdlError> {
    link.validate()?;
    let rays = ray_angles(table, mode)?;
    generate_from_rays(table, &rays, link, times, subcarriers)
}

pub fn generate_from_rays(
    table: &ClusterTable,
    rays: &RaySet,
    link: &CdlLink,
    times: &[f64],
    subcarriers: &[f64],
) -> Result<ChannelTensor, CdlError> {
    let per_time = cluster_matrices(table, rays, link, times)?;
    let ue_w = link.ue_map.matrix();
    let bs_wt = link.bs_map.matrix().transpose();
    // virtualize per cluster first; the frequency sum is linear
    let port_clusters: Vec<Vec<CMat>> = per_time
        .iter()
        .map(|cl| cl.iter().map(|h| &ue_w * h * &bs_wt).collect())
        .collect();
    let n_rx = link.ue_map.n_ports();
    let n_tx = link.bs_map.n_ports();
    let mut out = ChannelTensor::zeros(times.to_vec(), subcarriers.to_vec(), n_rx, n_tx);
    for (ti, cl) in port_clusters.iter().enumerate() {
        for (fi, &f) in subcarriers.iter().enumerate() {
            let dst = out.slice_mut(ti, fi);
            for (n, h) in cl.iter().enumerate() {
                let ph = Complex64::from_polar(1.0, -2.0 * PI * f * table.delays_s[n]);
                for r in 0..n_rx {
                    for c in 0..n_tx {
                        dst[r * n_tx + c] += h[(r, c)] * ph;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Element-level tensor without virtualization (used to check the AAV path).
pub fn generate_element_channel(
    table: &ClusterTable,
    rays: &RaySet,
    link: &CdlLink,
    times: &[f64],
    subcarriers: &[f64],
) -> Result<ChannelTensor, CdlError> {
    let mut el = link.clone();
    el.ue_map = PortMap::identity(link.ue.n_elements());
    el.bs_map = PortMap::identity(link.bs.n_elements());
    generate_from_rays(table, rays, &el, times, subcarriers)
}

/// Virtualizes an element-level tensor with the link's port maps.
pub fn virtualize(h: &ChannelTensor, link: &CdlLink) -> Result<ChannelTensor, CdlError> {
    Ok(apply_aav(h, &link.ue_map, &link.bs_map)?)
}

/// Mean received power of each cluster summed over all port pairs,
/// averaged over the polarization phases.
///
/// For a ray the expectation of `|F_rxᵀ M F_tx|²` over independent uniform
/// phases is `|F_rθF_tθ|² + |F_rφF_tφ|² + (|F_rθF_tφ|² + |F_rφF_tθ|²)/κ`,
/// and the virtualizer contributes `|AF_rx|²·|AF_tx|²` per port pair.
/// Cross-ray terms vanish in expectation.
pub fn cluster_power_probe(table: &ClusterTable, rays: &RaySet, link: &CdlLink) -> Result<Vec<f64>, CdlError> {
    let inv_kappa = 10f64.powf(-table.xpr_db / 10.0);
    let m = table.n_rays();
    let mut out = Vec::with_capacity(table.n_clusters());
    for n in 0..table.n_clusters() {
        let mut total = 0.0;
        for r in 0..m {
            let arr = &rays.arrival[n][r];
            let dep = &rays.departure[n][r];
            let rx = port_terms(&link.ue, &link.ue_map, arr, link.model)?;
            let tx = port_terms(&link.bs, &link.bs_map, dep, link.model)?;
            for (fr, afr) in &rx {
                for (ft, aft) in &tx {
                    let e = (fr[0] * ft[0]).norm_sqr()
                        + (fr[1] * ft[1]).norm_sqr()
                        + ((fr[0] * ft[1]).norm_sqr() + (fr[1] * ft[0]).norm_sqr()) * inv_kappa;
                    total += e * afr * aft;
                }
            }
        }
        out.push(table.powers[n] / m as f64 * total);
    }
    Ok(out)
}

/// Per port: the field of its polarization and `|Σ w·a|²`.
fn port_terms(
    panel: &PanelConfig,
    map: &PortMap,
    d: &SphericalDirection,
    model: PolarizationModel,
) -> Result<Vec<(Vector2<Complex64>, f64)>, CdlError> {
    let fields = (0..panel.n_pols())
        .map(|p| element_field(panel, p, d, model).map(|f| Vector2::new(f.f_theta, f.f_phi)))
        .collect::<Result<Vec<_>, _>>()?;
    map.ports
        .iter()
        .map(|port| {
            let pol = panel.element_coords(port[0].0).2;
            let mut af = Complex64::new(0.0, 0.0);
            for &(e, w) in port {
                let (c, r, _) = panel.element_coords(e);
                af += w * array_phase(&element_position(c, r, panel)?, d, &panel.orientation);
            }
            Ok((fields[pol], af.norm_sqr()))
        })
        .collect()
}
