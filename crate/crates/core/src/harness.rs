//! Scenario files and Monte-Carlo orchestration.
//!
//! A scenario is one TOML file. Data file names inside it are resolved
//! against `data_dir`, which is itself relative to the scenario file.
//! Every random draw is keyed by `(seed, drop, ...)` so a drop can be
//! replayed in isolation and drops can run in any order.

use crate::analysis::{
    bartlett_profile, default_azimuth_grid, mean_curve, precoded_layer_sinr, profile_decorrelation, svd_layer_sinr,
    AnalysisError, EigenmodeReport, LayerOrdering, SpatialProfile,
};
use crate::antenna::{AntennaError, PanelConfig, PatternKind, PortMap, SectorParams};
use crate::cdl::{
    generate_cdl_channel, generate_from_rays, CdlError, CdlLink, ClusterTable, CouplingMode, FixedRayData, MotionConfig,
    SPEED_OF_LIGHT,
};
use crate::csi::{
    build_type_i, eigen_precoder, random_pmi, reconstruct_etype_ii, select_etype_ii, select_type_i, CophaseMode,
    CsiError, DftGrid, ETypeIIParams, Precoder, QuantizerConfig, SubbandLayout,
};
use crate::geometry::{Orientation, PolarizationModel};
use crate::linkabs::{
    estimate_channel, lmmse_filter, per_layer_sinr, BlerCurve, EstimationConfig, EstimationMode, LinkError, LinkModel,
    LinkResult, McsTable, MiCurve, PilotRole, DEFAULT_N_RT_MAX,
};
use crate::rcdl::{build_rcdl, rescale_delays, table_spreads, RcdlBuild, RcdlError, SpreadTargets};
use crate::seed::{role, seed_stream};
use crate::tdl::{generate_tdl_channel, CorrelationSpec, TapProfile, TdlError, TdlOptions};
use crate::tensor::{ChannelTensor, TensorError};
use crate::CMat;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// OFDM symbols per slot.
const SYMBOLS_PER_SLOT: f64 = 14.0;
const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot load scenario {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("drop {drop}, SNR {snr_db} dB: {source}")]
    Drop {
        drop: usize,
        snr_db: f64,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Tdl(#[from] TdlError),
    #[error(transparent)]
    Cdl(#[from] CdlError),
    #[error(transparent)]
    Rcdl(#[from] RcdlError),
    #[error(transparent)]
    Antenna(#[from] AntennaError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    fn at(self, drop: usize, snr_db: f64) -> Self {
        Self::Drop {
            drop,
            snr_db,
            source: Box::new(self),
        }
    }
}

fn half() -> f64 {
    0.5
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternChoice {
    #[default]
    Isotropic,
    Sector,
}

/// Uniform planar panel with optional vertical port virtualization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSpec {
    pub n_cols: usize,
    pub n_rows: usize,
    /// Element spacing in wavelengths, both directions.
    #[serde(default = "half")]
    pub spacing: f64,
    pub slants_deg: Vec<f64>,
    /// Bearing, downtilt, slant.
    #[serde(default)]
    pub orientation_deg: [f64; 3],
    #[serde(default)]
    pub pattern: PatternChoice,
    #[serde(default)]
    pub sector_file: Option<String>,
    /// Vertically adjacent elements combined into one port.
    #[serde(default = "one")]
    pub rows_per_port: usize,
}

impl PanelSpec {
    pub fn n_ports(&self) -> usize {
        self.n_cols * (self.n_rows / self.rows_per_port.max(1)) * self.slants_deg.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelSpec {
    Tdl {
        profile: String,
        correlation: String,
        /// Overrides the Doppler implied by the motion section.
        #[serde(default)]
        max_doppler_hz: Option<f64>,
    },
    Cdl {
        table: String,
        /// Fixed coupling file; random coupling per drop when absent.
        #[serde(default)]
        coupling: Option<String>,
        #[serde(default)]
        phases: Option<String>,
        #[serde(default)]
        ds_ns: Option<f64>,
        #[serde(default)]
        polarization_model: PolarizationModel,
    },
    Rcdl {
        base: String,
        /// Target spreads file, or `"base"` for the base table's own spreads.
        targets: String,
        coupling: String,
        phases: String,
        keep: usize,
        /// Overrides the delay spread of the targets.
        #[serde(default)]
        ds_ns: Option<f64>,
        #[serde(default)]
        polarization_model: PolarizationModel,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSpec {
    pub speed_kmh: f64,
    /// When set, the speed is derived from this Doppler at the carrier.
    pub max_doppler_hz: Option<f64>,
    pub phi_v_deg: f64,
    pub theta_v_deg: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            speed_kmh: 3.0,
            max_doppler_hz: None,
            phi_v_deg: 65.0,
            theta_v_deg: 90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarrierSpec {
    pub frequency_hz: f64,
    pub scs_hz: f64,
    pub n_prb: usize,
    /// `N_SB`.
    pub prb_per_subband: usize,
}

impl Default for CarrierSpec {
    fn default() -> Self {
        Self {
            frequency_hz: 3.5e9,
            scs_hz: 30e3,
            n_prb: 106,
            prb_per_subband: 8,
        }
    }
}

impl CarrierSpec {
    pub fn bandwidth_hz(&self) -> f64 {
        self.n_prb as f64 * 12.0 * self.scs_hz
    }

    pub fn symbol_duration_s(&self) -> f64 {
        1e-3 / (SYMBOLS_PER_SLOT * self.scs_hz / 15e3)
    }

    /// PRB center frequencies relative to the carrier.
    pub fn prb_frequencies(&self) -> Vec<f64> {
        let c = (self.n_prb as f64 - 1.0) / 2.0;
        (0..self.n_prb).map(|j| (j as f64 - c) * 12.0 * self.scs_hz).collect()
    }

    /// Every `stride`-th subcarrier relative to the carrier, with indices.
    pub fn subcarriers(&self, stride: usize) -> (Vec<usize>, Vec<f64>) {
        let n = self.n_prb * 12;
        let c = (n as f64 - 1.0) / 2.0;
        let idx: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
        let f = idx.iter().map(|&k| (k as f64 - c) * self.scs_hz).collect();
        (idx, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Type1Wb,
    Type1Sb,
    Etype2,
    Random,
    Eigen,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Type1Wb => "type1_wb",
            Self::Type1Sb => "type1_sb",
            Self::Etype2 => "etype2",
            Self::Random => "random",
            Self::Eigen => "eigen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsiSpec {
    pub schemes: Vec<Scheme>,
    pub rank: usize,
    pub oversampling: [usize; 2],
    pub param_combination: usize,
    pub reporting_delay_ms: f64,
    pub quantizer: QuantizerConfig,
}

impl Default for CsiSpec {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::Type1Sb, Scheme::Etype2, Scheme::Random, Scheme::Eigen],
            rank: 4,
            oversampling: [4, 4],
            param_combination: 6,
            reporting_delay_ms: 7.0,
            quantizer: QuantizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSpec {
    pub mcs: usize,
    pub n_rt_max: usize,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self {
            mcs: 7,
            n_rt_max: DEFAULT_N_RT_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub snr_db: Vec<f64>,
    /// Drop start times are uniform on `[0, span)`.
    pub drop_time_span_s: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            snr_db: (-4..=24).step_by(2).map(f64::from).collect(),
            drop_time_span_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BartlettSpec {
    pub duration_ms: f64,
    pub time_step_ms: f64,
    pub re_stride: usize,
}

impl Default for BartlettSpec {
    fn default() -> Self {
        Self {
            duration_ms: 5.0,
            time_step_ms: 0.25,
            re_stride: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingChoice {
    #[default]
    SingularValue,
    /// Type-I subband precoder selected on the true channel, LMMSE receiver.
    TypeI,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenmodeSpec {
    pub snr_db: f64,
    pub ordering: OrderingChoice,
}

impl Default for EigenmodeSpec {
    fn default() -> Self {
        Self {
            snr_db: 20.0,
            ordering: OrderingChoice::SingularValue,
        }
    }
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub drops: usize,
    /// Resolved against the scenario file's directory on load.
    pub data_dir: PathBuf,
    pub channel: ChannelSpec,
    pub bs: PanelSpec,
    pub ue: PanelSpec,
    #[serde(default)]
    pub motion: MotionSpec,
    #[serde(default)]
    pub carrier: CarrierSpec,
    #[serde(default)]
    pub csi: CsiSpec,
    #[serde(default)]
    pub link: LinkSpec,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub bartlett: BartlettSpec,
    #[serde(default)]
    pub eigenmodes: EigenmodeSpec,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let err = |msg: String| HarnessError::Config {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut s: Self = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        if s.data_dir.is_relative() {
            let dir = path.parent().unwrap_or(Path::new("."));
            s.data_dir = dir.join(&s.data_dir);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.drops == 0 {
            return bad("drops must be at least 1".into());
        }
        if self.sweep.snr_db.is_empty() {
            return bad("SNR list is empty".into());
        }
        if self.carrier.n_prb == 0 || self.carrier.prb_per_subband == 0 || !(self.carrier.scs_hz > 0.0) {
            return bad("carrier needs PRBs, a subband size and a positive SCS".into());
        }
        if !(self.sweep.drop_time_span_s >= 0.0) || !(self.csi.reporting_delay_ms >= 0.0) {
            return bad("time spans must be non-negative".into());
        }
        if !(self.bartlett.time_step_ms > 0.0) || self.bartlett.re_stride == 0 {
            return bad("Bartlett step and stride must be positive".into());
        }
        for (what, p) in [("bs", &self.bs), ("ue", &self.ue)] {
            if p.rows_per_port == 0 || p.n_rows % p.rows_per_port != 0 {
                return bad(format!("{what}: {} rows do not split into ports of {}", p.n_rows, p.rows_per_port));
            }
            if p.pattern == PatternChoice::Sector && p.sector_file.is_none() {
                return bad(format!("{what}: sector pattern needs sector_file"));
            }
        }
        self.estimation.validate()?;
        let files: Vec<&String> = match &self.channel {
            ChannelSpec::Tdl { profile, correlation, .. } => vec![profile, correlation],
            ChannelSpec::Cdl {
                table, coupling, phases, ..
            } => {
                if coupling.is_some() != phases.is_some() {
                    return bad("fixed coupling needs both coupling and phases files".into());
                }
                std::iter::once(table).chain(coupling).chain(phases).collect()
            }
            ChannelSpec::Rcdl {
                base,
                targets,
                coupling,
                phases,
                ..
            } => {
                let mut v = vec![base, coupling, phases];
                if targets != "base" {
                    v.push(targets);
                }
                v
            }
        };
        let panel_files = [&self.bs, &self.ue].into_iter().filter_map(|p| p.sector_file.as_ref());
        for f in files.into_iter().chain(panel_files) {
            if !self.data(f).is_file() {
                return bad(format!("data file {} not found", self.data(f).display()));
            }
        }
        Ok(())
    }

    /// Reporting delay snapped to a whole number of OFDM symbols.
    pub fn snapped_delay_s(&self) -> f64 {
        let ts = self.carrier.symbol_duration_s();
        let want = self.csi.reporting_delay_ms * 1e-3;
        let snapped = (want / ts).round() * ts;
        log::info!(
            "reporting delay {:.6} ms snapped to {} symbols = {:.6} ms",
            want * 1e3,
            (want / ts).round(),
            snapped * 1e3
        );
        snapped
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier.frequency_hz
    }

    pub fn motion(&self) -> MotionConfig {
        let m = &self.motion;
        match m.max_doppler_hz {
            Some(fd) => MotionConfig {
                speed_mps: fd * self.wavelength(),
                phi_v_deg: m.phi_v_deg,
                theta_v_deg: m.theta_v_deg,
            },
            None => MotionConfig::from_kmh(m.speed_kmh, m.phi_v_deg, m.theta_v_deg),
        }
    }
}

fn panel(spec: &PanelSpec, s: &Scenario) -> Result<(PanelConfig, PortMap), HarnessError> {
    let pattern = match spec.pattern {
        PatternChoice::Isotropic => PatternKind::isotropic(),
        PatternChoice::Sector => {
            let f = spec.sector_file.as_deref().unwrap_or_default();
            PatternKind::sector(SectorParams::load(&s.data(f))?)
        }
    };
    let [a, b, c] = spec.orientation_deg;
    let p = PanelConfig {
        n_cols: spec.n_cols,
        n_rows: spec.n_rows,
        d_y: spec.spacing,
        d_z: spec.spacing,
        polarization_slants: spec.slants_deg.clone(),
        orientation: Orientation::from_degrees(a, b, c),
        pattern,
    };
    p.validate()?;
    let map = if spec.rows_per_port == 1 {
        PortMap::identity(p.n_elements())
    } else {
        PortMap::broadside_vertical(&p, spec.rows_per_port)?
    };
    Ok((p, map))
}

fn link_for(s: &Scenario, model: PolarizationModel) -> Result<CdlLink, HarnessError> {
    let (bs, bs_map) = panel(&s.bs, s)?;
    let (ue, ue_map) = panel(&s.ue, s)?;
    let link = CdlLink {
        bs,
        ue,
        bs_map,
        ue_map,
        carrier_hz: s.carrier.frequency_hz,
        motion: s.motion(),
        model,
    };
    link.validate()?;
    Ok(link)
}

/// Loaded channel model.
#[derive(Debug, Clone)]
pub enum ChannelSource {
    Tdl { profile: TapProfile, correlation: CorrelationSpec },
    Cdl { table: ClusterTable, fixed: Option<FixedRayData>, link: CdlLink },
    Rcdl { build: RcdlBuild, link: CdlLink },
}

/// Resolves a scenario into loaded tables and derived link parameters.
#[derive(Debug, Clone)]
pub struct Setup {
    pub scenario: Scenario,
    pub source: ChannelSource,
    pub n_tx: usize,
    pub n_rx: usize,
    pub layout: SubbandLayout,
}

impl Setup {
    pub fn new(scenario: Scenario) -> Result<Self, HarnessError> {
        scenario.validate()?;
        let s = &scenario;
        let source = match &s.channel {
            ChannelSpec::Tdl {
                profile,
                correlation,
                max_doppler_hz,
            } => {
                let fd = max_doppler_hz.unwrap_or_else(|| s.motion().speed_mps / s.wavelength());
                let name = Path::new(profile).file_stem().and_then(|n| n.to_str()).unwrap_or("tdl");
                ChannelSource::Tdl {
                    profile: TapProfile::load_csv(&s.data(profile), name, fd)?,
                    correlation: CorrelationSpec::load_json(&s.data(correlation))?,
                }
            }
            ChannelSpec::Cdl {
                table,
                coupling,
                phases,
                ds_ns,
                polarization_model,
            } => {
                let mut t = ClusterTable::load_csv(&s.data(table))?;
                if let Some(ds) = ds_ns {
                    t.delays_s = rescale_delays(&t.delays_s, &t.powers, ds * 1e-9)?;
                }
                let fixed = match (coupling, phases) {
                    (Some(c), Some(p)) => Some(FixedRayData::load(&s.data(c), &s.data(p))?),
                    _ => None,
                };
                ChannelSource::Cdl {
                    table: t,
                    fixed,
                    link: link_for(s, *polarization_model)?,
                }
            }
            ChannelSpec::Rcdl {
                base,
                targets,
                coupling,
                phases,
                keep,
                ds_ns,
                polarization_model,
            } => {
                let base_table = ClusterTable::load_csv(&s.data(base))?;
                let mut tg = if targets == "base" {
                    let sp = table_spreads(&base_table)?;
                    SpreadTargets {
                        asd_deg: sp[0].0,
                        asa_deg: sp[1].0,
                        zsd_deg: sp[2].0,
                        zsa_deg: sp[3].0,
                        ds_ns: base_table.rms_delay_spread() * 1e9,
                    }
                } else {
                    SpreadTargets::load(&s.data(targets))?
                };
                if let Some(ds) = ds_ns {
                    tg.ds_ns = *ds;
                }
                let fixed = FixedRayData::load(&s.data(coupling), &s.data(phases))?;
                let link = link_for(s, *polarization_model)?;
                let build = build_rcdl(&base_table, &tg, &fixed, &link, *keep)?;
                ChannelSource::Rcdl { build, link }
            }
        };
        let (n_tx, n_rx) = match &source {
            ChannelSource::Tdl { .. } => (s.bs.n_ports(), s.ue.n_ports()),
            ChannelSource::Cdl { link, .. } | ChannelSource::Rcdl { link, .. } => {
                (link.bs_map.n_ports(), link.ue_map.n_ports())
            }
        };
        let layout = SubbandLayout {
            n_prb: s.carrier.n_prb,
            prb_per_sb: s.carrier.prb_per_subband,
        };
        Ok(Self {
            scenario,
            source,
            n_tx,
            n_rx,
            layout,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::new(Scenario::load(path)?)
    }

    /// DFT grid of the BS ports; one polarization is `N1 × N2`.
    pub fn grid(&self) -> Result<DftGrid, HarnessError> {
        let b = &self.scenario.bs;
        let n2 = b.n_rows / b.rows_per_port;
        if b.slants_deg.len() != 2 {
            return Err(HarnessError::Invalid("codebooks need a dual-polarized BS panel".into()));
        }
        let [o1, o2] = self.scenario.csi.oversampling;
        Ok(DftGrid::new(b.n_cols, n2, o1, if n2 > 1 { o2 } else { 1 })?)
    }

    pub fn link_model(&self) -> Result<LinkModel, HarnessError> {
        let s = &self.scenario;
        let table = McsTable::load_csv(&s.data("mcs_table2.csv"))?;
        let bler = BlerCurve::load(&s.data("bler_params.csv"), &table, s.link.mcs)?;
        let mi = MiCurve::load_csv(&s.data(&format!("mi_q{}.csv", bler.q)), bler.q)?;
        Ok(LinkModel {
            mi,
            bler,
            mcs_table: table,
            rank: s.csi.rank,
            n_rt_max: s.link.n_rt_max,
        })
    }

    /// Start time of a drop, uniform on the configured span.
    pub fn drop_start(&self, drop: usize) -> f64 {
        let span = self.scenario.sweep.drop_time_span_s;
        if span == 0.0 {
            return 0.0;
        }
        seed_stream(self.scenario.seed, &[drop as u64, role::DROP_TIME]).random_range(0.0..span)
    }

    /// Port-level channel of one drop.
    pub fn channel(&self, drop: usize, times: &[f64], freqs: &[f64]) -> Result<ChannelTensor, HarnessError> {
        let seed = self.scenario.seed;
        Ok(match &self.source {
            ChannelSource::Tdl { profile, correlation } => generate_tdl_channel(
                profile,
                correlation,
                self.n_tx,
                self.n_rx,
                times,
                freqs,
                seed,
                TdlOptions {
                    drop: drop as u64,
                    ..TdlOptions::default()
                },
            )?,
            ChannelSource::Cdl { table, fixed, link } => {
                let mode = match fixed {
                    Some(f) => CouplingMode::Fixed(f),
                    None => CouplingMode::Random { seed, drop: drop as u64 },
                };
                generate_cdl_channel(table, link, times, freqs, mode)?
            }
            ChannelSource::Rcdl { build, link } => generate_from_rays(&build.table, &build.rays, link, times, freqs)?,
        })
    }
}

/// Per-PRB matrices at one time index.
fn prb_matrices(h: &ChannelTensor, t: usize) -> Vec<CMat> {
    (0..h.n_freqs()).map(|f| h.matrix(t, f)).collect()
}

/// One drop's outcome for one scheme at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropRecord {
    pub drop: usize,
    pub scheme: Scheme,
    pub snr_db: f64,
    pub start_time_s: f64,
    pub result: LinkResult,
}

/// Mean normalized throughput with bootstrap 95% half-widths.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub schemes: Vec<Scheme>,
    pub snr_db: Vec<f64>,
    /// `[scheme][snr]`.
    pub mean: Vec<Vec<f64>>,
    pub ci: Vec<Vec<f64>>,
    pub records: Vec<DropRecord>,
}

impl SweepResult {
    pub fn curve(&self, scheme: Scheme) -> Option<&[f64]> {
        let i = self.schemes.iter().position(|&s| s == scheme)?;
        Some(&self.mean[i])
    }

    /// SNR at which a scheme first reaches `level`.
    pub fn snr_at(&self, scheme: Scheme, level: f64) -> Option<f64> {
        snr_at_throughput(&self.snr_db, self.curve(scheme)?, level)
    }

    /// `SNR(b) − SNR(a)` at `level`: positive when `a` needs less SNR.
    pub fn gap_db(&self, a: Scheme, b: Scheme, level: f64) -> Option<f64> {
        Some(self.snr_at(b, level)? - self.snr_at(a, level)?)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scheme,snr_db,throughput_mean,throughput_ci")?;
        for (i, s) in self.schemes.iter().enumerate() {
            for (k, snr) in self.snr_db.iter().enumerate() {
                writeln!(w, "{},{},{:.6},{:.6}", s.name(), snr, self.mean[i][k], self.ci[i][k])?;
            }
        }
        Ok(())
    }

    pub fn write_drops_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "drop,scheme,snr_db,start_time_s,effective_sinr_db,retransmissions,success,normalized_throughput,expected_throughput"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{:.9},{:.4},{},{},{:.6},{:.6}",
                r.drop,
                r.scheme.name(),
                r.snr_db,
                r.start_time_s,
                r.result.effective_sinr_db,
                r.result.retransmissions,
                r.result.success,
                r.result.normalized_throughput,
                r.result.expected_throughput
            )?;
        }
        Ok(())
    }
}

/// Linear interpolation of the first upward crossing of `level`.
pub fn snr_at_throughput(snr_db: &[f64], curve: &[f64], level: f64) -> Option<f64> {
    let i = curve.iter().position(|&y| y >= level)?;
    if i == 0 {
        return Some(snr_db[0]);
    }
    let (x0, y0, x1, y1) = (snr_db[i - 1], curve[i - 1], snr_db[i], curve[i]);
    Some(x0 + (level - y0) * (x1 - x0) / (y1 - y0))
}

/// Mean and bootstrap 95% half-width of per-drop values.
pub fn bootstrap_mean_ci<R: Rng + ?Sized>(x: &[f64], resamples: usize, rng: &mut R) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| x[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (mean, (q(0.975) - q(0.025)) / 2.0)
}

struct SweepContext<'a> {
    setup: &'a Setup,
    grid: DftGrid,
    model: LinkModel,
    etype2: Option<ETypeIIParams>,
    freqs: Vec<f64>,
    delay: f64,
}

impl SweepContext<'_> {
    fn precoder(&self, scheme: Scheme, h_csi: &[CMat], noise_var: f64, drop: usize) -> Result<Precoder, HarnessError> {
        let s = &self.setup.scenario;
        let rank = s.csi.rank;
        let layout = &self.setup.layout;
        Ok(match scheme {
            Scheme::Type1Wb | Scheme::Type1Sb => {
                let mode = if scheme == Scheme::Type1Wb {
                    CophaseMode::Wideband
                } else {
                    CophaseMode::Subband
                };
                let pmi = select_type_i(h_csi, layout, &self.grid, rank, mode, noise_var, &self.model.mi)?;
                build_type_i(&pmi, &self.grid, layout.n3())?
            }
            Scheme::Etype2 => {
                let params = self.etype2.as_ref().expect("eType-II parameters resolved with the scheme list");
                let pmi = select_etype_ii(h_csi, layout, &self.grid, rank, params, &s.csi.quantizer)?;
                reconstruct_etype_ii(&pmi, &self.grid)?
            }
            Scheme::Random => {
                let mut rng = seed_stream(s.seed, &[drop as u64, role::RANDOM_PMI]);
                let pmi = random_pmi(&self.grid, rank, &mut rng)?;
                build_type_i(&pmi, &self.grid, layout.n3())?
            }
            Scheme::Eigen => eigen_precoder(h_csi, layout, rank)?,
        })
    }

    /// Data-phase link evaluation of one precoder.
    fn evaluate(
        &self,
        h_data: &ChannelTensor,
        w: &Precoder,
        noise_var: f64,
        drop: usize,
        snr_idx: usize,
    ) -> Result<LinkResult, HarnessError> {
        let s = &self.setup.scenario;
        let n_prb = self.setup.layout.n_prb;
        let mut g = ChannelTensor::zeros(vec![h_data.times()[0]], self.freqs.clone(), self.setup.n_rx, w.rank());
        for j in 0..n_prb {
            g.set_matrix(0, j, &(h_data.matrix(0, j) * w.for_prb(j, self.setup.layout.prb_per_sb)))?;
        }
        // common random numbers across schemes
        let mut rng = seed_stream(s.seed, &[drop as u64, snr_idx as u64, role::DMRS_NOISE]);
        let g_hat = estimate_channel(&g, &s.estimation, PilotRole::Dmrs, noise_var, &mut rng)?;
        let mut sinrs = Vec::with_capacity(n_prb * w.rank());
        for j in 0..n_prb {
            let f = lmmse_filter(&g_hat.matrix(0, j), noise_var);
            sinrs.extend(per_layer_sinr(&g.matrix(0, j), &f, noise_var));
        }
        let mut rng = seed_stream(s.seed, &[drop as u64, snr_idx as u64, role::HARQ]);
        Ok(self.model.evaluate(&sinrs, &mut rng)?)
    }

    fn run_drop(&self, drop: usize) -> Result<Vec<DropRecord>, HarnessError> {
        let s = &self.setup.scenario;
        let t0 = self.setup.drop_start(drop);
        let first_snr = s.sweep.snr_db[0];
        let h = self
            .setup
            .channel(drop, &[t0, t0 + self.delay], &self.freqs)
            .map_err(|e| e.at(drop, first_snr))?;
        let h_csi_true = h.select_times(&[0]);
        let h_data = h.select_times(&[1]);
        let ideal = s.estimation.mode == EstimationMode::Ideal;
        let mut cached: Vec<Option<Precoder>> = vec![None; s.csi.schemes.len()];
        let mut out = Vec::with_capacity(s.csi.schemes.len() * s.sweep.snr_db.len());
        for (k, &snr) in s.sweep.snr_db.iter().enumerate() {
            let nv = 10f64.powf(-snr / 10.0);
            let mut step = || -> Result<Vec<DropRecord>, HarnessError> {
                let mut rng = seed_stream(s.seed, &[drop as u64, k as u64, role::CSI_RS_NOISE]);
                let est = estimate_channel(&h_csi_true, &s.estimation, PilotRole::CsiRs, nv, &mut rng)?;
                let h_csi = prb_matrices(&est, 0);
                let mut recs = Vec::new();
                for (i, &scheme) in s.csi.schemes.iter().enumerate() {
                    // with ideal CSI only Type-I co-phasing depends on the SNR
                    let snr_free = ideal && !matches!(scheme, Scheme::Type1Wb | Scheme::Type1Sb);
                    let w = match &cached[i] {
                        Some(w) if snr_free => w.clone(),
                        _ => self.precoder(scheme, &h_csi, nv, drop)?,
                    };
                    let result = self.evaluate(&h_data, &w, nv, drop, k)?;
                    if snr_free {
                        cached[i] = Some(w);
                    }
                    recs.push(DropRecord {
                        drop,
                        scheme,
                        snr_db: snr,
                        start_time_s: t0,
                        result,
                    });
                }
                Ok(recs)
            };
            out.extend(step().map_err(|e| e.at(drop, snr))?);
        }
        Ok(out)
    }
}

/// Full CSI/link Monte-Carlo sweep.
pub fn run_sweep(setup: &Setup) -> Result<SweepResult, HarnessError> {
    let s = &setup.scenario;
    if s.csi.schemes.is_empty() {
        return Err(HarnessError::Invalid("no CSI schemes configured".into()));
    }
    let grid = setup.grid()?;
    let etype2 = if s.csi.schemes.contains(&Scheme::Etype2) {
        let p = ETypeIIParams::from_combination(
            &s.data("etype2_param_combinations.csv"),
            s.csi.param_combination,
            s.csi.rank,
            setup.layout.n3(),
        )?;
        log::info!("eType-II L={} M={} K_NZ={}", p.l, p.m_nu, p.k_nz);
        Some(p)
    } else {
        None
    };
    let ctx = SweepContext {
        setup,
        grid,
        model: setup.link_model()?,
        etype2,
        freqs: s.carrier.prb_frequencies(),
        delay: s.snapped_delay_s(),
    };
    let per_drop: Vec<Vec<DropRecord>> = (0..s.drops)
        .into_par_iter()
        .map(|d| ctx.run_drop(d))
        .collect::<Result<_, _>>()?;
    let records: Vec<DropRecord> = per_drop.into_iter().flatten().collect();
    let (ns, nk) = (s.csi.schemes.len(), s.sweep.snr_db.len());
    let mut mean = vec![vec![0.0; nk]; ns];
    let mut ci = vec![vec![0.0; nk]; ns];
    for i in 0..ns {
        for k in 0..nk {
            let x: Vec<f64> = records
                .iter()
                .skip(k * ns + i)
                .step_by(ns * nk)
                .map(|r| r.result.expected_throughput)
                .collect();
            let mut rng = seed_stream(s.seed, &[i as u64, k as u64, role::BOOTSTRAP]);
            (mean[i][k], ci[i][k]) = bootstrap_mean_ci(&x, BOOTSTRAP_RESAMPLES, &mut rng);
        }
    }
    Ok(SweepResult {
        schemes: s.csi.schemes.clone(),
        snr_db: s.sweep.snr_db.clone(),
        mean,
        ci,
        records,
    })
}

/// Spatial profile of one drop and its decorrelation curve.
#[derive(Debug, Clone, PartialEq)]
pub struct BartlettResult {
    pub profile: SpatialProfile,
    pub decorrelation: Vec<(f64, f64)>,
}

/// Bartlett scan of the receive array over the configured window.
pub fn run_bartlett(setup: &Setup, drop: usize) -> Result<BartlettResult, HarnessError> {
    let s = &setup.scenario;
    let b = &s.bartlett;
    let t0 = setup.drop_start(drop);
    let n_t = (b.duration_ms / b.time_step_ms).round() as usize + 1;
    let times: Vec<f64> = (0..n_t).map(|i| t0 + i as f64 * b.time_step_ms * 1e-3).collect();
    let (idx, freqs) = s.carrier.subcarriers(b.re_stride);
    let h = setup.channel(drop, &times, &freqs).map_err(|e| e.at(drop, f64::NAN))?;
    let mut profile = bartlett_profile(&h, &default_azimuth_grid(), s.ue.spacing)?;
    profile.re_indices = idx;
    let decorrelation = profile_decorrelation(&profile, t0);
    Ok(BartlettResult { profile, decorrelation })
}

/// Per-drop Bartlett runs and their mean decorrelation curve.
pub fn run_bartlett_drops(setup: &Setup) -> Result<(Vec<BartlettResult>, Vec<(f64, f64)>), HarnessError> {
    let runs: Vec<BartlettResult> = (0..setup.scenario.drops)
        .into_par_iter()
        .map(|d| run_bartlett(setup, d))
        .collect::<Result<_, _>>()?;
    let curves: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| r.decorrelation.clone()).collect();
    let mean = mean_curve(&curves);
    Ok((runs, mean))
}

pub fn write_curve_csv<W: Write>(curve: &[(f64, f64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "lag_ms,correlation")?;
    for (lag, rho) in curve {
        writeln!(w, "{},{:.6}", lag * 1e3, rho)?;
    }
    Ok(())
}

/// Per-layer SINR statistics over all drops at the configured SNR.
pub fn run_eigenmodes(setup: &Setup) -> Result<EigenmodeReport, HarnessError> {
    let s = &setup.scenario;
    let e = s.eigenmodes;
    let freqs = s.carrier.prb_frequencies();
    let grid = match e.ordering {
        OrderingChoice::TypeI => Some(setup.grid()?),
        OrderingChoice::SingularValue => None,
    };
    let model = match e.ordering {
        OrderingChoice::TypeI => Some(setup.link_model()?),
        OrderingChoice::SingularValue => None,
    };
    let reports: Vec<EigenmodeReport> = (0..s.drops)
        .into_par_iter()
        .map(|d| {
            let run = || -> Result<EigenmodeReport, HarnessError> {
                let h = setup.channel(d, &[setup.drop_start(d)], &freqs)?;
                Ok(match (&grid, &model) {
                    (Some(g), Some(m)) => {
                        let nv = 10f64.powf(-e.snr_db / 10.0);
                        let hm = prb_matrices(&h, 0);
                        let pmi = select_type_i(&hm, &setup.layout, g, s.csi.rank, CophaseMode::Subband, nv, &m.mi)?;
                        let w = build_type_i(&pmi, g, setup.layout.n3())?;
                        precoded_layer_sinr(&h, 0, &w, &setup.layout, e.snr_db, d)?
                    }
                    _ => svd_layer_sinr(&h, s.csi.rank, e.snr_db, d)?,
                })
            };
            run().map_err(|err| err.at(d, e.snr_db))
        })
        .collect::<Result<_, _>>()?;
    let ordering = match e.ordering {
        OrderingChoice::SingularValue => LayerOrdering::SingularValue,
        OrderingChoice::TypeI => LayerOrdering::Precoder,
    };
    let mut out = EigenmodeReport::new(ordering, s.csi.rank);
    for r in &reports {
        out.merge(r);
    }
    Ok(out)
}

pub fn write_tensor_csv<W: Write>(h: &ChannelTensor, mut w: W) -> std::io::Result<()> {
    writeln!(w, "time_s,freq_hz,rx,tx,re,im")?;
    for t in 0..h.n_times() {
        for f in 0..h.n_freqs() {
            for r in 0..h.n_rx() {
                for c in 0..h.n_tx() {
                    let v = h.get(t, f, r, c);
                    writeln!(w, "{:.9},{},{},{},{:.12e},{:.12e}", h.times()[t], h.freqs()[f], r, c, v.re, v.im)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_stream;

    fn scenario_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
    }

    #[test]
    fn snr_crossing_interpolates() {
        let snr = [0.0, 2.0, 4.0];
        let y = [0.1, 0.5, 0.9];
        assert!((snr_at_throughput(&snr, &y, 0.7).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(snr_at_throughput(&snr, &y, 0.05), Some(0.0));
        assert_eq!(snr_at_throughput(&snr, &y, 0.95), None);
    }

    #[test]
    fn bootstrap_of_constant_is_tight() {
        let mut rng = seed_stream(1, &[0]);
        let (m, ci) = bootstrap_mean_ci(&[0.5; 20], 200, &mut rng);
        assert_eq!(m, 0.5);
        assert_eq!(ci, 0.0);
    }

    #[test]
    fn bootstrap_matches_normal_approximation() {
        let mut rng = seed_stream(2, &[0]);
        let x: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let sd = (1.0f64 / 12.0).sqrt() / 20.0;
        let (_, ci) = bootstrap_mean_ci(&x, 1000, &mut rng);
        assert!((ci / (1.96 * sd) - 1.0).abs() < 0.15, "{ci}");
    }

    #[test]
    fn reporting_delay_is_whole_symbols() {
        let s = Scenario::load(&scenario_dir().join("rcdl_c_baseline_ideal.toml")).unwrap();
        let d = s.snapped_delay_s();
        assert!((d - 7e-3).abs() < 1e-12);
        assert!((s.carrier.symbol_duration_s() * 28000.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_link_defaults() {
        let c = CarrierSpec::default();
        assert!((c.bandwidth_hz() - 38.16e6).abs() < 1.0);
        let f = c.prb_frequencies();
        assert!((f[0] + f[105]).abs() < 1e-6);
        let l = SubbandLayout {
            n_prb: c.n_prb,
            prb_per_sb: c.prb_per_subband,
        };
        assert_eq!(l.n3(), 14);
        assert_eq!(l.prbs(13).len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = std::fs::read_to_string(scenario_dir().join("rcdl_c_baseline_ideal.toml")).unwrap();
        let bad = text.replace("[link]", "[link]\nbogus = 1");
        assert!(toml::from_str::<Scenario>(&bad).is_err());
    }
}
