//! Antenna panels, element fields and port virtualization.
//!
//! Elements and ports share one ordering: the co-polarized group first,
//! and inside a group the index runs bottom to top within a column, then
//! column by column. A uniform planar panel with `N_y` columns, `N_z` rows
//! and `P` slants therefore has element ordinal `p·N_y·N_z + n·N_z + m`.

use crate::geometry::{
    gcs_to_lcs_direction, transform_field_to_gcs, FieldVector, GeometryError, Orientation,
    PolarizationModel, SphericalDirection,
};
use crate::tensor::{CMat, ChannelTensor, TensorError};
use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AntennaError {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("sector pattern selected but no sector parameters were loaded")]
    MissingPatternData,
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("invalid port map: {0}")]
    InvalidPortMap(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Parameters of the 3GPP sector element pattern (dB / degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorParams {
    pub max_gain_dbi: f64,
    pub theta_3db_deg: f64,
    pub phi_3db_deg: f64,
    pub sla_v_db: f64,
    pub a_max_db: f64,
}

impl SectorParams {
    pub fn load(path: &Path) -> Result<Self, AntennaError> {
        let text = std::fs::read_to_string(path).map_err(|source| AntennaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let p: Self = serde_json::from_str(&text).map_err(|source| AntennaError::Json {
            path: path.display().to_string(),
            source,
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AntennaError> {
        let ok = [self.theta_3db_deg, self.phi_3db_deg, self.sla_v_db, self.a_max_db]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
            && self.max_gain_dbi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(AntennaError::InvalidPanel(format!("bad sector parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternType {
    Isotropic,
    Sector3gpp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternKind {
    pub kind: PatternType,
    pub sector: Option<SectorParams>,
}

impl PatternKind {
    pub fn isotropic() -> Self {
        Self {
            kind: PatternType::Isotropic,
            sector: None,
        }
    }

    pub fn sector(params: SectorParams) -> Self {
        Self {
            kind: PatternType::Sector3gpp,
            sector: Some(params),
        }
    }
}

/// Linear power gain of the element pattern at LCS″ direction `d`.
pub fn pattern_gain(k: &PatternKind, d: &SphericalDirection) -> Result<f64, AntennaError> {
    match k.kind {
        PatternType::Isotropic => Ok(1.0),
        PatternType::Sector3gpp => {
            let p = k.sector.ok_or(AntennaError::MissingPatternData)?;
            let th = d.theta_deg();
            let ph = d.phi_deg();
            let a_v = -(12.0 * ((th - 90.0) / p.theta_3db_deg).powi(2)).min(p.sla_v_db);
            let a_h = -(12.0 * (ph / p.phi_3db_deg).powi(2)).min(p.a_max_db);
            let a = -(-(a_v + a_h)).min(p.a_max_db);
            Ok(10f64.powf((p.max_gain_dbi + a) / 10.0))
        }
    }
}

/// Uniform planar panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub n_cols: usize,
    pub n_rows: usize,
    pub d_y: f64,
    pub d_z: f64,
    /// Slant angles ζ in degrees, co-polarized first.
    pub polarization_slants: Vec<f64>,
    pub orientation: Orientation,
    pub pattern: PatternKind,
}

impl PanelConfig {
    pub fn validate(&self) -> Result<(), AntennaError> {
        if self.n_cols == 0 || self.n_rows == 0 {
            return Err(AntennaError::InvalidPanel("panel needs at least one row and column".into()));
        }
        if !(self.d_y > 0.0 && self.d_z > 0.0) {
            return Err(AntennaError::InvalidPanel("element spacings must be positive".into()));
        }
        if self.polarization_slants.is_empty() || self.polarization_slants.len() > 2 {
            return Err(AntennaError::InvalidPanel("one or two polarization slants expected".into()));
        }
        let o = &self.orientation;
        if ![o.alpha, o.beta, o.gamma].iter().all(|v| v.is_finite()) {
            return Err(AntennaError::InvalidPanel("orientation must be finite".into()));
        }
        if self.pattern.kind == PatternType::Sector3gpp {
            self.pattern.sector.ok_or(AntennaError::MissingPatternData)?.validate()?;
        }
        Ok(())
    }

    pub fn n_pols(&self) -> usize {
        self.polarization_slants.len()
    }

    pub fn n_elements(&self) -> usize {
        self.n_cols * self.n_rows * self.n_pols()
    }

    /// `(col, row, pol)` of an element ordinal.
    pub fn element_coords(&self, idx: usize) -> (usize, usize, usize) {
        let per_pol = self.n_cols * self.n_rows;
        let pol = idx / per_pol;
        let rem = idx % per_pol;
        (rem / self.n_rows, rem % self.n_rows, pol)
    }

    pub fn slant_rad(&self, pol: usize) -> f64 {
        self.polarization_slants[pol].to_radians()
    }
}

/// Element location in LCS′, in wavelengths, relative to the panel center.
pub fn element_position(col: usize, row: usize, p: &PanelConfig) -> Result<Vector3<f64>, AntennaError> {
    if col >= p.n_cols || row >= p.n_rows {
        return Err(AntennaError::IndexOutOfRange(format!(
            "element ({col}, {row}) on a {}x{} panel",
            p.n_cols, p.n_rows
        )));
    }
    let y_c = (p.n_cols as f64 - 1.0) * p.d_y / 2.0;
    let z_c = (p.n_rows as f64 - 1.0) * p.d_z / 2.0;
    Ok(Vector3::new(
        0.0,
        col as f64 * p.d_y - y_c,
        row as f64 * p.d_z - z_c,
    ))
}

pub fn port_index(col: usize, row: usize, pol: usize, p: &PanelConfig) -> Result<usize, AntennaError> {
    if col >= p.n_cols || row >= p.n_rows || pol >= p.n_pols() {
        return Err(AntennaError::IndexOutOfRange(format!(
            "port (col {col}, row {row}, pol {pol}) on a {}x{}x{} panel",
            p.n_cols,
            p.n_rows,
            p.n_pols()
        )));
    }
    Ok(pol * p.n_cols * p.n_rows + col * p.n_rows + row)
}

/// Field of element polarization `pol` in the GCS at direction `d`.
pub fn element_field(
    p: &PanelConfig,
    pol: usize,
    d: &SphericalDirection,
    model: PolarizationModel,
) -> Result<FieldVector, AntennaError> {
    let zeta = p.slant_rad(pol);
    let local = match model {
        PolarizationModel::Model1 => {
            let dl = gcs_to_lcs_direction(d, &p.orientation, zeta);
            FieldVector::real(pattern_gain(&p.pattern, &dl)?.sqrt(), 0.0)
        }
        PolarizationModel::Model2 => {
            let dl = gcs_to_lcs_direction(d, &p.orientation, 0.0);
            let a = pattern_gain(&p.pattern, &dl)?.sqrt();
            FieldVector::real(a * zeta.cos(), a * zeta.sin())
        }
    };
    Ok(transform_field_to_gcs(&local, &p.orientation, zeta, d, model)?)
}

/// Element-to-port weights. `ports[k]` lists `(element, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PortMap {
    pub n_elements: usize,
    pub ports: Vec<Vec<(usize, Complex64)>>,
}

impl PortMap {
    /// One port per element with weight 1.
    pub fn identity(n: usize) -> Self {
        Self {
            n_elements: n,
            ports: (0..n).map(|i| vec![(i, Complex64::new(1.0, 0.0))]).collect(),
        }
    }

    /// Broadside virtualizer: each column of `rows_per_port` vertically
    /// adjacent co-polarized elements feeds one port with equal real weights.
    pub fn broadside_vertical(p: &PanelConfig, rows_per_port: usize) -> Result<Self, AntennaError> {
        if rows_per_port == 0 || p.n_rows % rows_per_port != 0 {
            return Err(AntennaError::InvalidPortMap(format!(
                "{} rows cannot be split into groups of {rows_per_port}",
                p.n_rows
            )));
        }
        let w = Complex64::new(1.0 / (rows_per_port as f64).sqrt(), 0.0);
        let port_rows = p.n_rows / rows_per_port;
        let mut ports = Vec::new();
        for pol in 0..p.n_pols() {
            for col in 0..p.n_cols {
                for pr in 0..port_rows {
                    let mut v = Vec::with_capacity(rows_per_port);
                    for k in 0..rows_per_port {
                        v.push((port_index(col, pr * rows_per_port + k, pol, p)?, w));
                    }
                    ports.push(v);
                }
            }
        }
        let m = Self {
            n_elements: p.n_elements(),
            ports,
        };
        m.validate_for(p)?;
        Ok(m)
    }

    pub fn n_ports(&self) -> usize {
        self.ports.len()
    }

    pub fn validate(&self) -> Result<(), AntennaError> {
        for (k, port) in self.ports.iter().enumerate() {
            if port.is_empty() {
                return Err(AntennaError::InvalidPortMap(format!("port {k} has no elements")));
            }
            let norm: f64 = port.iter().map(|(_, w)| w.norm_sqr()).sum();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(AntennaError::InvalidPortMap(format!("port {k} weights have norm² {norm}")));
            }
            if let Some((e, _)) = port.iter().find(|(e, _)| *e >= self.n_elements) {
                return Err(AntennaError::InvalidPortMap(format!("port {k} references element {e}")));
            }
        }
        Ok(())
    }

    /// Also checks that every port stays inside one polarization group.
    pub fn validate_for(&self, p: &PanelConfig) -> Result<(), AntennaError> {
        if self.n_elements != p.n_elements() {
            return Err(AntennaError::InvalidPortMap(format!(
                "map covers {} elements, panel has {}",
                self.n_elements,
                p.n_elements()
            )));
        }
        self.validate()?;
        for (k, port) in self.ports.iter().enumerate() {
            let pol0 = p.element_coords(port[0].0).2;
            if port.iter().any(|(e, _)| p.element_coords(*e).2 != pol0) {
                return Err(AntennaError::InvalidPortMap(format!("port {k} mixes polarizations")));
            }
        }
        Ok(())
    }

    /// Dense `n_ports × n_elements` weight matrix.
    pub fn matrix(&self) -> CMat {
        let mut m = CMat::zeros(self.ports.len(), self.n_elements);
        for (k, port) in self.ports.iter().enumerate() {
            for &(e, w) in port {
                m[(k, e)] += w;
            }
        }
        m
    }
}

/// Maps an element-level tensor to port level: `H_port = A_rx · H · A_txᵀ`.
pub fn apply_aav(h: &ChannelTensor, rx: &PortMap, tx: &PortMap) -> Result<ChannelTensor, AntennaError> {
    if h.n_rx() != rx.n_elements || h.n_tx() != tx.n_elements {
        return Err(AntennaError::Tensor(TensorError::ShapeMismatch(format!(
            "tensor has {}x{} elements, maps expect {}x{}",
            h.n_rx(),
            h.n_tx(),
            rx.n_elements,
            tx.n_elements
        ))));
    }
    rx.validate()?;
    tx.validate()?;
    let mut out = ChannelTensor::zeros(h.times().to_vec(), h.freqs().to_vec(), rx.n_ports(), tx.n_ports());
    let n_tx_el = h.n_tx();
    let n_tx_port = tx.n_ports();
    for t in 0..h.n_times() {
        for f in 0..h.n_freqs() {
            let src = h.slice(t, f);
            let dst = out.slice_mut(t, f);
            for (p, rport) in rx.ports.iter().enumerate() {
                for (q, tport) in tx.ports.iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for &(i, a) in rport {
                        for &(j, b) in tport {
                            acc += a * b * src[i * n_tx_el + j];
                        }
                    }
                    dst[p * n_tx_port + q] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::wrap_rad;
    use crate::tensor::max_abs;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel(cols: usize, rows: usize, slants: &[f64]) -> PanelConfig {
        PanelConfig {
            n_cols: cols,
            n_rows: rows,
            d_y: 0.5,
            d_z: 0.5,
            polarization_slants: slants.to_vec(),
            orientation: Orientation::default(),
            pattern: PatternKind::isotropic(),
        }
    }

    fn sector() -> SectorParams {
        SectorParams {
            max_gain_dbi: 8.0,
            theta_3db_deg: 65.0,
            phi_3db_deg: 65.0,
            sla_v_db: 30.0,
            a_max_db: 30.0,
        }
    }

    #[test]
    fn single_element_at_center() {
        let p = panel(1, 1, &[0.0]);
        assert_eq!(element_position(0, 0, &p).unwrap(), Vector3::zeros());
    }

    #[test]
    fn corner_element_of_2x2() {
        let p = panel(2, 2, &[0.0]);
        let v = element_position(0, 0, &p).unwrap();
        assert!((v - Vector3::new(0.0, -0.25, -0.25)).norm() < 1e-15);
        assert!(element_position(2, 0, &p).is_err());
    }

    #[test]
    fn positions_are_centered() {
        let p = panel(8, 3, &[45.0, -45.0]);
        let mut s = Vector3::zeros();
        for c in 0..8 {
            for r in 0..3 {
                s += element_position(c, r, &p).unwrap();
            }
        }
        assert!(s.norm() < 1e-12);
    }

    #[test]
    fn port_ordering() {
        let p = panel(2, 2, &[0.0]);
        assert_eq!(port_index(0, 0, 0, &p).unwrap(), 0);
        assert_eq!(port_index(0, 1, 0, &p).unwrap(), 1);
        assert_eq!(port_index(1, 0, 0, &p).unwrap(), 2);
        assert_eq!(port_index(1, 1, 0, &p).unwrap(), 3);
        let p = panel(2, 1, &[45.0, -45.0]);
        assert_eq!(port_index(0, 0, 1, &p).unwrap(), 2);
        assert_eq!(port_index(1, 0, 1, &p).unwrap(), 3);
        assert!(port_index(0, 0, 2, &p).is_err());
    }

    #[test]
    fn port_index_is_bijective() {
        let p = panel(4, 3, &[45.0, -45.0]);
        let mut seen = vec![false; p.n_elements()];
        for pol in 0..2 {
            for c in 0..4 {
                for r in 0..3 {
                    let k = port_index(c, r, pol, &p).unwrap();
                    assert!(!seen[k]);
                    seen[k] = true;
                    assert_eq!(p.element_coords(k), (c, r, pol));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn isotropic_gain_is_one() {
        let k = PatternKind::isotropic();
        for i in 0..50 {
            let d = SphericalDirection::new(0.06 * i as f64, -3.0 + 0.12 * i as f64);
            assert_eq!(pattern_gain(&k, &d).unwrap(), 1.0);
        }
    }

    #[test]
    fn sector_peak_at_boresight_and_symmetric() {
        let k = PatternKind::sector(sector());
        let peak = pattern_gain(&k, &SphericalDirection::from_degrees(90.0, 0.0)).unwrap();
        assert!((peak - 10f64.powf(0.8)).abs() < 1e-12);
        let mut best = (0.0, 0.0, 0.0);
        for ti in 1..180 {
            for pi in -179..180 {
                let g = pattern_gain(&k, &SphericalDirection::from_degrees(ti as f64, pi as f64)).unwrap();
                if g > best.0 {
                    best = (g, ti as f64, pi as f64);
                }
                let gm = pattern_gain(&k, &SphericalDirection::from_degrees(ti as f64, -pi as f64)).unwrap();
                assert!((g - gm).abs() < 1e-12);
            }
        }
        assert_eq!((best.1, best.2), (90.0, 0.0));
        // back lobe floor
        let back = pattern_gain(&k, &SphericalDirection::from_degrees(90.0, 180.0)).unwrap();
        assert!((10.0 * back.log10() - (8.0 - 30.0)).abs() < 1e-9);
    }

    #[test]
    fn missing_sector_data() {
        let k = PatternKind {
            kind: PatternType::Sector3gpp,
            sector: None,
        };
        assert!(matches!(
            pattern_gain(&k, &SphericalDirection::from_degrees(90.0, 0.0)),
            Err(AntennaError::MissingPatternData)
        ));
    }

    #[test]
    fn slanted_field_split() {
        // ±45° slants at broadside on an upright panel split power evenly
        let p = panel(1, 1, &[45.0, -45.0]);
        let d = SphericalDirection::from_degrees(90.0, 0.0);
        for pol in 0..2 {
            for model in [PolarizationModel::Model1, PolarizationModel::Model2] {
                let f = element_field(&p, pol, &d, model).unwrap();
                assert!((f.f_theta.norm_sqr() - 0.5).abs() < 1e-12);
                assert!((f.f_phi.norm_sqr() - 0.5).abs() < 1e-12);
            }
        }
        let a = element_field(&p, 0, &d, PolarizationModel::Model1).unwrap();
        let b = element_field(&p, 1, &d, PolarizationModel::Model1).unwrap();
        // orthogonal polarizations
        let ip = a.f_theta * b.f_theta.conj() + a.f_phi * b.f_phi.conj();
        assert!(ip.norm() < 1e-12);
    }

    #[test]
    fn aav_identity_and_coherent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = ChannelTensor::zeros(vec![0.0, 1.0], vec![0.0], 2, 4);
        for v in h.data_mut() {
            *v = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
        let out = apply_aav(&h, &PortMap::identity(2), &PortMap::identity(4)).unwrap();
        assert_eq!(out, h);

        let p = panel(1, 2, &[0.0]);
        let m = PortMap::broadside_vertical(&p, 2).unwrap();
        let mut h = ChannelTensor::zeros(vec![0.0], vec![0.0], 1, 2);
        let c = Complex64::new(0.3, -0.7);
        h.set(0, 0, 0, 0, c);
        h.set(0, 0, 0, 1, c);
        let out = apply_aav(&h, &PortMap::identity(1), &m).unwrap();
        assert!((out.get(0, 0, 0, 0) - c * 2f64.sqrt()).norm() < 1e-15);
    }

    #[test]
    fn aav_shape_mismatch() {
        let h = ChannelTensor::zeros(vec![0.0], vec![0.0], 2, 3);
        assert!(apply_aav(&h, &PortMap::identity(2), &PortMap::identity(4)).is_err());
    }

    #[test]
    fn port_map_validation() {
        let p = panel(2, 2, &[45.0, -45.0]);
        let bad = PortMap {
            n_elements: 8,
            ports: vec![vec![(0, Complex64::new(0.5f64.sqrt(), 0.0)), (4, Complex64::new(0.5f64.sqrt(), 0.0))]],
        };
        assert!(bad.validate().is_ok());
        assert!(bad.validate_for(&p).is_err());
        let unnormalized = PortMap {
            n_elements: 8,
            ports: vec![vec![(0, Complex64::new(1.0, 0.0)), (1, Complex64::new(1.0, 0.0))]],
        };
        assert!(unnormalized.validate().is_err());
        assert_eq!(PortMap::broadside_vertical(&p, 2).unwrap().n_ports(), 4);
        assert!(PortMap::broadside_vertical(&p, 3).is_err());
    }

    proptest! {
        #[test]
        fn aav_matches_matrix_oracle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = panel(2, 4, &[45.0, -45.0]);
            let mut tx = PortMap::broadside_vertical(&p, 2).unwrap();
            for port in &mut tx.ports {
                let ph: Vec<f64> = port.iter().map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
                let n = (port.len() as f64).sqrt();
                for (k, (_, w)) in port.iter_mut().enumerate() {
                    *w = Complex64::from_polar(1.0 / n, ph[k]);
                }
            }
            let rx = PortMap::identity(3);
            let mut h = ChannelTensor::zeros(vec![0.0], vec![0.0, 1.0], 3, 16);
            let mut h2 = h.clone();
            for (v, w) in h.data_mut().iter_mut().zip(h2.data_mut()) {
                *v = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                *w = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            }
            let out = apply_aav(&h, &rx, &tx).unwrap();
            for f in 0..2 {
                let oracle = rx.matrix() * h.matrix(0, f) * tx.matrix().transpose();
                prop_assert!(max_abs(&(oracle - out.matrix(0, f))) < 1e-12);
            }
            // linearity
            let a = Complex64::new(0.7, -1.2);
            let b = Complex64::new(-0.4, 0.1);
            let mut comb = h.clone();
            for (c, (x, y)) in comb.data_mut().iter_mut().zip(h.data().iter().zip(h2.data())) {
                *c = a * x + b * y;
            }
            let lhs = apply_aav(&comb, &rx, &tx).unwrap();
            let o2 = apply_aav(&h2, &rx, &tx).unwrap();
            for (i, v) in lhs.data().iter().enumerate() {
                prop_assert!((v - (a * out.data()[i] + b * o2.data()[i])).norm() < 1e-12);
            }
        }

        #[test]
        fn element_field_power_equals_gain(t in 0.05..3.09f64, ph in -3.1..3.1f64, pol in 0usize..2) {
            let mut p = panel(1, 1, &[45.0, -45.0]);
            p.orientation = Orientation::from_degrees(0.0, 10.0, 0.0);
            p.pattern = PatternKind::sector(sector());
            let d = SphericalDirection::new(t, wrap_rad(ph));
            let f = element_field(&p, pol, &d, PolarizationModel::Model1).unwrap();
            let dl = gcs_to_lcs_direction(&d, &p.orientation, p.slant_rad(pol));
            prop_assert!((f.power() - pattern_gain(&p.pattern, &dl).unwrap()).abs() < 1e-10);
        }
    }
}
