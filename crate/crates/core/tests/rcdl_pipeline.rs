use rcdl_core::antenna::{PanelConfig, PatternKind, PortMap, SectorParams};
use rcdl_core::cdl::{ClusterTable, CdlLink, FixedRayData, MotionConfig};
use rcdl_core::geometry::{Orientation, PolarizationModel};
use rcdl_core::rcdl::{build_rcdl, table_spreads, truncate_clusters, SpreadTargets};
use std::path::{Path, PathBuf};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn baseline_link() -> CdlLink {
    let bs = PanelConfig {
        n_cols: 8,
        n_rows: 2,
        d_y: 0.5,
        d_z: 0.5,
        polarization_slants: vec![45.0, -45.0],
        orientation: Orientation::from_degrees(0.0, 10.0, 0.0),
        pattern: PatternKind::sector(SectorParams::load(&data("sector_pattern.json")).unwrap()),
    };
    let ue = PanelConfig {
        n_cols: 1,
        n_rows: 2,
        d_y: 0.5,
        d_z: 0.5,
        polarization_slants: vec![0.0, 90.0],
        orientation: Orientation::from_degrees(180.0, 0.0, 0.0),
        pattern: PatternKind::isotropic(),
    };
    CdlLink {
        bs_map: PortMap::identity(bs.n_elements()),
        ue_map: PortMap::identity(ue.n_elements()),
        bs,
        ue,
        carrier_hz: 3.5e9,
        motion: MotionConfig::from_kmh(3.0, 65.0, 90.0),
        model: PolarizationModel::Model1,
    }
}

fn inputs() -> (ClusterTable, SpreadTargets, FixedRayData) {
    (
        ClusterTable::load_csv(&data("cdl_c.csv")).unwrap(),
        SpreadTargets::load(&data("rcdl_c_targets.json")).unwrap(),
        FixedRayData::load(&data("rcdl_c_coupling.json"), &data("rcdl_c_phases.json")).unwrap(),
    )
}

#[test]
fn matches_reference_table() {
    let (base, targets, fixed) = inputs();
    let out = build_rcdl(&base, &targets, &fixed, &baseline_link(), 12).unwrap();
    let reference = ClusterTable::load_csv(&data("rcdl_c_reference.csv")).unwrap();
    assert_eq!(out.table.ids, reference.ids);
    for i in 0..12 {
        assert!((out.table.delays_s[i] - reference.delays_s[i]).abs() < 1e-9, "delay {i}");
        assert!((out.table.powers[i] - reference.powers[i]).abs() < 1e-8, "power {i}");
        for k in 0..4 {
            assert!((out.table.angles[k][i] - reference.angles[k][i]).abs() < 0.01, "angle {k} of {i}");
        }
    }
    for k in 0..4 {
        assert!((out.table.spreads[k] - reference.spreads[k]).abs() < 1e-6);
    }
    assert!((out.table.rms_delay_spread() * 1e9 / 365.0 - 1.0).abs() < 1e-6);
    assert_eq!(out.report.kept.len() + out.report.removed.len(), 24);
}

#[test]
fn scaled_spreads_hit_targets_before_truncation() {
    let (base, targets, _) = inputs();
    let scaled = rcdl_core::rcdl::scale_table(&base, &targets.angular()).unwrap();
    let s = table_spreads(&scaled).unwrap();
    for k in 0..4 {
        // circular spreads scale almost linearly for these magnitudes
        assert!((s[k].0 / targets.angular()[k] - 1.0).abs() < 0.06, "family {k}: {}", s[k].0);
    }
}

#[test]
fn identity_pipeline() {
    let (base, _, fixed) = inputs();
    let s = table_spreads(&base).unwrap();
    let targets = SpreadTargets {
        asd_deg: s[0].0,
        asa_deg: s[1].0,
        zsd_deg: s[2].0,
        zsa_deg: s[3].0,
        ds_ns: base.rms_delay_spread() * 1e9,
    };
    let out = build_rcdl(&base, &targets, &fixed, &baseline_link(), 24).unwrap();
    assert!(out.report.removed.is_empty());
    for i in 0..24 {
        assert!((out.table.delays_s[i] - base.delays_s[i]).abs() < 1e-15);
        for k in 0..4 {
            assert!((out.table.angles[k][i] - base.angles[k][i]).abs() < 1e-9);
        }
    }
}

#[test]
fn isotropic_truncation_follows_raw_power() {
    let (base, _, fixed) = inputs();
    let mut link = baseline_link();
    link.bs.pattern = PatternKind::isotropic();
    link.bs.n_cols = 1;
    link.bs.n_rows = 1;
    link.bs.polarization_slants = vec![0.0];
    link.ue.n_rows = 1;
    link.ue.polarization_slants = vec![0.0];
    link.bs.orientation = Orientation::default();
    link.ue.orientation = Orientation::default();
    link.bs_map = PortMap::identity(1);
    link.ue_map = PortMap::identity(1);
    // vertical isotropic dipoles keep |F_θ| = 1, so the probe is P_n exactly
    let (t, rep) = truncate_clusters(&base, 12, &link, rcdl_core::cdl::CouplingMode::Fixed(&fixed)).unwrap();
    let mut idx: Vec<usize> = (0..24).collect();
    idx.sort_by(|&a, &b| base.powers[b].total_cmp(&base.powers[a]).then(a.cmp(&b)));
    let mut want: Vec<usize> = idx[..12].iter().map(|&i| base.ids[i]).collect();
    want.sort_unstable();
    assert_eq!(rep.kept, want);
    assert!((t.powers.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn truncation_deviation_is_reported() {
    let (base, targets, fixed) = inputs();
    let out = build_rcdl(&base, &targets, &fixed, &baseline_link(), 12).unwrap();
    let recomputed = table_spreads(&out.table).unwrap();
    for k in 0..4 {
        assert!((recomputed[k].0 - out.report.spreads_after_deg[k]).abs() < 1e-9);
        let dev = out.report.spreads_after_deg[k] / targets.angular()[k] - 1.0;
        println!("family {k}: before {:.2} after {:.2} ({:+.1}%)", out.report.spreads_before_deg[k], out.report.spreads_after_deg[k], 100.0 * dev);
    }
}
