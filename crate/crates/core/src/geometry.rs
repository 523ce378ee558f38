//! Coordinate frames used by the geometric channel models.
//!
//! Three frames appear throughout: the global frame (GCS) shared by both
//! link ends, the panel frame (LCS′) obtained by rotating the GCS by the
//! panel orientation `(α, β, γ)`, and the polarization frame (LCS″) obtained
//! by an additional rotation about x by the slant angle `ζ`. Element field
//! patterns are defined in LCS″ and have to be brought back into the GCS
//! before they can be combined with the polarization coupling matrix.
//!
//! Angles are radians inside this module. Degree conversion happens at the
//! configuration boundary.

use nalgebra::{Matrix2, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Distance from a pole (rad) below which the azimuthal unit vectors are
/// considered undefined.
pub const POLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("direction with zenith {theta} rad is at a pole; azimuthal basis undefined")]
    PoleDegeneracy { theta: f64 },
}

/// Panel orientation: bearing `alpha` about z, downtilt `beta` about y and
/// slant `gamma` about x, all in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Orientation {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Orientation {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn from_degrees(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self::new(alpha.to_radians(), beta.to_radians(), gamma.to_radians())
    }
}

/// A direction on the unit sphere. `theta` is the zenith angle in `[0, π]`
/// (π/2 on the horizon) and `phi` the azimuth in `[−π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalDirection {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalDirection {
    /// Builds a direction from arbitrary angles, folding the zenith into
    /// `[0, π]` (with the matching half-turn in azimuth) and wrapping the
    /// azimuth into `[−π, π)`.
    pub fn new(theta: f64, phi: f64) -> Self {
        let mut theta = theta.rem_euclid(2.0 * PI);
        let mut phi = phi;
        if theta > PI {
            theta = 2.0 * PI - theta;
            phi += PI;
        }
        Self {
            theta,
            phi: wrap_rad(phi),
        }
    }

    pub fn from_degrees(theta: f64, phi: f64) -> Self {
        Self::new(theta.to_radians(), phi.to_radians())
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi.to_degrees()
    }

    /// Direction of a cartesian vector (need not be normalized).
    pub fn from_vector(v: &Vector3<f64>) -> Self {
        let n = v.norm();
        let theta = (v.z / n).clamp(-1.0, 1.0).acos();
        Self {
            theta,
            phi: principal_arg(v.x, v.y),
        }
    }

    fn near_pole(&self) -> bool {
        self.theta < POLE_TOLERANCE || (PI - self.theta) < POLE_TOLERANCE
    }
}

/// Orthogonal 3×3 rotation with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(pub Matrix3<f64>);

impl Rotation3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Maps a GCS vector into the rotated frame.
    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transpose() * v
    }

    /// Maps a local vector into the GCS.
    pub fn to_global(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// Complex field components along the spherical unit vectors θ̂ and φ̂.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldVector {
    pub f_theta: Complex64,
    pub f_phi: Complex64,
}

impl FieldVector {
    pub fn new(f_theta: Complex64, f_phi: Complex64) -> Self {
        Self { f_theta, f_phi }
    }

    pub fn real(f_theta: f64, f_phi: f64) -> Self {
        Self::new(Complex64::new(f_theta, 0.0), Complex64::new(f_phi, 0.0))
    }

    pub fn power(&self) -> f64 {
        self.f_theta.norm_sqr() + self.f_phi.norm_sqr()
    }
}

/// Which polarization model maps element fields into the GCS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarizationModel {
    /// Slant applied as an extra frame rotation (field defined in LCS″).
    #[default]
    Model1,
    /// Slant applied as a cos ζ / sin ζ power split of the LCS′ field.
    Model2,
}

/// `R_z(α)·R_y(β)·R_x(γ + extra_slant)`.
pub fn composite_rotation(o: &Orientation, extra_slant: f64) -> Rotation3 {
    let (sa, ca) = o.alpha.sin_cos();
    let (sb, cb) = o.beta.sin_cos();
    let (sg, cg) = (o.gamma + extra_slant).sin_cos();
    let rz = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cg, -sg, 0.0, sg, cg);
    Rotation3(rz * ry * rx)
}

/// Wraps an angle in degrees into `[−180, 180)`.
pub fn wrap_deg(x: f64) -> f64 {
    (x + 180.0).rem_euclid(360.0) - 180.0
}

/// Wraps an angle in radians into `[−π, π)`.
pub fn wrap_rad(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// `arg(re + j·im)` mapped to `[−π, π)`.
fn principal_arg(re: f64, im: f64) -> f64 {
    let a = im.atan2(re);
    if a >= PI {
        -PI
    } else {
        a
    }
}

/// `[sin θ cos φ, sin θ sin φ, cos θ]ᵀ`.
pub fn unit_direction(d: &SphericalDirection) -> Vector3<f64> {
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

/// Spherical unit vector θ̂ at `d`.
pub fn theta_hat(d: &SphericalDirection) -> Vector3<f64> {
    let (st, ct) = d.theta.sin_cos();
    let (sp, cp) = d.phi.sin_cos();
    Vector3::new(ct * cp, ct * sp, -st)
}

/// Spherical unit vector φ̂ at `d`.
pub fn phi_hat(d: &SphericalDirection) -> Vector3<f64> {
    let (sp, cp) = d.phi.sin_cos();
    Vector3::new(-sp, cp, 0.0)
}

/// Angles of the GCS direction `d` seen from the frame rotated by `o` and
/// the extra slant `zeta` (closed form of the inverse rotation).
pub fn gcs_to_lcs_direction(
    d: &SphericalDirection,
    o: &Orientation,
    zeta: f64,
) -> SphericalDirection {
    let (st, ct) = d.theta.sin_cos();
    let (sb, cb) = o.beta.sin_cos();
    let (sg, cg) = (o.gamma + zeta).sin_cos();
    let (sd, cd) = (d.phi - o.alpha).sin_cos();

    let z = cb * cg * ct + st * (sb * cg * cd - sg * sd);
    let re = cb * st * cd - sb * ct;
    let im = cb * sg * ct + st * (sb * sg * cd + cg * sd);
    SphericalDirection {
        theta: z.clamp(-1.0, 1.0).acos(),
        phi: principal_arg(re, im),
    }
}

/// Angle ψ of the 2×2 rotation taking local spherical field components to
/// global ones, for the frame `(α, β, γ + zeta)`.
pub fn field_displacement_angle(
    o: &Orientation,
    zeta: f64,
    d: &SphericalDirection,
) -> Result<f64, GeometryError> {
    if d.near_pole() {
        return Err(GeometryError::PoleDegeneracy { theta: d.theta });
    }
    let (st, ct) = d.theta.sin_cos();
    let (sb, cb) = o.beta.sin_cos();
    let (sg, cg) = (o.gamma + zeta).sin_cos();
    let (sd, cd) = (d.phi - o.alpha).sin_cos();

    let re = sg * ct * sd + cg * (cb * st - sb * ct * cd);
    let im = sg * cd + sb * cg * sd;
    Ok(principal_arg(re, im))
}

/// `[[cos ψ, −sin ψ], [sin ψ, cos ψ]]`.
pub fn displacement_matrix(psi: f64) -> Matrix2<f64> {
    let (s, c) = psi.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Rotates a locally defined field into the GCS at direction `d`.
///
/// For `Model1` the input is the LCS″ field and the frame slant is
/// `γ + ζ`. For `Model2` the input is the LCS′ field that already carries
/// the cos ζ / sin ζ split, so only `γ` enters the rotation.
pub fn transform_field_to_gcs(
    f: &FieldVector,
    o: &Orientation,
    zeta: f64,
    d: &SphericalDirection,
    model: PolarizationModel,
) -> Result<FieldVector, GeometryError> {
    let slant = match model {
        PolarizationModel::Model1 => zeta,
        PolarizationModel::Model2 => 0.0,
    };
    let psi = field_displacement_angle(o, slant, d)?;
    let (s, c) = psi.sin_cos();
    Ok(FieldVector {
        f_theta: f.f_theta * c - f.f_phi * s,
        f_phi: f.f_theta * s + f.f_phi * c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rot_oracle(o: &Orientation, zeta: f64) -> Matrix3<f64> {
        // elementary rotations built independently and multiplied out
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), o.alpha);
        let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), o.beta);
        let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), o.gamma + zeta);
        (rz * ry * rx).into_inner()
    }

    #[test]
    fn identity_rotation() {
        let r = composite_rotation(&Orientation::default(), 0.0);
        assert!((r.0 - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn downtilt_only() {
        let r = composite_rotation(&Orientation::from_degrees(0.0, 10.0, 0.0), 0.0);
        let c = 10f64.to_radians().cos();
        assert!((r.0[(0, 0)] - c).abs() < 1e-15);
        assert!((r.0[(1, 1)] - 1.0).abs() < 1e-15);
        assert!((r.0[(2, 2)] - c).abs() < 1e-15);
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_deg(190.0), -170.0);
        assert_eq!(wrap_deg(180.0), -180.0);
        assert!((wrap_deg(-535.0) + 175.0).abs() < 1e-12);
        assert_eq!(wrap_deg(-180.0), -180.0);
    }

    #[test]
    fn wrap_brute_force() {
        for i in -2000..2000 {
            let x = i as f64 * 0.73;
            let mut y = x;
            while y < -180.0 {
                y += 360.0;
            }
            while y >= 180.0 {
                y -= 360.0;
            }
            assert!((wrap_deg(x) - y).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn lcs_identity_and_bearing() {
        let d = SphericalDirection::from_degrees(70.0, 40.0);
        let l = gcs_to_lcs_direction(&d, &Orientation::default(), 0.0);
        assert!((l.theta - d.theta).abs() < 1e-12);
        assert!((l.phi - d.phi).abs() < 1e-12);

        let d = SphericalDirection::from_degrees(90.0, 50.0);
        let l = gcs_to_lcs_direction(&d, &Orientation::from_degrees(30.0, 0.0, 0.0), 0.0);
        assert!((l.theta_deg() - 90.0).abs() < 1e-10);
        assert!((l.phi_deg() - 20.0).abs() < 1e-10);
    }

    #[test]
    fn unit_direction_examples() {
        let v = unit_direction(&SphericalDirection::from_degrees(90.0, 0.0));
        assert!((v - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let v = unit_direction(&SphericalDirection::from_degrees(0.0, 123.0));
        assert!((v - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn pole_is_rejected() {
        let o = Orientation::from_degrees(10.0, 20.0, 30.0);
        let d = SphericalDirection::new(0.0, 0.3);
        assert!(matches!(
            field_displacement_angle(&o, 0.0, &d),
            Err(GeometryError::PoleDegeneracy { .. })
        ));
        let d = SphericalDirection::new(PI, 0.3);
        assert!(field_displacement_angle(&o, 0.0, &d).is_err());
    }

    #[test]
    fn psi_zero_without_tilt_or_slant() {
        for a in [-2.0, 0.0, 1.3] {
            let o = Orientation::new(a, 0.0, 0.0);
            let d = SphericalDirection::new(1.1, -0.4);
            assert!(field_displacement_angle(&o, 0.0, &d).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn psi_tilted_slanted_example() {
        let o = Orientation::from_degrees(0.0, 10.0, 0.0);
        let zeta = 45f64.to_radians();
        let d = SphericalDirection::from_degrees(90.0, 0.0);
        let psi = field_displacement_angle(&o, zeta, &d).unwrap();
        let r = composite_rotation(&o, zeta);
        let local = SphericalDirection::from_vector(&r.to_local(&unit_direction(&d)));
        let th2 = theta_hat(&local);
        let re = theta_hat(&d).dot(&(r.0 * th2));
        let im = phi_hat(&d).dot(&(r.0 * th2));
        assert!((psi - im.atan2(re)).abs() < 1e-12);
    }

    #[test]
    fn models_agree_without_slant() {
        let o = Orientation::from_degrees(15.0, 8.0, 3.0);
        let d = SphericalDirection::from_degrees(100.0, 33.0);
        let f = FieldVector::real(0.8, 0.0);
        let a = transform_field_to_gcs(&f, &o, 0.0, &d, PolarizationModel::Model1).unwrap();
        let b = transform_field_to_gcs(&f, &o, 0.0, &d, PolarizationModel::Model2).unwrap();
        assert!((a.f_theta - b.f_theta).norm() < 1e-12);
        assert!((a.f_phi - b.f_phi).norm() < 1e-12);
    }

    #[test]
    fn isotropic_power_is_unity() {
        let o = Orientation::from_degrees(-40.0, 12.0, 5.0);
        for k in 0..20 {
            let d = SphericalDirection::new(0.2 + 0.13 * k as f64, -3.0 + 0.3 * k as f64);
            let f = transform_field_to_gcs(
                &FieldVector::real(1.0, 0.0),
                &o,
                0.7,
                &d,
                PolarizationModel::Model1,
            )
            .unwrap();
            assert!((f.power() - 1.0).abs() < 1e-12);
        }
    }

    fn orientation() -> impl Strategy<Value = Orientation> {
        (-PI..PI, -PI..PI, -PI..PI).prop_map(|(a, b, g)| Orientation::new(a, b, g))
    }

    fn direction() -> impl Strategy<Value = SphericalDirection> {
        (0.01..PI - 0.01, -PI..PI).prop_map(|(t, p)| SphericalDirection::new(t, p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rotation_is_orthonormal(o in orientation(), z in -PI..PI) {
            let r = composite_rotation(&o, z).0;
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            prop_assert!((r - rot_oracle(&o, z)).abs().max() < 1e-12);
        }

        #[test]
        fn unit_direction_has_unit_norm(d in direction()) {
            prop_assert!((unit_direction(&d).norm() - 1.0).abs() < 1e-14);
        }

        #[test]
        fn wrap_is_idempotent(x in -1e4f64..1e4) {
            let w = wrap_deg(x);
            prop_assert!((-180.0..180.0).contains(&w));
            prop_assert_eq!(wrap_deg(w), w);
            prop_assert!(((x - w) / 360.0 - ((x - w) / 360.0).round()).abs() < 1e-9);
        }

        #[test]
        fn closed_form_matches_matrix_oracle(o in orientation(), z in -PI..PI, d in direction()) {
            let l = gcs_to_lcs_direction(&d, &o, z);
            let r = composite_rotation(&o, z);
            let v = r.to_local(&unit_direction(&d));
            let oracle = SphericalDirection::from_vector(&v);
            prop_assert!((l.theta - oracle.theta).abs() < 1e-10);
            if oracle.theta > 1e-6 && PI - oracle.theta > 1e-6 {
                let dphi = wrap_rad(l.phi - oracle.phi);
                prop_assert!(dphi.abs() < 1e-10);
            }
        }

        #[test]
        fn lcs_round_trip(o in orientation(), z in -PI..PI, d in direction()) {
            let l = gcs_to_lcs_direction(&d, &o, z);
            prop_assume!(l.theta > 1e-6 && PI - l.theta > 1e-6);
            let back = SphericalDirection::from_vector(
                &composite_rotation(&o, z).to_global(&unit_direction(&l)),
            );
            prop_assert!((back.theta - d.theta).abs() < 1e-10);
            prop_assert!(wrap_rad(back.phi - d.phi).abs() < 1e-10);
        }

        #[test]
        fn psi_matches_unit_vector_oracle(o in orientation(), z in -PI..PI, d in direction()) {
            let psi = field_displacement_angle(&o, z, &d).unwrap();
            let r = composite_rotation(&o, z);
            let local = gcs_to_lcs_direction(&d, &o, z);
            prop_assume!(local.theta > 1e-6 && PI - local.theta > 1e-6);
            let th2 = r.0 * theta_hat(&local);
            let ph2 = r.0 * phi_hat(&local);
            let m = Matrix2::new(
                theta_hat(&d).dot(&th2), theta_hat(&d).dot(&ph2),
                phi_hat(&d).dot(&th2), phi_hat(&d).dot(&ph2),
            );
            prop_assert!((m - displacement_matrix(psi)).abs().max() < 1e-9);
            let dm = displacement_matrix(psi);
            prop_assert!((dm.transpose() * dm - Matrix2::identity()).abs().max() < 1e-12);
            prop_assert!((dm.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn field_power_preserved(
            o in orientation(), z in -PI..PI, d in direction(),
            a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, e in -2.0..2.0f64,
        ) {
            let f = FieldVector::new(Complex64::new(a, b), Complex64::new(c, e));
            for model in [PolarizationModel::Model1, PolarizationModel::Model2] {
                let g = transform_field_to_gcs(&f, &o, z, &d, model).unwrap();
                prop_assert!((g.power() - f.power()).abs() < 1e-12 * (1.0 + f.power()));
            }
        }
    }
}
