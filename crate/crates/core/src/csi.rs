//! Codebook-based CSI: the oversampled 2D-IDFT beam grid, Type-I WB/SB
//! precoders, Rel-16 enhanced Type-II with SD+FD compression, and the
//! selection strategies that pick a PMI from a channel estimate.
//!
//! Port order inside one polarization is `n1_idx·N2 + n2_idx`, the first
//! `N1·N2` ports carry the first polarization. Every emitted precoder is
//! normalized per subband to `WᴴW = (1/ν)I`.

use crate::linkabs::{lmmse_filter, per_layer_sinr, MiCurve};
use crate::tensor::CMat;
use nalgebra::{DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

/// Relative tolerance under which two captured powers count as a tie.
const TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CsiError {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("eigendecomposition failed on non-finite input")]
    EigDecompositionFailure,
    #[error("precoder of subband {subband} cannot be normalized")]
    SingularNormalization { subband: usize },
    #[error("failed to load {path}: {msg}")]
    Load { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DftGrid {
    pub n1: usize,
    pub n2: usize,
    pub o1: usize,
    pub o2: usize,
}

impl DftGrid {
    pub fn new(n1: usize, n2: usize, o1: usize, o2: usize) -> Result<Self, CsiError> {
        let g = Self { n1, n2, o1, o2 };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), CsiError> {
        if self.n1 == 0 || self.n2 == 0 || self.o1 == 0 || self.o2 == 0 {
            return Err(CsiError::InvalidConfig(format!("grid dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Ports per polarization.
    pub fn n_ports(&self) -> usize {
        self.n1 * self.n2
    }

    /// Total beams `N1O1 × N2O2`.
    pub fn n_beams(&self) -> usize {
        self.n1 * self.o1 * self.n2 * self.o2
    }

    fn check(&self, n1: usize, n2: usize, q1: usize, q2: usize) -> Result<(), CsiError> {
        if n1 >= self.n1 || n2 >= self.n2 || q1 >= self.o1 || q2 >= self.o2 {
            return Err(CsiError::IndexOutOfRange(format!("beam ({n1},{n2}) rotation ({q1},{q2}) on {self:?}")));
        }
        Ok(())
    }
}

fn idft_axis(n: usize, o: usize, idx: usize, q: usize) -> impl Iterator<Item = Complex64> {
    let step = 2.0 * PI * (idx as f64 / n as f64 + q as f64 / (o * n) as f64);
    (0..n).map(move |k| Complex64::from_polar(1.0, step * k as f64))
}

/// `u = u′(n₁,q₁) ⊗ u″(n₂,q₂)`, unit-magnitude entries.
pub fn dft_beam(g: &DftGrid, n1: usize, n2: usize, q1: usize, q2: usize) -> Result<DVector<Complex64>, CsiError> {
    g.check(n1, n2, q1, q2)?;
    let h: Vec<Complex64> = idft_axis(g.n1, g.o1, n1, q1).collect();
    let v: Vec<Complex64> = idft_axis(g.n2, g.o2, n2, q2).collect();
    Ok(DVector::from_fn(g.n_ports(), |i, _| h[i / g.n2] * v[i % g.n2]))
}

/// Per-subband precoding matrices, each `2N₁N₂ × ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    pub subbands: Vec<CMat>,
}

impl Precoder {
    pub fn rank(&self) -> usize {
        self.subbands.first().map_or(0, |w| w.ncols())
    }

    pub fn n_ports(&self) -> usize {
        self.subbands.first().map_or(0, |w| w.nrows())
    }

    /// Worst entrywise deviation of `WᴴW` from `(1/ν)I` over all subbands.
    pub fn gram_error(&self) -> f64 {
        let nu = self.rank();
        let target = CMat::identity(nu, nu) * Complex64::new(1.0 / nu as f64, 0.0);
        self.subbands
            .iter()
            .map(|w| crate::tensor::max_abs(&(w.adjoint() * w - &target)))
            .fold(0.0, f64::max)
    }

    pub fn for_prb(&self, prb: usize, prb_per_sb: usize) -> &CMat {
        &self.subbands[(prb / prb_per_sb).min(self.subbands.len() - 1)]
    }
}

/// Orthonormalizes the columns symmetrically, `W(WᴴW)^{-1/2}`, then scales
/// to `(1/ν)I`. Leaves already orthogonal columns pointing the same way.
pub fn normalize_columns(w: &CMat, subband: usize) -> Result<CMat, CsiError> {
    let nu = w.ncols();
    let gram = w.adjoint() * w;
    if gram.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(CsiError::SingularNormalization { subband });
    }
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(CsiError::SingularNormalization { subband });
    }
    let d = CMat::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(1.0 / (l * nu as f64).sqrt(), 0.0)));
    let inv_sqrt = &eig.eigenvectors * d * eig.eigenvectors.adjoint();
    Ok(w * inv_sqrt)
}

/// Reporting granularity of the co-phasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CophaseMode {
    Wideband,
    Subband,
}

/// Mapping between PRBs and subbands; the last subband may be short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubbandLayout {
    pub n_prb: usize,
    pub prb_per_sb: usize,
}

impl SubbandLayout {
    pub fn n3(&self) -> usize {
        self.n_prb.div_ceil(self.prb_per_sb)
    }

    pub fn subband_of(&self, prb: usize) -> usize {
        prb / self.prb_per_sb
    }

    pub fn prbs(&self, sb: usize) -> std::ops::Range<usize> {
        sb * self.prb_per_sb..((sb + 1) * self.prb_per_sb).min(self.n_prb)
    }
}

const COPHASE: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

/// Co-phasing value `j^k`.
pub fn cophase_value(k: u8) -> Complex64 {
    COPHASE[(k % 4) as usize]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeIPmi {
    pub q1: usize,
    pub q2: usize,
    /// `⌈ν/2⌉` orthogonal beams `(n₁, n₂)` of the rotation, strongest first.
    pub beams: Vec<(usize, usize)>,
    pub rank: usize,
    /// Indices into `{1, j, −1, −j}`: one entry in WB mode, `N₃` in SB mode.
    pub cophase: Vec<u8>,
    /// Index `p` of `θ_p = e^{jπp/4}` in the ranks 3–4 codebook for 16 or
    /// more ports. `beams` then holds one beam of the half-panel grid.
    #[serde(default)]
    pub theta: Option<u8>,
}

fn beams_for_rank(rank: usize) -> usize {
    rank.div_ceil(2)
}

/// Ranks 3–4 on 16 or more ports use one beam over half the columns and
/// a phase `θ` between the two halves instead of two orthogonal beams.
pub fn uses_half_panel(g: &DftGrid, rank: usize) -> bool {
    (3..=4).contains(&rank) && 2 * g.n_ports() >= 16 && g.n1 % 2 == 0
}

/// Grid of one half panel, `N₁/2 × N₂`.
pub fn half_panel_grid(g: &DftGrid) -> DftGrid {
    DftGrid { n1: g.n1 / 2, ..*g }
}

pub fn theta_value(p: u8) -> Complex64 {
    Complex64::from_polar(1.0, PI * (p % 4) as f64 / 4.0)
}

impl TypeIPmi {
    pub fn validate(&self, g: &DftGrid, n3: usize) -> Result<(), CsiError> {
        if self.rank == 0 || self.rank > 2 * g.n_ports() {
            return Err(CsiError::IndexOutOfRange(format!("rank {} for {} ports", self.rank, 2 * g.n_ports())));
        }
        let half = uses_half_panel(g, self.rank);
        if half != self.theta.is_some() {
            return Err(CsiError::IndexOutOfRange(format!(
                "rank {} on {} ports {} a half-panel phase",
                self.rank,
                2 * g.n_ports(),
                if half { "needs" } else { "takes no" }
            )));
        }
        if self.theta.is_some_and(|p| p > 3) {
            return Err(CsiError::IndexOutOfRange("half-panel phase index above 3".into()));
        }
        let (nb, grid) = if half { (1, half_panel_grid(g)) } else { (beams_for_rank(self.rank), *g) };
        if self.beams.len() != nb {
            return Err(CsiError::IndexOutOfRange(format!("{} beams for rank {}", self.beams.len(), self.rank)));
        }
        for (i, &(a, b)) in self.beams.iter().enumerate() {
            grid.check(a, b, self.q1, self.q2)?;
            if self.beams[..i].contains(&(a, b)) {
                return Err(CsiError::IndexOutOfRange(format!("beam ({a},{b}) repeated")));
            }
        }
        if self.cophase.len() != 1 && self.cophase.len() != n3 {
            return Err(CsiError::IndexOutOfRange(format!("{} co-phasing entries for {n3} subbands", self.cophase.len())));
        }
        if self.cophase.iter().any(|&c| c > 3) {
            return Err(CsiError::IndexOutOfRange("co-phasing index above 3".into()));
        }
        Ok(())
    }
}

/// Unnormalized Type-I columns for one co-phasing value. Layer `l` uses
/// beam `l mod ⌈ν/2⌉`; the first `⌈ν/2⌉` layers take `+φ`, the rest `−φ`.
fn type_i_columns(beams: &[DVector<Complex64>], rank: usize, phi: Complex64) -> CMat {
    let p = beams[0].len();
    let nb = beams.len();
    let mut w = CMat::zeros(2 * p, rank);
    for l in 0..rank {
        let u = &beams[l % nb];
        let s = if l < nb { phi } else { -phi };
        for i in 0..p {
            w[(i, l)] = u[i];
            w[(p + i, l)] = s * u[i];
        }
    }
    w * Complex64::new(1.0 / ((2 * p * rank) as f64).sqrt(), 0.0)
}

/// Sign of `θ` and of `φ` per layer in the half-panel codebook.
const HALF_PANEL_SIGNS: [(f64, f64); 4] = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];

/// Half-panel columns: blocks `[ṽ; ±θṽ; ±φṽ; ±φθṽ]` over the two halves of
/// each polarization.
fn half_panel_columns(v: &DVector<Complex64>, rank: usize, phi: Complex64, theta: Complex64) -> CMat {
    let q = v.len();
    let mut w = CMat::zeros(4 * q, rank);
    for (l, &(a, b)) in HALF_PANEL_SIGNS.iter().take(rank).enumerate() {
        let th = theta * a;
        let ph = phi * b;
        for i in 0..q {
            w[(i, l)] = v[i];
            w[(q + i, l)] = th * v[i];
            w[(2 * q + i, l)] = ph * v[i];
            w[(3 * q + i, l)] = ph * th * v[i];
        }
    }
    w * Complex64::new(1.0 / ((4 * q * rank) as f64).sqrt(), 0.0)
}

fn beam_vectors(g: &DftGrid, q1: usize, q2: usize, beams: &[(usize, usize)]) -> Result<Vec<DVector<Complex64>>, CsiError> {
    beams.iter().map(|&(a, b)| dft_beam(g, a, b, q1, q2)).collect()
}

/// Type-I precoder for every subband.
pub fn build_type_i(pmi: &TypeIPmi, g: &DftGrid, n3: usize) -> Result<Precoder, CsiError> {
    pmi.validate(g, n3)?;
    let grid = if pmi.theta.is_some() { half_panel_grid(g) } else { *g };
    let u = beam_vectors(&grid, pmi.q1, pmi.q2, &pmi.beams)?;
    let subbands = (0..n3)
        .map(|t| {
            let k = if pmi.cophase.len() == 1 { pmi.cophase[0] } else { pmi.cophase[t] };
            match pmi.theta {
                Some(p) => half_panel_columns(&u[0], pmi.rank, cophase_value(k), theta_value(p)),
                None => type_i_columns(&u, pmi.rank, cophase_value(k)),
            }
        })
        .collect();
    Ok(Precoder { subbands })
}

/// Chosen rotation and beams, strongest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamSelection {
    pub q1: usize,
    pub q2: usize,
    pub beams: Vec<(usize, usize)>,
}

fn beats(a: f64, b: f64) -> bool {
    a > b + TIE_RTOL * a.abs().max(b.abs())
}

/// Greedy top-`L` beams per rotation, best rotation by captured power
/// `Σ uᴴRu`. Ties go to the lowest beam index and the lowest rotation.
pub fn select_beams(r: &CMat, g: &DftGrid, l: usize) -> Result<BeamSelection, CsiError> {
    let p = g.n_ports();
    if r.nrows() != p || r.ncols() != p {
        return Err(CsiError::InvalidConfig(format!("covariance {}x{} for {p} ports", r.nrows(), r.ncols())));
    }
    if l == 0 || l > p {
        return Err(CsiError::InvalidConfig(format!("cannot pick {l} of {p} orthogonal beams")));
    }
    let mut best: Option<(f64, BeamSelection)> = None;
    for q1 in 0..g.o1 {
        for q2 in 0..g.o2 {
            let mut power = Vec::with_capacity(p);
            for a in 0..g.n1 {
                for b in 0..g.n2 {
                    let u = dft_beam(g, a, b, q1, q2)?;
                    power.push((u.adjoint() * r * &u)[(0, 0)].re);
                }
            }
            let mut taken = vec![false; p];
            let mut beams = Vec::with_capacity(l);
            let mut total = 0.0;
            for _ in 0..l {
                let mut pick: Option<usize> = None;
                for i in 0..p {
                    if !taken[i] && pick.is_none_or(|k| beats(power[i], power[k])) {
                        pick = Some(i);
                    }
                }
                let i = pick.expect("l <= p leaves a free beam");
                taken[i] = true;
                total += power[i];
                beams.push((i / g.n2, i % g.n2));
            }
            if best.as_ref().is_none_or(|(t, _)| beats(total, *t)) {
                best = Some((total, BeamSelection { q1, q2, beams }));
            }
        }
    }
    Ok(best.expect("grid has at least one rotation").1)
}

/// Mean of `HᴴH` over the given per-PRB channels.
pub fn wideband_covariance(h: &[CMat]) -> CMat {
    let n = h[0].ncols();
    let mut r = CMat::zeros(n, n);
    for m in h {
        r += m.adjoint() * m;
    }
    r / Complex64::new(h.len() as f64, 0.0)
}

/// `R₁₁ + R₂₂` of a dual-polarized covariance.
pub fn polarization_sum(r: &CMat) -> CMat {
    let p = r.nrows() / 2;
    r.view((0, 0), (p, p)) + r.view((p, p), (p, p))
}

/// Mean MI over layers of the LMMSE SINRs of `h·w`.
fn mean_layer_mi(h: &CMat, w: &CMat, noise_var: f64, mi: &MiCurve) -> f64 {
    let g = h * w;
    let s = per_layer_sinr(&g, &lmmse_filter(&g, noise_var), noise_var);
    s.iter().map(|&x| mi.mi(x)).sum::<f64>() / s.len() as f64
}

/// Average MI of every co-phasing candidate over the PRBs of each subband,
/// `out[t][k]`.
pub fn cophase_scores(
    h: &[CMat],
    layout: &SubbandLayout,
    g: &DftGrid,
    sel: &BeamSelection,
    rank: usize,
    noise_var: f64,
    mi: &MiCurve,
) -> Result<Vec<[f64; 4]>, CsiError> {
    let u = beam_vectors(g, sel.q1, sel.q2, &sel.beams)?;
    let cands: Vec<CMat> = COPHASE.iter().map(|&phi| type_i_columns(&u, rank, phi)).collect();
    Ok((0..layout.n3())
        .map(|t| {
            let mut acc = [0.0; 4];
            for j in layout.prbs(t) {
                for (k, w) in cands.iter().enumerate() {
                    acc[k] += mean_layer_mi(&h[j], w, noise_var, mi);
                }
            }
            acc
        })
        .collect())
}

/// For rank ≥ 2 the pair `(φ, −φ)` spans the same columns, so exact ties
/// are structural and resolve to the lower index.
fn argmax4(v: &[f64; 4]) -> u8 {
    let mut k = 0;
    for i in 1..4 {
        if beats(v[i], v[k]) {
            k = i;
        }
    }
    k as u8
}

/// Picks the co-phasing maximizing the mean MI per subband (SB mode) or
/// over the whole band (WB mode).
#[allow(clippy::too_many_arguments)]
pub fn select_cophase(
    h: &[CMat],
    layout: &SubbandLayout,
    g: &DftGrid,
    sel: &BeamSelection,
    rank: usize,
    mode: CophaseMode,
    noise_var: f64,
    mi: &MiCurve,
) -> Result<TypeIPmi, CsiError> {
    if h.len() != layout.n_prb {
        return Err(CsiError::InvalidConfig(format!("{} PRB channels for {} PRBs", h.len(), layout.n_prb)));
    }
    let scores = cophase_scores(h, layout, g, sel, rank, noise_var, mi)?;
    let cophase = match mode {
        CophaseMode::Subband => scores.iter().map(argmax4).collect(),
        CophaseMode::Wideband => {
            let mut tot = [0.0; 4];
            for s in &scores {
                for k in 0..4 {
                    tot[k] += s[k];
                }
            }
            vec![argmax4(&tot)]
        }
    };
    Ok(TypeIPmi {
        q1: sel.q1,
        q2: sel.q2,
        beams: sel.beams.clone(),
        rank,
        cophase,
        theta: None,
    })
}

/// `R₁₁ + R₂₂` of each polarization, folded over the two half panels.
fn half_panel_covariance(r: &CMat) -> CMat {
    let rp = polarization_sum(r);
    let q = rp.nrows() / 2;
    rp.view((0, 0), (q, q)) + rp.view((q, q), (q, q))
}

/// Half-panel selection: strongest half-panel beam, then `θ` over the
/// whole band and `φ` per subband (SB) or over the band (WB) by mean MI.
#[allow(clippy::too_many_arguments)]
fn select_half_panel(
    h: &[CMat],
    layout: &SubbandLayout,
    g: &DftGrid,
    rank: usize,
    mode: CophaseMode,
    noise_var: f64,
    mi: &MiCurve,
) -> Result<TypeIPmi, CsiError> {
    let hg = half_panel_grid(g);
    let sel = select_beams(&half_panel_covariance(&wideband_covariance(h)), &hg, 1)?;
    let v = dft_beam(&hg, sel.beams[0].0, sel.beams[0].1, sel.q1, sel.q2)?;
    // scores[p][t][k]
    let scores: Vec<Vec<[f64; 4]>> = (0..4u8)
        .map(|p| {
            let cands: Vec<CMat> = COPHASE
                .iter()
                .map(|&phi| half_panel_columns(&v, rank, phi, theta_value(p)))
                .collect();
            (0..layout.n3())
                .map(|t| {
                    let mut acc = [0.0; 4];
                    for j in layout.prbs(t) {
                        for (k, w) in cands.iter().enumerate() {
                            acc[k] += mean_layer_mi(&h[j], w, noise_var, mi);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let pick = |sc: &[[f64; 4]]| -> (f64, Vec<u8>) {
        match mode {
            CophaseMode::Subband => {
                let ks: Vec<u8> = sc.iter().map(argmax4).collect();
                (sc.iter().zip(&ks).map(|(s, &k)| s[k as usize]).sum(), ks)
            }
            CophaseMode::Wideband => {
                let mut tot = [0.0; 4];
                for s in sc {
                    for k in 0..4 {
                        tot[k] += s[k];
                    }
                }
                let k = argmax4(&tot);
                (tot[k as usize], vec![k])
            }
        }
    };
    let mut best: Option<(f64, u8, Vec<u8>)> = None;
    for (p, sc) in scores.iter().enumerate() {
        let (v, ks) = pick(sc);
        if best.as_ref().is_none_or(|(b, _, _)| beats(v, *b)) {
            best = Some((v, p as u8, ks));
        }
    }
    let (_, p, cophase) = best.expect("four candidates");
    Ok(TypeIPmi {
        q1: sel.q1,
        q2: sel.q2,
        beams: sel.beams,
        rank,
        cophase,
        theta: Some(p),
    })
}

/// Full Type-I selection from per-PRB channel estimates.
pub fn select_type_i(
    h: &[CMat],
    layout: &SubbandLayout,
    g: &DftGrid,
    rank: usize,
    mode: CophaseMode,
    noise_var: f64,
    mi: &MiCurve,
) -> Result<TypeIPmi, CsiError> {
    if uses_half_panel(g, rank) {
        if h.len() != layout.n_prb {
            return Err(CsiError::InvalidConfig(format!("{} PRB channels for {} PRBs", h.len(), layout.n_prb)));
        }
        return select_half_panel(h, layout, g, rank, mode, noise_var, mi);
    }
    let r = polarization_sum(&wideband_covariance(h));
    let sel = select_beams(&r, g, beams_for_rank(rank))?;
    select_cophase(h, layout, g, &sel, rank, mode, noise_var, mi)
}

/// Uniform Type-I draw: rotation, an ordered set of distinct beams (or one
/// half-panel beam and `θ`) and one wideband co-phasing value.
pub fn random_pmi<R: Rng + ?Sized>(g: &DftGrid, rank: usize, rng: &mut R) -> Result<TypeIPmi, CsiError> {
    let nb = beams_for_rank(rank);
    if rank == 0 || nb > g.n_ports() {
        return Err(CsiError::InvalidConfig(format!("rank {rank} on {} ports per polarization", g.n_ports())));
    }
    let q1 = rng.random_range(0..g.o1);
    let q2 = rng.random_range(0..g.o2);
    if uses_half_panel(g, rank) {
        let hg = half_panel_grid(g);
        let i = rng.random_range(0..hg.n_ports());
        let theta = Some(rng.random_range(0..4u8));
        let cophase = vec![rng.random_range(0..4u8)];
        return Ok(TypeIPmi { q1, q2, beams: vec![(i / hg.n2, i % hg.n2)], rank, cophase, theta });
    }
    let beams = sample(rng, g.n_ports(), nb).into_iter().map(|i| (i / g.n2, i % g.n2)).collect();
    let cophase = vec![rng.random_range(0..4u8)];
    Ok(TypeIPmi { q1, q2, beams, rank, cophase, theta: None })
}

/// `ν` dominant eigenvectors of a Hermitian matrix, strongest first.
pub fn dominant_eigenvectors(a: &CMat, nu: usize) -> Result<Vec<DVector<Complex64>>, CsiError> {
    if a.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(CsiError::EigDecompositionFailure);
    }
    if nu > a.nrows() {
        return Err(CsiError::InvalidConfig(format!("{nu} eigenvectors of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &k| eig.eigenvalues[k].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&k)));
    Ok(order[..nu].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect())
}

/// Eigen-beamforming bound: per subband the `ν` dominant eigenvectors of
/// `Σ HᴴH` with equal power.
pub fn eigen_precoder(h: &[CMat], layout: &SubbandLayout, rank: usize) -> Result<Precoder, CsiError> {
    let subbands = (0..layout.n3())
        .map(|t| {
            let r = wideband_covariance(&h[layout.prbs(t)]);
            let v = dominant_eigenvectors(&r, rank)?;
            let w = CMat::from_columns(&v) * Complex64::new(1.0 / (rank as f64).sqrt(), 0.0);
            Ok(w)
        })
        .collect::<Result<_, CsiError>>()?;
    Ok(Precoder { subbands })
}

/// Rotates `v` so that its largest-magnitude entry is real positive.
pub fn phase_normalize(v: &mut DVector<Complex64>) {
    let mut k = 0;
    for i in 1..v.len() {
        if beats(v[i].norm(), v[k].norm()) {
            k = i;
        }
    }
    let a = v[k].norm();
    if a > 0.0 {
        let rot = v[k].conj() / a;
        for x in v.iter_mut() {
            *x *= rot;
        }
    }
}

/// Per-subband BCC vectors `out[l][t]`: the `ν` dominant eigenvectors of
/// `H̄ₜᴴH̄ₜ`, each phase-normalized on its largest entry.
pub fn etype_ii_bcc(hbar_cov: &[CMat], rank: usize) -> Result<Vec<Vec<DVector<Complex64>>>, CsiError> {
    let mut out = vec![Vec::with_capacity(hbar_cov.len()); rank];
    for r in hbar_cov {
        for (l, mut v) in dominant_eigenvectors(r, rank)?.into_iter().enumerate() {
            phase_normalize(&mut v);
            out[l].push(v);
        }
    }
    Ok(out)
}

/// `y_{n₃}[t] = e^{j2π n₃ t/N₃}`.
pub fn fd_vector(n3: usize, idx: usize) -> DVector<Complex64> {
    DVector::from_fn(n3, |t, _| Complex64::from_polar(1.0, 2.0 * PI * (idx * t) as f64 / n3 as f64))
}

/// Greedy choice of `M` distinct delays maximizing `‖Ŵ₂ y_n‖²`, in
/// selection order. Ties resolve toward the lower index, so DC wins ties.
pub fn select_fd_basis(w2: &CMat, m: usize) -> Result<Vec<usize>, CsiError> {
    let n3 = w2.ncols();
    if m == 0 || m > n3 {
        return Err(CsiError::InvalidConfig(format!("cannot select {m} of {n3} delays")));
    }
    let power: Vec<f64> = (0..n3).map(|n| (w2 * fd_vector(n3, n)).norm_squared()).collect();
    let mut taken = vec![false; n3];
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let mut pick: Option<usize> = None;
        for n in 0..n3 {
            if !taken[n] && pick.is_none_or(|k| beats(power[n], power[k])) {
                pick = Some(n);
            }
        }
        let n = pick.expect("m <= n3");
        taken[n] = true;
        out.push(n);
    }
    Ok(out)
}

/// `W_f` with the selected delay vectors as columns.
pub fn fd_basis(n3: usize, idx: &[usize]) -> CMat {
    let cols: Vec<DVector<Complex64>> = idx.iter().map(|&n| fd_vector(n3, n)).collect();
    CMat::from_columns(&cols)
}

/// Quantizer resolution. `None` disables the corresponding quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Differential amplitude levels below the polarization reference.
    pub amp_levels: Option<usize>,
    /// Levels for the reference amplitude of the weaker polarization.
    pub ref_amp_levels: Option<usize>,
    pub amp_step_db: f64,
    pub phase_levels: Option<usize>,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            amp_levels: Some(8),
            ref_amp_levels: Some(16),
            amp_step_db: 1.5,
            phase_levels: Some(16),
        }
    }
}

impl QuantizerConfig {
    pub fn unquantized() -> Self {
        Self {
            amp_levels: None,
            ref_amp_levels: None,
            amp_step_db: 1.5,
            phase_levels: None,
        }
    }
}

/// One reported coefficient of `W̃₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BccEntry {
    pub row: usize,
    /// Position in the layer's FD index list.
    pub col: usize,
    pub amp_level: Option<u8>,
    pub phase_level: Option<u8>,
    /// Dequantized coefficient relative to the strongest one.
    pub value: Complex64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBcc {
    pub rows: usize,
    pub cols: usize,
    /// Kept entries, strongest first.
    pub entries: Vec<BccEntry>,
    /// Reference amplitude level of each polarization half.
    pub ref_levels: [Option<u8>; 2],
}

impl QuantizedBcc {
    pub fn to_matrix(&self) -> CMat {
        let mut m = CMat::zeros(self.rows, self.cols);
        for e in &self.entries {
            m[(e.row, e.col)] = e.value;
        }
        m
    }
}

fn amp_db(x: f64) -> f64 {
    20.0 * x.log10()
}

fn quantize_level(loss_db: f64, step: f64, levels: usize) -> u8 {
    ((loss_db / step).round().max(0.0) as usize).min(levels - 1) as u8
}

/// Keeps the `K_NZ` largest entries of `W̄₂`, normalizes by the strongest
/// and quantizes amplitude on the dB grid relative to the per-polarization
/// reference and phase on the uniform constellation.
pub fn quantize_bcc(wbar: &CMat, k_nz: usize, q: &QuantizerConfig) -> Result<QuantizedBcc, CsiError> {
    let (rows, cols) = wbar.shape();
    if k_nz == 0 || k_nz > rows * cols || rows % 2 != 0 {
        return Err(CsiError::InvalidConfig(format!("K_NZ {k_nz} for a {rows}x{cols} coefficient matrix")));
    }
    let half = rows / 2;
    let mut order: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    order.sort_by(|a, b| wbar[*b].norm().total_cmp(&wbar[*a].norm()).then(a.cmp(b)));
    order.truncate(k_nz);
    let strongest = wbar[order[0]];
    if strongest.norm() == 0.0 {
        return Err(CsiError::InvalidConfig("all coefficients are zero".into()));
    }
    let norm: Vec<Complex64> = order.iter().map(|&ix| wbar[ix] / strongest).collect();
    let mut refs = [0.0f64; 2];
    for (k, &(r, _)) in order.iter().enumerate() {
        let p = r / half;
        refs[p] = refs[p].max(norm[k].norm());
    }
    let mut ref_levels = [None; 2];
    let mut ref_amp = refs;
    if let Some(levels) = q.ref_amp_levels {
        for p in 0..2 {
            if refs[p] > 0.0 {
                let lv = quantize_level(-amp_db(refs[p]), q.amp_step_db, levels);
                ref_levels[p] = Some(lv);
                ref_amp[p] = 10f64.powf(-(lv as f64) * q.amp_step_db / 20.0);
            }
        }
    }
    let mut entries = Vec::with_capacity(k_nz);
    for (k, &(r, c)) in order.iter().enumerate() {
        let p = r / half;
        let z = norm[k];
        let (amp_level, amp) = match q.amp_levels {
            Some(levels) if z.norm() > 0.0 => {
                let lv = quantize_level(-amp_db(z.norm() / refs[p]), q.amp_step_db, levels);
                (Some(lv), ref_amp[p] * 10f64.powf(-(lv as f64) * q.amp_step_db / 20.0))
            }
            Some(levels) => (Some((levels - 1) as u8), ref_amp[p] * 10f64.powf(-((levels - 1) as f64) * q.amp_step_db / 20.0)),
            None => (None, z.norm() / refs[p] * ref_amp[p]),
        };
        let (phase_level, phase) = match q.phase_levels {
            Some(n) => {
                let step = 2.0 * PI / n as f64;
                let lv = ((z.arg() / step).round() as i64).rem_euclid(n as i64) as usize;
                (Some(lv as u8), lv as f64 * step)
            }
            None => (None, z.arg()),
        };
        entries.push(BccEntry {
            row: r,
            col: c,
            amp_level,
            phase_level,
            value: Complex64::from_polar(amp, phase),
        });
    }
    Ok(QuantizedBcc { rows, cols, entries, ref_levels })
}

/// `(L, M_ν, K_NZ per layer)` derived from a Rel-16 parameter combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ETypeIIParams {
    pub l: usize,
    pub m_nu: usize,
    pub k_nz: usize,
}

#[derive(Debug, Deserialize)]
struct ComboRow {
    param_combination: usize,
    l: usize,
    pv_rank12: f64,
    pv_rank34: f64,
    beta: f64,
}

impl ETypeIIParams {
    /// `M_ν = ⌈p_ν N₃⌉`, `K₀ = ⌈β·2L·M₁⌉`; one layer may use `K₀`
    /// coefficients, several layers share `2K₀`.
    pub fn from_combination(path: &Path, combination: usize, rank: usize, n3: usize) -> Result<Self, CsiError> {
        let err = |m: String| CsiError::Load {
            path: path.display().to_string(),
            msg: m,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        for row in rdr.deserialize::<ComboRow>() {
            let row = row.map_err(|e| err(e.to_string()))?;
            if row.param_combination != combination {
                continue;
            }
            let pv = if rank <= 2 { row.pv_rank12 } else { row.pv_rank34 };
            if !(1..=4).contains(&rank) || pv <= 0.0 {
                return Err(CsiError::InvalidConfig(format!("combination {combination} does not support rank {rank}")));
            }
            let m_nu = (pv * n3 as f64).ceil() as usize;
            let m1 = (row.pv_rank12 * n3 as f64).ceil() as usize;
            let k0 = (row.beta * (2 * row.l * m1) as f64).ceil() as usize;
            let k = if rank == 1 { k0 } else { k0.min(2 * k0 / rank) };
            return Ok(Self {
                l: row.l,
                m_nu,
                k_nz: k.min(2 * row.l * m_nu),
            });
        }
        Err(err(format!("combination {combination} not found")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ETypeIILayer {
    /// Selected FD indices `n₃`, in selection order.
    pub fd: Vec<usize>,
    pub bcc: QuantizedBcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ETypeIIPmi {
    pub q1: usize,
    pub q2: usize,
    /// `L` orthogonal beams shared by both polarizations.
    pub beams: Vec<(usize, usize)>,
    pub rank: usize,
    pub n3: usize,
    pub layers: Vec<ETypeIILayer>,
}

impl ETypeIIPmi {
    pub fn validate(&self, g: &DftGrid, k_nz: Option<usize>) -> Result<(), CsiError> {
        for (i, &(a, b)) in self.beams.iter().enumerate() {
            g.check(a, b, self.q1, self.q2)?;
            if self.beams[..i].contains(&(a, b)) {
                return Err(CsiError::IndexOutOfRange(format!("beam ({a},{b}) repeated")));
            }
        }
        if self.layers.len() != self.rank {
            return Err(CsiError::IndexOutOfRange(format!("{} layers for rank {}", self.layers.len(), self.rank)));
        }
        for layer in &self.layers {
            for (i, &n) in layer.fd.iter().enumerate() {
                if n >= self.n3 || layer.fd[..i].contains(&n) {
                    return Err(CsiError::IndexOutOfRange(format!("FD index {n}")));
                }
            }
            if layer.bcc.rows != 2 * self.beams.len() || layer.bcc.cols != layer.fd.len() {
                return Err(CsiError::IndexOutOfRange("coefficient shape".into()));
            }
            if let Some(k) = k_nz {
                if layer.bcc.entries.len() > k {
                    return Err(CsiError::IndexOutOfRange(format!("{} nonzero coefficients above {k}", layer.bcc.entries.len())));
                }
            }
        }
        Ok(())
    }
}

/// Block-diagonal SD basis `W₁` (`2N₁N₂ × 2L`), unnormalized beams.
pub fn sd_basis(g: &DftGrid, q1: usize, q2: usize, beams: &[(usize, usize)]) -> Result<CMat, CsiError> {
    let p = g.n_ports();
    let l = beams.len();
    let mut w1 = CMat::zeros(2 * p, 2 * l);
    for (i, u) in beam_vectors(g, q1, q2, beams)?.iter().enumerate() {
        for k in 0..p {
            w1[(k, i)] = u[k];
            w1[(p + k, l + i)] = u[k];
        }
    }
    Ok(w1)
}

/// `W⁽ˡ⁾ = W₁ W̃₂⁽ˡ⁾ W_f⁽ˡ⁾ᴴ`, assembled per subband and normalized.
pub fn reconstruct_etype_ii(pmi: &ETypeIIPmi, g: &DftGrid) -> Result<Precoder, CsiError> {
    pmi.validate(g, None)?;
    let w1 = sd_basis(g, pmi.q1, pmi.q2, &pmi.beams)?;
    let per_layer: Vec<CMat> = pmi
        .layers
        .iter()
        .map(|layer| &w1 * layer.bcc.to_matrix() * fd_basis(pmi.n3, &layer.fd).adjoint())
        .collect();
    let subbands = (0..pmi.n3)
        .map(|t| {
            let cols: Vec<DVector<Complex64>> = per_layer.iter().map(|w| w.column(t).into_owned()).collect();
            normalize_columns(&CMat::from_columns(&cols), t)
        })
        .collect::<Result<_, _>>()?;
    Ok(Precoder { subbands })
}

/// eType-II selection from per-PRB channel estimates.
pub fn select_etype_ii(
    h: &[CMat],
    layout: &SubbandLayout,
    g: &DftGrid,
    rank: usize,
    params: &ETypeIIParams,
    quant: &QuantizerConfig,
) -> Result<ETypeIIPmi, CsiError> {
    let r = polarization_sum(&wideband_covariance(h));
    let sel = select_beams(&r, g, params.l)?;
    let w1 = sd_basis(g, sel.q1, sel.q2, &sel.beams)?;
    let n3 = layout.n3();
    let hbar_cov: Vec<CMat> = (0..n3)
        .map(|t| {
            let rt = wideband_covariance(&h[layout.prbs(t)]);
            w1.adjoint() * rt * &w1
        })
        .collect();
    let bcc = etype_ii_bcc(&hbar_cov, rank)?;
    let layers = bcc
        .iter()
        .map(|cols| {
            let w2 = CMat::from_columns(cols);
            let fd = select_fd_basis(&w2, params.m_nu)?;
            let wbar = &w2 * fd_basis(n3, &fd);
            Ok(ETypeIILayer {
                bcc: quantize_bcc(&wbar, params.k_nz, quant)?,
                fd,
            })
        })
        .collect::<Result<_, CsiError>>()?;
    Ok(ETypeIIPmi {
        q1: sel.q1,
        q2: sel.q2,
        beams: sel.beams,
        rank,
        n3,
        layers,
    })
}

fn log2_ceil(x: usize) -> usize {
    if x <= 1 {
        0
    } else {
        (usize::BITS - (x - 1).leading_zeros()) as usize
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Serialized CSI report with an approximate payload size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "codebook", rename_all = "snake_case")]
pub enum PmiReport {
    TypeI { pmi: TypeIPmi, overhead_bits: usize },
    ETypeII { pmi: ETypeIIPmi, overhead_bits: usize },
}

impl PmiReport {
    /// Rotation and beam-set indices, then two bits per co-phasing value.
    pub fn type_i(pmi: TypeIPmi, g: &DftGrid) -> Self {
        let beam_bits = match pmi.theta {
            Some(_) => log2_ceil(half_panel_grid(g).n_ports()) + 2,
            None => log2_ceil(binomial(g.n_ports(), pmi.beams.len())),
        };
        let bits = log2_ceil(g.o1 * g.o2) + beam_bits + 2 * pmi.cophase.len();
        Self::TypeI { pmi, overhead_bits: bits }
    }

    /// Rotation, beam set, and per layer the FD set, the nonzero bitmap,
    /// the strongest-coefficient indicator, one reference amplitude and the
    /// amplitude/phase of every other kept coefficient.
    pub fn etype_ii(pmi: ETypeIIPmi, g: &DftGrid, q: &QuantizerConfig) -> Self {
        let amp_bits = q.amp_levels.map_or(0, log2_ceil);
        let ref_bits = q.ref_amp_levels.map_or(0, log2_ceil);
        let phase_bits = q.phase_levels.map_or(0, log2_ceil);
        let mut bits = log2_ceil(g.o1 * g.o2) + log2_ceil(binomial(g.n_ports(), pmi.beams.len()));
        for layer in &pmi.layers {
            let k = layer.bcc.entries.len();
            bits += log2_ceil(binomial(pmi.n3, layer.fd.len()))
                + layer.bcc.rows * layer.bcc.cols
                + log2_ceil(k)
                + ref_bits
                + k.saturating_sub(1) * (amp_bits + phase_bits);
        }
        Self::ETypeII { pmi, overhead_bits: bits }
    }

    pub fn overhead_bits(&self) -> usize {
        match self {
            Self::TypeI { overhead_bits, .. } | Self::ETypeII { overhead_bits, .. } => *overhead_bits,
        }
    }
}
