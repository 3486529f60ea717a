//! Apex-to-apex return map, its eigenvalues, and per-hop energy accounting.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{force_to_current, Actuation, ControlPolicy, Feedback, MoverReference, Passive, PdGains};
use crate::hybrid::{DomainId, HybridGraph};
use crate::integrate::{HybridTrajectory, IntegratorConfig, SimError, Simulator, StopCondition};
use crate::model::{ModelParams, State, Variant};
use crate::optimize::HopSolution;

type Params = ModelParams<f64>;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("no apex after one hop from the section state: {0}")]
    SimulationDiverged(String),
    #[error("fixed-point residual {residual:.3e} is too large")]
    FixedPointResidualTooLarge { residual: f64 },
    #[error("section state has {got} coordinates, expected {expected}")]
    SectionDimension { got: usize, expected: usize },
    #[error("report grids differ ({single} single vs {double} double heights)")]
    MismatchedGrids { single: usize, double: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Largest |P(x) − x| accepted as a fixed point by [`stability_eigenvalues`].
pub const FIXED_POINT_TOL: f64 = 1e-5;
/// Default relative finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A Jacobian column within this of the unit vector marks a neutral
/// coordinate. Finite differences of the return map carry integration noise
/// of order 1e-5 at the Newton step size.
const NEUTRAL_TOL: f64 = 1e-4;

/// Number of apex-section coordinates for a variant.
pub fn section_dim(variant: Variant) -> usize {
    match variant {
        Variant::DoubleSpring => 3,
        Variant::SingleSpring => 5,
    }
}

/// Reduced apex coordinates: `(z_b, δ, δ̇)` or `(z_b, y, ẏ, δ, δ̇)`.
pub fn to_section(state: &State<f64>) -> DVector<f64> {
    match state.domain.variant() {
        Variant::DoubleSpring => DVector::from_vec(vec![state.q[0], state.q[2], state.qdot[2]]),
        Variant::SingleSpring => {
            DVector::from_vec(vec![state.q[0], state.q[1], state.qdot[1], state.q[2], state.qdot[2]])
        }
    }
}

/// Lifts section coordinates to a full apex state (`ż_b = 0`).
pub fn from_section(variant: Variant, x: &DVector<f64>) -> Result<State<f64>, AnalyzeError> {
    let expected = section_dim(variant);
    if x.len() != expected {
        return Err(AnalyzeError::SectionDimension { got: x.len(), expected });
    }
    Ok(match variant {
        Variant::DoubleSpring => {
            State::new(Vector3::new(x[0], 0.0, x[1]), Vector3::new(0.0, 0.0, x[2]), DomainId::D1)
        }
        Variant::SingleSpring => {
            State::new(Vector3::new(x[0], x[1], x[3]), Vector3::new(0.0, x[2], x[4]), DomainId::Flight)
        }
    })
}

/// Integrator settings for return-map evaluations: tight enough that
/// finite differences at the default step are dominated by truncation.
pub fn return_map_config() -> IntegratorConfig<f64> {
    IntegratorConfig { rtol: 1e-12, atol: 1e-14, event_tol: 1e-13, ..IntegratorConfig::default() }
}

fn one_hop<A: Actuation<f64> + ?Sized>(
    params: &Params,
    actuation: &A,
    apex: &State<f64>,
) -> Result<HybridTrajectory<f64>, SimError> {
    let graph = HybridGraph::selected_cycle(params.variant);
    let sim = Simulator::with_config(params, &graph, actuation, return_map_config());
    let stop = StopCondition { max_hops: 1, t_max: 10.0, max_ground_time: 2.0 };
    sim.simulate_hybrid(apex, 0.0, &stop)
}

/// Simulates one hop from the apex section state and returns the next apex.
pub fn poincare_return<A: Actuation<f64> + ?Sized>(
    params: &Params,
    policy: &A,
    section_state: &DVector<f64>,
) -> Result<DVector<f64>, AnalyzeError> {
    let apex = from_section(params.variant, section_state)?;
    let traj = one_hop(params, policy, &apex).map_err(|e| AnalyzeError::SimulationDiverged(e.to_string()))?;
    match traj.apexes.first() {
        Some(next) => Ok(to_section(&next.state)),
        None => Err(AnalyzeError::SimulationDiverged("the hop ended without an apex".into())),
    }
}

fn coordinate_scales(params: &Params, variant: Variant) -> Vec<f64> {
    let pos = params.rest_length;
    let vel = (params.gravity * params.rest_length).sqrt();
    match variant {
        Variant::DoubleSpring => vec![pos, pos, vel],
        Variant::SingleSpring => vec![pos, pos, vel, pos, vel],
    }
}

/// Central-difference Jacobian of [`poincare_return`].
pub fn return_jacobian<A: Actuation<f64> + ?Sized>(
    params: &Params,
    policy: &A,
    x: &DVector<f64>,
    fd_step: f64,
) -> Result<DMatrix<f64>, AnalyzeError> {
    let n = x.len();
    let scales = coordinate_scales(params, params.variant);
    let columns: Vec<Result<DVector<f64>, AnalyzeError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = fd_step * x[i].abs().max(scales[i]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = poincare_return(params, policy, &xp)?;
            let fm = poincare_return(params, policy, &xm)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect();
    let mut jac = DMatrix::zeros(n, n);
    for (i, col) in columns.into_iter().enumerate() {
        jac.set_column(i, &col?);
    }
    Ok(jac)
}

/// Newton iteration on `P(x) = x` with a finite-difference Jacobian.
///
/// Coordinates the map is invariant to (a Jacobian column equal to the unit
/// vector, as for the single-spring mover offset under open-loop playback)
/// are held at the guess; any per-hop drift along them stays in the returned
/// residual.
pub fn find_fixed_point<A: Actuation<f64> + ?Sized>(
    params: &Params,
    policy: &A,
    guess: &DVector<f64>,
) -> Result<(DVector<f64>, f64), AnalyzeError> {
    let n = guess.len();
    let mut x = guess.clone();
    let mut best = (x.clone(), f64::INFINITY);
    let mut active: Option<Vec<usize>> = None;
    for _ in 0..12 {
        let r = poincare_return(params, policy, &x)? - &x;
        let res = r.amax();
        if res < best.1 {
            best = (x.clone(), res);
        }
        let jac = return_jacobian(params, policy, &x, DEFAULT_FD_STEP)?;
        let active = active.get_or_insert_with(|| {
            (0..n)
                .filter(|&i| (0..n).any(|j| (jac[(j, i)] - if i == j { 1.0 } else { 0.0 }).abs() > NEUTRAL_TOL))
                .collect()
        });
        let k = active.len();
        let rr = DVector::from_iterator(k, active.iter().map(|&i| r[i]));
        if rr.amax() < 1e-12 {
            break;
        }
        let a = DMatrix::from_fn(k, k, |i, j| jac[(active[i], active[j])] - if i == j { 1.0 } else { 0.0 });
        let Some(step) = a.lu().solve(&(-&rr)) else { break };
        // Damped update: shrink until the residual decreases.
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-3 {
            let mut xt = x.clone();
            for (j, &i) in active.iter().enumerate() {
                xt[i] += t * step[j];
            }
            if let Ok(pt) = poincare_return(params, policy, &xt) {
                let rt = pt - &xt;
                if active.iter().map(|&i| rt[i].abs()).fold(0.0, f64::max) < rr.amax() {
                    x = xt;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let r = (poincare_return(params, policy, &x)? - &x).amax();
    if r < best.1 {
        best = (x, r);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub fixed_point: Vec<f64>,
    pub eigenvalue_magnitudes: Vec<f64>,
    pub lambda_max: f64,
    pub stable: bool,
    pub fd_step: f64,
    /// `|P(x*) − x*|` at the reported fixed point.
    pub fixed_point_residual: f64,
    /// Whether the residual is below [`FIXED_POINT_TOL`]. A drifting orbit
    /// is never reported stable.
    pub periodic: bool,
}

fn report_at<A: Actuation<f64> + ?Sized>(
    params: &Params,
    policy: &A,
    x: &DVector<f64>,
    residual: f64,
    fd_step: f64,
) -> Result<StabilityReport, AnalyzeError> {
    let mut jac = return_jacobian(params, policy, x, fd_step)?;
    // Neutral coordinates come from an exact symmetry of the dynamics; their
    // columns are set to the unit vector so integration noise does not leak
    // into the other eigenvalues.
    let n = jac.ncols();
    for i in 0..n {
        if (0..n).all(|j| (jac[(j, i)] - if i == j { 1.0 } else { 0.0 }).abs() <= NEUTRAL_TOL) {
            jac.set_column(i, &DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }));
        }
    }
    let mut mags: Vec<f64> = jac.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let lambda_max = mags.first().copied().unwrap_or(0.0);
    let periodic = residual < FIXED_POINT_TOL;
    Ok(StabilityReport {
        fixed_point: x.iter().copied().collect(),
        eigenvalue_magnitudes: mags,
        lambda_max,
        stable: periodic && lambda_max < 1.0,
        fd_step,
        fixed_point_residual: residual,
        periodic,
    })
}

/// Eigenvalue magnitudes of the return-map Jacobian at a fixed point,
/// by central differences with per-coordinate step `fd_step · max(|x_i|, scale_i)`.
pub fn stability_eigenvalues<A: Actuation<f64> + ?Sized>(
    params: &Params,
    policy: &A,
    fixed_point: &DVector<f64>,
    fd_step: f64,
) -> Result<StabilityReport, AnalyzeError> {
    let residual = (poincare_return(params, policy, fixed_point)? - fixed_point).amax();
    if !(residual < FIXED_POINT_TOL) {
        return Err(AnalyzeError::FixedPointResidualTooLarge { residual });
    }
    report_at(params, policy, fixed_point, residual, fd_step)
}

/// Fixed point of the playback orbit (seeded at the optimized apex) and its
/// eigenvalues. When Newton cannot close the orbit the Jacobian is still
/// evaluated at the best point found, and the report is marked non-periodic.
pub fn solution_stability<A: Actuation<f64> + ?Sized>(
    params: &Params,
    policy: &A,
    sol: &HopSolution,
    fd_step: f64,
) -> Result<StabilityReport, AnalyzeError> {
    let (x, residual) = find_fixed_point(params, policy, &to_section(&sol.apex_state()))?;
    report_at(params, policy, &x, residual, fd_step)
}

/// Default PD gains on the mover coordinate.
pub fn default_pd_gains() -> PdGains<f64> {
    PdGains { kp: 100.0, kd: 30.0 }
}

/// Open-loop playback of `sol` plus PD tracking of its mover trajectory
/// during ground contact, where the policy clock restarts at touchdown.
pub fn pd_policy(sol: &HopSolution, gains: PdGains<f64>) -> Result<ControlPolicy<f64>, AnalyzeError> {
    let params = &sol.params;
    let open = sol.policy();
    let traj = one_hop(params, &open, &sol.apex_state())?;
    let samples = traj.resample(params, &open, 1e-4)?;
    let t_touch = traj.phases.get(1).map(|p| p.t_start).unwrap_or(0.0);
    let mut reference: Vec<(f64, f64, f64)> = samples
        .iter()
        .filter(|(t, _)| *t >= t_touch)
        .map(|(t, s)| (t - t_touch, s.state.q[1], s.state.qdot[1]))
        .collect();
    reference.dedup_by(|b, a| b.0 <= a.0);
    let scope = match params.variant {
        Variant::SingleSpring => vec![DomainId::Ground],
        Variant::DoubleSpring => vec![DomainId::D3],
    };
    Ok(open.with_feedback(Feedback { gains, reference: MoverReference { samples: reference }, scope }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `∫|u ẏ| dt` over one hop, J.
    #[serde(rename = "E_mech")]
    pub e_mech: f64,
    /// `∫|I V| dt` over one hop, J.
    #[serde(rename = "E_elec")]
    pub e_elec: f64,
    /// Mechanical energy lost over one unactuated hop from the apex, J.
    #[serde(rename = "E_passive_loss")]
    pub e_passive_loss: f64,
    pub eta_mech: f64,
    pub eta_elec: f64,
    /// Peak |u|, N.
    #[serde(rename = "F_max")]
    pub f_max: f64,
    #[serde(rename = "H_f")]
    pub h_f: f64,
}

/// Sample spacing used for the energy quadrature.
pub const ENERGY_DT: f64 = 1e-4;

/// Energy use of the playback hop (trapezoidal quadrature at spacing `dt`).
pub fn energy_report_with(params: &Params, sol: &HopSolution, dt: f64) -> Result<EnergyReport, AnalyzeError> {
    let policy = sol.policy();
    let apex = sol.apex_state();
    let traj = one_hop(params, &policy, &apex)?;
    let samples = traj.resample(params, &policy, dt)?;
    let mut e_mech = 0.0;
    let mut e_elec = 0.0;
    let mut f_max: f64 = 0.0;
    let power = |s: &crate::integrate::Sample<f64>| {
        let ydot = s.state.qdot[1];
        let (i, v) = force_to_current(&params.motor, s.u, ydot);
        ((s.u * ydot).abs(), (i * v).abs())
    };
    for w in samples.windows(2) {
        let (t0, s0) = &w[0];
        let (t1, s1) = &w[1];
        let h = t1 - t0;
        let (m0, e0) = power(s0);
        let (m1, e1) = power(s1);
        e_mech += 0.5 * h * (m0 + m1);
        e_elec += 0.5 * h * (e0 + e1);
    }
    for (_, s) in &samples {
        f_max = f_max.max(s.u.abs());
    }

    let passive = one_hop(params, &Passive, &apex)?;
    let e_passive_loss = match passive.apexes.first() {
        Some(next) => (params.mechanical_energy(&apex) - params.mechanical_energy(&next.state)).max(0.0),
        None => return Err(AnalyzeError::SimulationDiverged("passive hop ended without an apex".into())),
    };
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Ok(EnergyReport {
        e_mech,
        e_elec,
        e_passive_loss,
        eta_mech: ratio(e_passive_loss, e_mech),
        eta_elec: ratio(e_passive_loss, e_elec),
        f_max,
        h_f: sol.clearance,
    })
}

pub fn energy_report(params: &Params, sol: &HopSolution) -> Result<EnergyReport, AnalyzeError> {
    energy_report_with(params, sol, ENERGY_DT)
}

/// Anything that can fill one variant's half of a comparison row.
pub trait TableRow {
    fn height(&self) -> f64;
    fn peak_force(&self) -> f64;
    fn eta_mech(&self) -> f64;
    fn eta_elec(&self) -> f64;
}

impl TableRow for EnergyReport {
    fn height(&self) -> f64 {
        self.h_f
    }
    fn peak_force(&self) -> f64 {
        self.f_max
    }
    fn eta_mech(&self) -> f64 {
        self.eta_mech
    }
    fn eta_elec(&self) -> f64 {
        self.eta_elec
    }
}

/// One variant's entries in a comparison row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    #[serde(rename = "F_max")]
    pub f_max: f64,
    pub eta_mech: f64,
    pub eta_elec: f64,
}

impl TableRow for (f64, VariantEntry) {
    fn height(&self) -> f64 {
        self.0
    }
    fn peak_force(&self) -> f64 {
        self.1.f_max
    }
    fn eta_mech(&self) -> f64 {
        self.1.eta_mech
    }
    fn eta_elec(&self) -> f64 {
        self.1.eta_elec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    #[serde(rename = "H_f")]
    pub h_f: f64,
    pub single: VariantEntry,
    pub double: VariantEntry,
    /// Double over single.
    pub peak_force_ratio: f64,
    pub eta_mech_ratio: f64,
    pub eta_elec_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub const TABLE_HEADER: [&str; 10] = [
    "H_f",
    "F_max_single",
    "eta_mech_single",
    "eta_elec_single",
    "F_max_double",
    "eta_mech_double",
    "eta_elec_double",
    "peak_force_ratio",
    "eta_mech_ratio",
    "eta_elec_ratio",
];

/// Pairs single- and double-spring rows at matching heights.
pub fn compare_models<S: TableRow, D: TableRow>(single: &[S], double: &[D]) -> Result<ComparisonTable, AnalyzeError> {
    if single.is_empty() || single.len() != double.len() || single.iter().zip(double).any(|(s, d)| s.height() != d.height())
    {
        return Err(AnalyzeError::MismatchedGrids { single: single.len(), double: double.len() });
    }
    let rows = single
        .iter()
        .zip(double)
        .map(|(s, d)| {
            let se = entry(s);
            let de = entry(d);
            ComparisonRow {
                h_f: s.height(),
                single: se,
                double: de,
                peak_force_ratio: de.f_max / se.f_max,
                eta_mech_ratio: de.eta_mech / se.eta_mech,
                eta_elec_ratio: de.eta_elec / se.eta_elec,
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

fn entry<R: TableRow>(r: &R) -> VariantEntry {
    VariantEntry { f_max: r.peak_force(), eta_mech: r.eta_mech(), eta_elec: r.eta_elec() }
}

impl ComparisonTable {
    /// CSV in table column order; numbers use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AnalyzeError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TABLE_HEADER)?;
        for r in &self.rows {
            let vals = [
                r.h_f,
                r.single.f_max,
                r.single.eta_mech,
                r.single.eta_elec,
                r.double.f_max,
                r.double.eta_mech,
                r.double.eta_elec,
                r.peak_force_ratio,
                r.eta_mech_ratio,
                r.eta_elec_ratio,
            ];
            w.write_record(vals.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, AnalyzeError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Published comparison data: `(H_f, single, double)` with efficiencies as
/// fractions.
pub fn published_comparison() -> (Vec<(f64, VariantEntry)>, Vec<(f64, VariantEntry)>) {
    let rows = [
        (0.1, 95.2, 0.25, 0.17, 50.9, 0.78, 0.58),
        (0.2, 183.4, 0.26, 0.16, 98.3, 0.77, 0.55),
        (0.3, 250.1, 0.29, 0.16, 132.6, 0.76, 0.54),
        (0.4, 303.0, 0.30, 0.15, 165.2, 0.76, 0.52),
        (0.5, 348.1, 0.30, 0.15, 196.4, 0.76, 0.51),
    ];
    let single = rows.iter().map(|r| (r.0, VariantEntry { f_max: r.1, eta_mech: r.2, eta_elec: r.3 })).collect();
    let double = rows.iter().map(|r| (r.0, VariantEntry { f_max: r.4, eta_mech: r.5, eta_elec: r.6 })).collect();
    (single, double)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_round_trip() {
        let x = DVector::from_vec(vec![0.7, 0.01, -0.2]);
        let st = from_section(Variant::DoubleSpring, &x).unwrap();
        assert_eq!(st.domain, DomainId::D1);
        assert_eq!(to_section(&st), x);
        let x5 = DVector::from_vec(vec![0.7, 0.02, 0.1, 0.01, -0.2]);
        let st = from_section(Variant::SingleSpring, &x5).unwrap();
        assert_eq!(to_section(&st), x5);
        assert!(matches!(
            from_section(Variant::SingleSpring, &x),
            Err(AnalyzeError::SectionDimension { got: 3, expected: 5 })
        ));
    }

    #[test]
    fn passive_return_loses_height() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let x = DVector::from_vec(vec![0.8, p.static_series_compression(), 0.0]);
        let next = poincare_return(&p, &Passive, &x).unwrap();
        assert!(next[0] < x[0]);
    }

    #[test]
    fn compare_rejects_bad_grids() {
        let (s, d) = published_comparison();
        let empty: Vec<EnergyReport> = Vec::new();
        assert!(matches!(compare_models(&empty, &empty), Err(AnalyzeError::MismatchedGrids { .. })));
        assert!(compare_models(&s[..2], &d[..3]).is_err());
        let mut shifted = d.clone();
        shifted[1].0 = 0.25;
        assert!(compare_models(&s, &shifted).is_err());
    }

    #[test]
    fn identical_lists_give_unit_ratios() {
        let (s, _) = published_comparison();
        let t = compare_models(&s, &s).unwrap();
        for r in &t.rows {
            assert_eq!((r.peak_force_ratio, r.eta_mech_ratio, r.eta_elec_ratio), (1.0, 1.0, 1.0));
        }
    }
}
