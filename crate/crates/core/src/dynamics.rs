//! True-plant simulation and the approximate rigid-body model.
//!
//! The simulated plant is a point mass per dimension with viscous friction,
//! position-dependent Coulomb friction over a rectangular grid, a stiction
//! deadband, and bounded uniform sensing noise on position measurements. The
//! controller side only ever sees the approximate model [`ApproxRbdModel`],
//! whose torque error is what the learner has to capture.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::InputPoint;
use crate::math;
use crate::rng::Rng;

/// Positions and velocities of the simulated system.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl JointState {
    pub fn new(q: Vec<f64>, qd: Vec<f64>) -> Self {
        assert_eq!(q.len(), qd.len(), "position/velocity dimension mismatch");
        assert!(
            math::all_finite(&q) && math::all_finite(&qd),
            "joint state must be finite"
        );
        JointState { q, qd }
    }

    /// At-rest state at the given positions.
    pub fn at_rest(q: Vec<f64>) -> Self {
        let qd = vec![0.0; q.len()];
        JointState::new(q, qd)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        math::all_finite(&self.q) && math::all_finite(&self.qd)
    }
}

/// Viscous plus piecewise-constant Coulomb friction.
///
/// `region_edges[d]` holds the sorted position breakpoints along dimension
/// `d`; the Coulomb magnitude is constant inside each grid cell, so the
/// friction force is discontinuous across the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionParams {
    pub viscous: Vec<f64>,
    pub region_edges: Vec<Vec<f64>>,
    pub coulomb_levels: Vec<f64>,
}

impl FrictionParams {
    pub fn new(viscous: Vec<f64>, region_edges: Vec<Vec<f64>>, coulomb_levels: Vec<f64>) -> Self {
        assert_eq!(viscous.len(), region_edges.len(), "one edge list per dimension");
        assert!(viscous.iter().all(|c| *c >= 0.0), "viscous coefficients must be >= 0");
        assert!(coulomb_levels.iter().all(|c| *c >= 0.0), "coulomb levels must be >= 0");
        let cells: usize = region_edges.iter().map(|e| e.len() + 1).product();
        assert_eq!(
            coulomb_levels.len(),
            cells,
            "need one coulomb level per grid cell"
        );
        FrictionParams {
            viscous,
            region_edges,
            coulomb_levels,
        }
    }

    /// Frictionless plant.
    pub fn none(dim: usize) -> Self {
        FrictionParams::new(vec![0.0; dim], vec![Vec::new(); dim], vec![0.0])
    }

    /// Grid cell index for a position (row-major over dimensions).
    fn cell_index(&self, q: &[f64]) -> usize {
        let mut idx = 0;
        for (d, edges) in self.region_edges.iter().enumerate() {
            let along = edges.iter().filter(|e| q[d] >= **e).count();
            idx = idx * (edges.len() + 1) + along;
        }
        idx
    }

    /// Coulomb magnitude at a position.
    pub fn coulomb(&self, q: &[f64]) -> f64 {
        self.coulomb_levels[self.cell_index(q)]
    }
}

/// Stiction deadband: a resting mass stays at rest until the net drive
/// exceeds `break_torque`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StictionParams {
    pub break_torque: f64,
    pub v_stick: f64,
}

impl StictionParams {
    pub fn new(break_torque: f64, v_stick: f64) -> Self {
        assert!(break_torque >= 0.0, "break torque must be >= 0");
        assert!(v_stick > 0.0, "stick velocity must be > 0");
        StictionParams {
            break_torque,
            v_stick,
        }
    }

    /// No stiction: the deadband never engages.
    pub fn none() -> Self {
        StictionParams::new(0.0, 1e-12)
    }
}

/// The true plant: diagonal inertia, friction, stiction, sensing noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueSystem {
    pub mass: Vec<f64>,
    pub friction: FrictionParams,
    pub stiction: StictionParams,
    pub noise_max: f64,
    pub dt: f64,
}

impl TrueSystem {
    pub fn new(
        mass: Vec<f64>,
        friction: FrictionParams,
        stiction: StictionParams,
        noise_max: f64,
        dt: f64,
    ) -> Self {
        assert!(mass.iter().all(|m| *m > 0.0), "mass entries must be > 0");
        assert_eq!(mass.len(), friction.viscous.len(), "friction dimension mismatch");
        assert!(noise_max >= 0.0, "noise amplitude must be >= 0");
        assert!(dt > 0.0, "time step must be > 0");
        TrueSystem {
            mass,
            friction,
            stiction,
            noise_max,
            dt,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    /// Measured position: true position plus uniform noise in
    /// `[-noise_max, +noise_max]`. Consumes exactly `dim` draws.
    pub fn measure(&self, q: &[f64], rng: &mut Rng) -> Vec<f64> {
        q.iter()
            .map(|qi| {
                if self.noise_max > 0.0 {
                    qi + rng.uniform(-self.noise_max, self.noise_max)
                } else {
                    // keep rng consumption independent of the noise setting
                    let _ = rng.next_f64();
                    *qi
                }
            })
            .collect()
    }
}

/// Simulation rejected an input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimFault {
    NonFiniteTorque,
}

impl fmt::Display for SimFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimFault::NonFiniteTorque => write!(f, "non-finite torque command"),
        }
    }
}

/// Advance the true plant by one step under torque `tau` and return the next
/// state together with its noisy position measurement.
///
/// Per dimension: if the mass is at rest (`|qd| < v_stick`) and the net drive
/// `|tau - viscous*qd|` stays below the break torque, the stiction deadband
/// holds it (acceleration zero, velocity snapped to zero). Otherwise
/// `qdd = (tau - viscous*qd - coulomb(q)*sign(qd)) / m`, integrated
/// semi-implicitly: `qd += qdd*dt` then `q += qd*dt`.
pub fn simulate_step(
    system: &TrueSystem,
    state: &JointState,
    tau: &[f64],
    rng: &mut Rng,
) -> Result<(JointState, Vec<f64>), SimFault> {
    assert_eq!(tau.len(), state.dim(), "torque dimension mismatch");
    if !math::all_finite(tau) {
        return Err(SimFault::NonFiniteTorque);
    }

    let coulomb = system.friction.coulomb(&state.q);
    let mut q = state.q.clone();
    let mut qd = state.qd.clone();
    for d in 0..state.dim() {
        let drive = tau[d] - system.friction.viscous[d] * qd[d];
        let resting = math::abs(qd[d]) < system.stiction.v_stick;
        if resting && math::abs(drive) < system.stiction.break_torque {
            qd[d] = 0.0;
        } else {
            let sign = if qd[d] > 0.0 {
                1.0
            } else if qd[d] < 0.0 {
                -1.0
            } else {
                0.0
            };
            let qdd = (drive - coulomb * sign) / system.mass[d];
            qd[d] += qdd * system.dt;
        }
        q[d] += qd[d] * system.dt;
    }

    let next = JointState { q, qd };
    let measured = system.measure(&next.q, rng);
    Ok((next, measured))
}

/// Backward finite differences on measured positions.
///
/// Returns the velocity estimate at `t` and the acceleration estimate for the
/// preceding step, which is the actual-acceleration input for the indirect
/// data source.
pub fn finite_diff(
    q_t: &[f64],
    q_tm1: &[f64],
    qd_tm1: &[f64],
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(dt > 0.0, "time step must be > 0");
    let qd_t: Vec<f64> = q_t
        .iter()
        .zip(q_tm1)
        .map(|(a, b)| (a - b) / dt)
        .collect();
    let qdd: Vec<f64> = qd_t
        .iter()
        .zip(qd_tm1)
        .map(|(a, b)| (a - b) / dt)
        .collect();
    (qd_t, qdd)
}

/// Approximate rigid-body model `tau = M_hat * qdd + h_hat`.
///
/// For the point-mass task there are no gravity or velocity product terms, so
/// `h_hat` defaults to zero and the whole mismatch lives in the inertia and
/// the unmodeled friction.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxRbdModel {
    pub mass_hat: Vec<f64>,
    pub h_hat: Vec<f64>,
}

impl ApproxRbdModel {
    pub fn new(mass_hat: Vec<f64>, h_hat: Vec<f64>) -> Self {
        assert!(mass_hat.iter().all(|m| *m > 0.0), "mass entries must be > 0");
        assert_eq!(mass_hat.len(), h_hat.len(), "model dimension mismatch");
        ApproxRbdModel { mass_hat, h_hat }
    }

    /// Uniform diagonal model with zero force term.
    pub fn diagonal(dim: usize, mass: f64) -> Self {
        ApproxRbdModel::new(vec![mass; dim], vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mass_hat.len()
    }
}

/// Model torque at an input point: `M_hat * x.qdd + h_hat`.
pub fn rbd_torque(model: &ApproxRbdModel, x: &InputPoint) -> Vec<f64> {
    assert_eq!(x.dim(), model.dim(), "input dimension mismatch");
    model
        .mass_hat
        .iter()
        .zip(&x.qdd)
        .zip(&model.h_hat)
        .map(|((m, a), h)| m * a + h)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AccelKind;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn plain_system(dim: usize, mass: f64, dt: f64) -> TrueSystem {
        TrueSystem::new(
            vec![mass; dim],
            FrictionParams::none(dim),
            StictionParams::none(),
            0.0,
            dt,
        )
    }

    #[test]
    fn torque_produces_inverse_mass_acceleration() {
        let sys = plain_system(2, 5.0, 0.001);
        let state = JointState::at_rest(vec![0.0, 0.0]);
        let mut rng = Rng::from_seed(0);
        let (next, _) = simulate_step(&sys, &state, &[0.5, 0.0], &mut rng).unwrap();
        let qdd0 = next.qd[0] / sys.dt;
        let qdd1 = next.qd[1] / sys.dt;
        assert!((qdd0 - 0.1).abs() < 1e-12);
        assert!(qdd1.abs() < 1e-12);
    }

    #[test]
    fn sub_break_torque_holds_resting_mass() {
        let mut sys = plain_system(2, 5.0, 0.001);
        sys.stiction = StictionParams::new(2.0, 1e-3);
        let state = JointState::at_rest(vec![0.3, -0.1]);
        let mut rng = Rng::from_seed(1);
        let (next, _) = simulate_step(&sys, &state, &[1.9, -1.5], &mut rng).unwrap();
        assert_eq!(next.qd, vec![0.0, 0.0]);
        assert_eq!(next.q, state.q);
    }

    #[test]
    fn free_drift_advances_position() {
        let sys = plain_system(2, 5.0, 0.001);
        let state = JointState::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        let mut rng = Rng::from_seed(2);
        let (next, _) = simulate_step(&sys, &state, &[0.0, 0.0], &mut rng).unwrap();
        assert!((next.q[0] - 0.001).abs() < 1e-15);
        assert_eq!(next.q[1], 0.0);
    }

    #[test]
    fn non_finite_torque_is_a_fault() {
        let sys = plain_system(1, 1.0, 0.001);
        let state = JointState::at_rest(vec![0.0]);
        let mut rng = Rng::from_seed(3);
        assert_eq!(
            simulate_step(&sys, &state, &[f64::NAN], &mut rng),
            Err(SimFault::NonFiniteTorque)
        );
    }

    #[test]
    fn finite_diff_difference_quotients() {
        let (qd, qdd) = finite_diff(&[0.002], &[0.001], &[0.0], 0.001);
        assert!((qd[0] - 1.0).abs() < 1e-12);
        assert!((qdd[0] - 1000.0).abs() < 1e-9);

        let (qd, qdd) = finite_diff(&[0.5], &[0.5], &[0.0], 0.001);
        assert_eq!(qd[0], 0.0);
        assert_eq!(qdd[0], 0.0);
    }

    #[test]
    fn finite_diff_recovers_constant_acceleration() {
        // closed-form ballistic trajectory q(t) = 0.5*a*t^2 as oracle
        let a = 3.7;
        let dt = 0.001;
        let q = |t: f64| 0.5 * a * t * t;
        let mut qd_est = vec![0.0];
        for step in 1..100 {
            let t = step as f64 * dt;
            let (qd, qdd) = finite_diff(&[q(t)], &[q(t - dt)], &qd_est, dt);
            qd_est = qd;
            if step >= 2 {
                // second difference of a quadratic is exact up to rounding
                assert!((qdd[0] - a).abs() < 1e-6, "qdd={} at step {}", qdd[0], step);
            }
        }
    }

    #[test]
    fn rbd_torque_examples() {
        let model = ApproxRbdModel::diagonal(2, 0.5);
        let x = InputPoint::new(vec![0.0; 2], vec![0.0; 2], vec![1.0, 0.0], AccelKind::Desired);
        assert_eq!(rbd_torque(&model, &x), vec![0.5, 0.0]);

        let x0 = InputPoint::new(vec![1.0; 2], vec![2.0; 2], vec![0.0; 2], AccelKind::Desired);
        assert_eq!(rbd_torque(&model, &x0), vec![0.0, 0.0]);

        let ident = ApproxRbdModel::diagonal(2, 1.0);
        let x = InputPoint::new(vec![0.0; 2], vec![0.0; 2], vec![-2.5, 4.0], AccelKind::Actual);
        assert_eq!(rbd_torque(&ident, &x), vec![-2.5, 4.0]);
    }

    #[test]
    fn matched_model_tracks_desired_accelerations_exactly() {
        // with M_hat = M and no friction/stiction/noise, driving the plant
        // with the model torque reproduces the desired acceleration
        let sys = plain_system(2, 5.0, 0.001);
        let model = ApproxRbdModel::diagonal(2, 5.0);
        let mut state = JointState::at_rest(vec![0.0, 0.0]);
        let mut rng = Rng::from_seed(4);
        for step in 0..500 {
            let qdd_d = vec![1.3 - 0.01 * step as f64, -0.4];
            let x = InputPoint::new(
                state.q.clone(),
                state.qd.clone(),
                qdd_d.clone(),
                AccelKind::Desired,
            );
            let tau = rbd_torque(&model, &x);
            let (next, _) = simulate_step(&sys, &state, &tau, &mut rng).unwrap();
            for d in 0..2 {
                let achieved = (next.qd[d] - state.qd[d]) / sys.dt;
                assert!((achieved - qdd_d[d]).abs() <= 1e-9);
            }
            state = next;
        }
    }

    #[test]
    fn stiction_hold_lasts_the_whole_horizon() {
        let mut sys = plain_system(2, 5.0, 0.001);
        sys.stiction = StictionParams::new(2.0, 1e-3);
        let start = JointState::at_rest(vec![0.1, 0.2]);
        let mut state = start.clone();
        let mut rng = Rng::from_seed(5);
        for step in 0..2000 {
            let tau = [1.99 * (step as f64 * 0.01).sin(), -1.2];
            let (next, _) = simulate_step(&sys, &state, &tau, &mut rng).unwrap();
            state = next;
        }
        assert_eq!(state, start);
    }

    #[test]
    fn coulomb_grid_lookup() {
        let friction = FrictionParams::new(
            vec![1.0, 1.0],
            vec![vec![0.5], vec![0.5]],
            vec![1.0, 2.0, 3.0, 4.0],
        );
        assert_eq!(friction.coulomb(&[0.0, 0.0]), 1.0);
        assert_eq!(friction.coulomb(&[0.0, 0.9]), 2.0);
        assert_eq!(friction.coulomb(&[0.9, 0.0]), 3.0);
        assert_eq!(friction.coulomb(&[0.9, 0.9]), 4.0);
        // boundary belongs to the upper cell
        assert_eq!(friction.coulomb(&[0.5, 0.5]), 4.0);
    }

    proptest! {
        #[test]
        fn kinetic_energy_non_increasing_without_drive(
            viscous in 0.5f64..5.0,
            coulomb in 0.0f64..4.0,
            v0 in -2.0f64..2.0,
            v1 in -2.0f64..2.0,
        ) {
            let friction = FrictionParams::new(
                vec![viscous; 2],
                vec![vec![0.5], vec![0.5]],
                vec![coulomb; 4],
            );
            let sys = TrueSystem::new(
                vec![5.0; 2],
                friction,
                StictionParams::new(2.0, 1e-3),
                0.0,
                0.001,
            );
            let mut state = JointState::new(vec![0.0, 0.0], vec![v0, v1]);
            let mut rng = Rng::from_seed(6);
            let ke = |s: &JointState| -> f64 {
                s.qd.iter().zip(&sys.mass).map(|(v, m)| 0.5 * m * v * v).sum()
            };
            let mut prev = ke(&state);
            for _ in 0..500 {
                let (next, _) = simulate_step(&sys, &state, &[0.0, 0.0], &mut rng).unwrap();
                let cur = ke(&next);
                prop_assert!(cur <= prev + 1e-12);
                prev = cur;
                state = next;
            }
        }

        #[test]
        fn measurement_noise_is_bounded(
            noise in 0.0f64..0.01,
            tau0 in -10.0f64..10.0,
            tau1 in -10.0f64..10.0,
            seed in 0u64..1000,
        ) {
            let sys = TrueSystem::new(
                vec![5.0; 2],
                FrictionParams::none(2),
                StictionParams::none(),
                noise,
                0.001,
            );
            let mut state = JointState::at_rest(vec![0.0, 0.0]);
            let mut rng = Rng::from_seed(seed);
            for _ in 0..100 {
                let (next, measured) = simulate_step(&sys, &state, &[tau0, tau1], &mut rng).unwrap();
                for d in 0..2 {
                    prop_assert!((measured[d] - next.q[d]).abs() <= noise);
                }
                state = next;
            }
        }
    }
}
