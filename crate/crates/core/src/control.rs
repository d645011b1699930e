//! Feedback control and torque composition.
//!
//! Two feedback controllers are provided: classic PID on the position error
//! against the reference trajectory, and an adaptive offset learned online by
//! gradient descent on the acceleration error. Each episode runs two
//! instances of the chosen controller: one at the applied gain that actually
//! drives the plant, and a shadow instance at the learner gain whose output is
//! only recorded (exponentially filtered) as training signal.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// PD acceleration policy toward a fixed goal state.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelPolicy {
    pub q_des: Vec<f64>,
    pub kp: f64,
    pub kd: f64,
}

impl AccelPolicy {
    pub fn new(q_des: Vec<f64>, kp: f64, kd: f64) -> Self {
        assert!(kp > 0.0 && kd > 0.0, "policy gains must be > 0");
        AccelPolicy { q_des, kp, kd }
    }

    /// Desired acceleration `kp*(q_des - q) - kd*qd`.
    pub fn accel(&self, q: &[f64], qd: &[f64]) -> Vec<f64> {
        self.q_des
            .iter()
            .zip(q)
            .zip(qd)
            .map(|((g, qi), vi)| self.kp * (g - qi) - self.kd * vi)
            .collect()
    }

    /// Reference trajectory from integrating the policy open loop with the
    /// same semi-implicit scheme as the plant. Entry `t` is the position the
    /// policy wants the system to be at after `t` steps.
    pub fn rollout_reference(&self, q0: &[f64], qd0: &[f64], dt: f64, steps: usize) -> Vec<Vec<f64>> {
        let mut q = q0.to_vec();
        let mut qd = qd0.to_vec();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(q.clone());
        for _ in 0..steps {
            let qdd = self.accel(&q, &qd);
            for d in 0..q.len() {
                qd[d] += qdd[d] * dt;
                q[d] += qd[d] * dt;
            }
            out.push(q.clone());
        }
        out
    }
}

/// PID controller state. Gains are stored unscaled; the applied/shadow gain
/// scale multiplies the output, so two instances fed the same error stream
/// produce exactly proportional outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PidState {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub kd: Vec<f64>,
    pub integral: Vec<f64>,
    pub last_error: Vec<f64>,
    integral_limit: f64,
    primed: bool,
}

impl PidState {
    pub fn new(kp: Vec<f64>, ki: Vec<f64>, kd: Vec<f64>, integral_limit: f64) -> Self {
        assert!(
            kp.iter().chain(&ki).chain(&kd).all(|g| *g >= 0.0),
            "pid gains must be >= 0"
        );
        assert_eq!(kp.len(), ki.len());
        assert_eq!(kp.len(), kd.len());
        let dim = kp.len();
        PidState {
            kp,
            ki,
            kd,
            integral: vec![0.0; dim],
            last_error: vec![0.0; dim],
            integral_limit,
            primed: false,
        }
    }

    /// Same gain on every dimension.
    pub fn uniform(dim: usize, kp: f64, ki: f64, kd: f64, integral_limit: f64) -> Self {
        PidState::new(vec![kp; dim], vec![ki; dim], vec![kd; dim], integral_limit)
    }
}

/// One PID update: accumulates the integral (with anti-windup clamp), forms
/// the derivative against the previous error, and returns
/// `gain_scale * (kp*err + ki*integral + kd*d_err/dt)`.
///
/// The first call after construction uses a zero derivative so the initial
/// error does not produce a spike.
pub fn pid_feedback(pid: &mut PidState, q_err: &[f64], dt: f64, gain_scale: f64) -> Vec<f64> {
    assert!(dt > 0.0, "time step must be > 0");
    assert_eq!(q_err.len(), pid.kp.len(), "error dimension mismatch");
    let mut out = Vec::with_capacity(q_err.len());
    for d in 0..q_err.len() {
        pid.integral[d] += q_err[d] * dt;
        if pid.integral[d] > pid.integral_limit {
            pid.integral[d] = pid.integral_limit;
        } else if pid.integral[d] < -pid.integral_limit {
            pid.integral[d] = -pid.integral_limit;
        }
        let derivative = if pid.primed {
            (q_err[d] - pid.last_error[d]) / dt
        } else {
            0.0
        };
        out.push(
            gain_scale
                * (pid.kp[d] * q_err[d] + pid.ki[d] * pid.integral[d] + pid.kd[d] * derivative),
        );
        pid.last_error[d] = q_err[d];
    }
    pid.primed = true;
    out
}

/// Adaptive feedback: an offset torque learned online by descending the
/// squared acceleration error. The offset is clamped to an anti-windup bound;
/// a pure integrator would otherwise wind without limit while stiction holds
/// the acceleration error constant.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveFbState {
    pub offset: Vec<f64>,
    pub eta: f64,
    offset_limit: f64,
}

impl AdaptiveFbState {
    pub fn new(dim: usize, eta: f64, offset_limit: f64) -> Self {
        assert!(eta > 0.0, "learning rate must be > 0");
        assert!(offset_limit > 0.0, "offset limit must be > 0");
        AdaptiveFbState {
            offset: vec![0.0; dim],
            eta,
            offset_limit,
        }
    }
}

/// One gradient step on the acceleration error:
/// `offset += gain_scale * eta * (qdd_des - qdd_act)`, clamped to the
/// anti-windup bound; the updated offset is the feedback torque.
pub fn adaptive_feedback(
    fb: &mut AdaptiveFbState,
    qdd_des: &[f64],
    qdd_act: &[f64],
    gain_scale: f64,
) -> Vec<f64> {
    assert_eq!(qdd_des.len(), fb.offset.len());
    assert_eq!(qdd_act.len(), fb.offset.len());
    for d in 0..fb.offset.len() {
        let next = fb.offset[d] + gain_scale * fb.eta * (qdd_des[d] - qdd_act[d]);
        fb.offset[d] = next.clamp(-fb.offset_limit, fb.offset_limit);
    }
    fb.offset.clone()
}

/// Applied vs learner gain scales for the dual controller instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainPair {
    pub g_low: f64,
    pub g_high: f64,
}

impl GainPair {
    pub fn new(g_low: f64, g_high: f64) -> Self {
        assert!(g_low > 0.0 && g_high >= g_low, "need g_high >= g_low > 0");
        GainPair { g_low, g_high }
    }
}

/// Total torque: model feedforward plus clamped error-model prediction plus
/// feedback.
pub fn compose_torque(tau_rbd: &[f64], f_err: &[f64], tau_fb: &[f64], f_clamp: f64) -> Vec<f64> {
    assert!(tau_rbd.len() == f_err.len() && tau_rbd.len() == tau_fb.len());
    let mut f = f_err.to_vec();
    math::clamp_to(&mut f, f_clamp);
    tau_rbd
        .iter()
        .zip(&f)
        .zip(tau_fb)
        .map(|((r, fe), fb)| r + fe + fb)
        .collect()
}

/// Exponential smoothing `(1 - beta)*prev + beta*new`.
pub fn exp_filter(prev: &[f64], new: &[f64], beta: f64) -> Vec<f64> {
    assert!(beta > 0.0 && beta <= 1.0, "filter constant must be in (0, 1]");
    prev.iter()
        .zip(new)
        .map(|(p, n)| (1.0 - beta) * p + beta * n)
        .collect()
}
