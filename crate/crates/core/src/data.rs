//! Training data construction from task-execution traces.
//!
//! One task execution yields a step trace; from it two training sets are
//! built. The indirect set pairs inputs at the *actual* (finite-differenced)
//! accelerations with the torque the model failed to explain. The direct set
//! pairs inputs at the *desired* accelerations with the filtered shadow
//! feedback plus the previous model's prediction, which estimates the modeling
//! error right on the trajectory the policy asked for.

use alloc::vec::Vec;
use core::fmt;

/// Which acceleration an input point carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccelKind {
    /// Finite-differenced acceleration the plant actually realized.
    Actual,
    /// Acceleration the policy commanded.
    Desired,
}

/// Regression input `x = (q, qd, qdd)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPoint {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub accel_kind: AccelKind,
}

impl InputPoint {
    pub fn new(q: Vec<f64>, qd: Vec<f64>, qdd: Vec<f64>, accel_kind: AccelKind) -> Self {
        assert!(
            q.len() == qd.len() && q.len() == qdd.len(),
            "input point dimension mismatch"
        );
        InputPoint {
            q,
            qd,
            qdd,
            accel_kind,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Stacked feature vector `(q, qd, qdd)` of length `3 * dim`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.dim());
        out.extend_from_slice(&self.q);
        out.extend_from_slice(&self.qd);
        out.extend_from_slice(&self.qdd);
        out
    }
}

/// Data source selector for training and for sample labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DataSource {
    Indirect,
    Direct,
    Joint,
}

impl DataSource {
    pub const ALL: [DataSource; 3] = [DataSource::Indirect, DataSource::Direct, DataSource::Joint];

    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Indirect => "indirect",
            DataSource::Direct => "direct",
            DataSource::Joint => "joint",
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One `(x, y)` regression pair with its source label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub x: InputPoint,
    pub y: Vec<f64>,
    pub source: DataSource,
}

/// A labeled set of training samples from one learning iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub source_label: DataSource,
    pub iteration: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-step record of everything the data builders need.
///
/// `x_a` and `tau_rbd_at_xa` stay `None` until the next step's measurement
/// has been finite-differenced; the final step of an episode never gets one.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub x_d: InputPoint,
    pub x_a: Option<InputPoint>,
    pub tau_total: Vec<f64>,
    pub tau_rbd_at_xa: Option<Vec<f64>>,
    /// Exponentially filtered shadow (learner-gain) feedback at command time.
    pub tau_fb_learner: Vec<f64>,
    /// Feedback actually applied to the plant at command time.
    pub tau_fb_applied: Vec<f64>,
    /// Previous error model evaluated at `x_d` (clamped, as applied).
    pub f_prev_at_xd: Vec<f64>,
}

/// Error from dataset construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataError {
    IterationMismatch { left: u32, right: u32 },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::IterationMismatch { left, right } => {
                write!(f, "dataset iteration mismatch: {left} vs {right}")
            }
        }
    }
}

/// Indirect set: inputs at actual accelerations, targets
/// `tau_total - rbd(x_a)`. Steps without a finalized `x_a` are skipped.
pub fn build_indirect(trace: &[StepTrace], iteration: u32) -> Dataset {
    let samples = trace
        .iter()
        .filter_map(|step| {
            let x_a = step.x_a.as_ref()?;
            let rbd = step.tau_rbd_at_xa.as_ref()?;
            debug_assert_eq!(x_a.accel_kind, AccelKind::Actual);
            let y = step
                .tau_total
                .iter()
                .zip(rbd)
                .map(|(t, r)| t - r)
                .collect();
            Some(TrainingSample {
                x: x_a.clone(),
                y,
                source: DataSource::Indirect,
            })
        })
        .collect();
    Dataset {
        samples,
        source_label: DataSource::Indirect,
        iteration,
    }
}

/// Direct set: inputs at desired accelerations, targets
/// `tau_fb_learner + f_prev(x_d)`.
pub fn build_direct(trace: &[StepTrace], iteration: u32) -> Dataset {
    let samples = trace
        .iter()
        .map(|step| {
            debug_assert_eq!(step.x_d.accel_kind, AccelKind::Desired);
            let y = step
                .tau_fb_learner
                .iter()
                .zip(&step.f_prev_at_xd)
                .map(|(fb, f)| fb + f)
                .collect();
            TrainingSample {
                x: step.x_d.clone(),
                y,
                source: DataSource::Direct,
            }
        })
        .collect();
    Dataset {
        samples,
        source_label: DataSource::Direct,
        iteration,
    }
}

/// Union of the two sets, preserving per-sample source labels.
pub fn build_joint(indirect: &Dataset, direct: &Dataset) -> Result<Dataset, DataError> {
    if indirect.iteration != direct.iteration {
        return Err(DataError::IterationMismatch {
            left: indirect.iteration,
            right: direct.iteration,
        });
    }
    let mut samples = Vec::with_capacity(indirect.len() + direct.len());
    samples.extend_from_slice(&indirect.samples);
    samples.extend_from_slice(&direct.samples);
    Ok(Dataset {
        samples,
        source_label: DataSource::Joint,
        iteration: indirect.iteration,
    })
}
