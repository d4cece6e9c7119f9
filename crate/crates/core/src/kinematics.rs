//! Planar serial arm: forward kinematics, analytic Jacobian and damped
//! least-squares inverse kinematics.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("invalid arm: {0}")]
    InvalidArm(String),
    #[error("invalid solver parameter: {0}")]
    InvalidParameter(String),
}

/// Arm description as stored in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub link_lengths: Vec<f64>,
    pub joint_limits: Vec<[f64; 2]>,
    pub home: Vec<f64>,
    pub base: [f64; 2],
    pub damping: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl ArmConfig {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        self.home_arm().map(|_| ())?;
        if !(self.damping > 0.0) || !(self.tolerance > 0.0) {
            return Err(KinematicsError::InvalidParameter(
                "damping and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Arm posed at its home configuration.
    pub fn home_arm(&self) -> Result<ArmModel, KinematicsError> {
        ArmModel::new(
            self.link_lengths.clone(),
            self.home.clone(),
            self.joint_limits.iter().map(|l| (l[0], l[1])).collect(),
            (self.base[0], self.base[1]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    lengths: Vec<f64>,
    theta: Vec<f64>,
    limits: Vec<(f64, f64)>,
    base: (f64, f64),
}

impl ArmModel {
    pub fn new(
        lengths: Vec<f64>,
        theta: Vec<f64>,
        limits: Vec<(f64, f64)>,
        base: (f64, f64),
    ) -> Result<Self, KinematicsError> {
        let bad = |m: String| Err(KinematicsError::InvalidArm(m));
        if lengths.is_empty() {
            return bad("at least one link is required".into());
        }
        if theta.len() != lengths.len() || limits.len() != lengths.len() {
            return bad(format!(
                "{} links but {} angles and {} limits",
                lengths.len(),
                theta.len(),
                limits.len()
            ));
        }
        if lengths.iter().any(|l| !(*l > 0.0)) {
            return bad("link lengths must be positive".into());
        }
        for (i, (&t, &(lo, hi))) in theta.iter().zip(&limits).enumerate() {
            if !(lo <= hi) {
                return bad(format!("joint {i}: empty limit range"));
            }
            if !(lo..=hi).contains(&t) {
                return bad(format!("joint {i}: angle {t} outside [{lo}, {hi}]"));
            }
        }
        Ok(ArmModel {
            lengths,
            theta,
            limits,
            base,
        })
    }

    /// Arm with no effective joint limits.
    pub fn unlimited(lengths: Vec<f64>, theta: Vec<f64>) -> Result<Self, KinematicsError> {
        let n = lengths.len();
        Self::new(lengths, theta, vec![(f64::NEG_INFINITY, f64::INFINITY); n], (0.0, 0.0))
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn limits(&self) -> &[(f64, f64)] {
        &self.limits
    }

    pub fn base(&self) -> (f64, f64) {
        self.base
    }

    pub fn dof(&self) -> usize {
        self.lengths.len()
    }

    /// Same arm at another configuration, clamped to the joint limits.
    pub fn with_theta(&self, theta: &[f64]) -> Self {
        let mut a = self.clone();
        a.theta = theta
            .iter()
            .zip(&self.limits)
            .map(|(&t, &(lo, hi))| t.clamp(lo, hi))
            .collect();
        a
    }

    pub fn reach(&self) -> f64 {
        self.lengths.iter().sum()
    }

    /// Radius of the unreachable disk around the base, ignoring joint limits.
    pub fn inner_reach(&self) -> f64 {
        let max = self.lengths.iter().cloned().fold(0.0, f64::max);
        (2.0 * max - self.reach()).max(0.0)
    }
}

/// End-effector position.
pub fn forward_kinematics(arm: &ArmModel) -> (f64, f64) {
    let (mut x, mut y) = arm.base;
    let mut phi = 0.0;
    for (l, t) in arm.lengths.iter().zip(&arm.theta) {
        phi += t;
        x += l * phi.cos();
        y += l * phi.sin();
    }
    (x, y)
}

/// 2 x n matrix of partial derivatives of the end effector w.r.t. each joint.
pub fn jacobian(arm: &ArmModel) -> DMatrix<f64> {
    let n = arm.dof();
    let mut phis = Vec::with_capacity(n);
    let mut phi = 0.0;
    for t in &arm.theta {
        phi += t;
        phis.push(phi);
    }
    let mut j = DMatrix::zeros(2, n);
    // Column i sums the contributions of links i..n.
    let (mut sx, mut sy) = (0.0, 0.0);
    for k in (0..n).rev() {
        sx += arm.lengths[k] * phis[k].cos();
        sy += arm.lengths[k] * phis[k].sin();
        j[(0, k)] = -sy;
        j[(1, k)] = sx;
    }
    j
}

/// `Jᵀ(JJᵀ + λ²I)⁻¹e`; NaN-filled when the damped matrix is singular.
fn dls_step(j: &DMatrix<f64>, e: &Vector2<f64>, lambda2: f64) -> DVector<f64> {
    let jjt = Matrix2::from_iterator((j * j.transpose()).iter().cloned()) + Matrix2::identity() * lambda2;
    match jjt.try_inverse() {
        Some(inv) => j.transpose() * DVector::from_column_slice((inv * e).as_slice()),
        None => DVector::from_element(j.ncols(), f64::NAN),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub theta: Vec<f64>,
    /// Distance from the end effector to the target (meters).
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkParams {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for IkParams {
    fn default() -> Self {
        IkParams {
            damping: 0.1,
            tolerance: 1e-4,
            max_iters: 200,
        }
    }
}

/// Damped least-squares IK from the arm's current configuration.
///
/// Each iterate is clamped to the joint limits, and a joint pinned at a limit
/// is dropped from the step that would push it further. Returns the best-residual
/// iterate; `converged` implies `residual <= tolerance`. Targets outside the
/// reachable annulus return immediately with a diagnostic.
pub fn solve_ik(arm: &ArmModel, target: (f64, f64), params: IkParams) -> Result<IkSolution, KinematicsError> {
    if !(params.damping > 0.0) {
        return Err(KinematicsError::InvalidParameter(format!("damping {} <= 0", params.damping)));
    }
    if !(params.tolerance > 0.0) {
        return Err(KinematicsError::InvalidParameter(format!(
            "tolerance {} <= 0",
            params.tolerance
        )));
    }
    let residual_of = |a: &ArmModel| {
        let (x, y) = forward_kinematics(a);
        Vector2::new(target.0 - x, target.1 - y)
    };
    let dist = ((target.0 - arm.base.0).powi(2) + (target.1 - arm.base.1).powi(2)).sqrt();
    if dist > arm.reach() || dist < arm.inner_reach() {
        return Ok(IkSolution {
            theta: arm.theta.clone(),
            residual: residual_of(arm).norm(),
            iterations: 0,
            converged: false,
            diagnostic: Some(format!(
                "target at distance {dist:.4} m lies outside the reachable annulus [{:.4}, {:.4}]",
                arm.inner_reach(),
                arm.reach()
            )),
        });
    }

    let lambda2 = params.damping * params.damping;
    let mut cur = arm.with_theta(&arm.theta);
    let mut e = residual_of(&cur);
    let mut best = (e.norm(), cur.theta.clone());
    let mut iterations = 0;
    while best.0 > params.tolerance && iterations < params.max_iters {
        iterations += 1;
        let mut j = jacobian(&cur);
        let mut step = dls_step(&j, &e, lambda2);
        // A joint resting on a limit and pushed outward is frozen for this
        // iterate; otherwise clamping would absorb the whole update.
        for _ in 0..cur.dof() {
            let mut frozen = false;
            for (k, &(lo, hi)) in cur.limits.iter().enumerate() {
                let t = cur.theta[k];
                let pinned = (t <= lo && step[k] < 0.0) || (t >= hi && step[k] > 0.0);
                if pinned && j.column(k).iter().any(|v| *v != 0.0) {
                    j.column_mut(k).fill(0.0);
                    frozen = true;
                }
            }
            if !frozen {
                break;
            }
            step = dls_step(&j, &e, lambda2);
        }
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        let next: Vec<f64> = cur.theta.iter().zip(step.iter()).map(|(t, d)| t + d).collect();
        cur = cur.with_theta(&next);
        e = residual_of(&cur);
        if e.norm() < best.0 {
            best = (e.norm(), cur.theta.clone());
        }
    }
    let converged = best.0 <= params.tolerance;
    Ok(IkSolution {
        theta: best.1,
        residual: best.0,
        iterations,
        converged,
        diagnostic: (!converged).then(|| format!("residual {:.2e} m after {iterations} iterations", best.0)),
    })
}
