//! Camera poses and intra-exposure trajectories.
//!
//! The toy scene moves in SE(2): a rotation by `angle` followed by a
//! translation, both in pixel units. Poses along an exposure are stored at
//! uniformly spaced timesteps and linearly interpolated in between. A
//! quaternion SLERP is provided for SE(3) rigs that store unit-quaternion
//! rotations.

use crate::core::event::ExposureWindow;
use crate::error::{EvdiError, Result};

/// Rigid 2D transform: p -> R(angle) * p + (tx, ty).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    /// Rotation in radians, counter-clockwise.
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose2 {
    pub fn identity() -> Self {
        Pose2 {
            angle: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn new(angle: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(angle.is_finite() && tx.is_finite() && ty.is_finite()) {
            return Err(EvdiError::domain("pose components must be finite"));
        }
        Ok(Pose2 { angle, tx, ty })
    }

    #[inline]
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (c * p.0 - s * p.1 + self.tx, s * p.0 + c * p.1 + self.ty)
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.angle.sin_cos();
        Pose2 {
            angle: self.angle + other.angle,
            tx: c * other.tx - s * other.ty + self.tx,
            ty: s * other.tx + c * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.angle.sin_cos();
        // R^-1 * (-t)
        Pose2 {
            angle: -self.angle,
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
        }
    }
}

/// Linear interpolation of angle and translation; u must be in [0, 1].
pub fn pose_lerp(a: &Pose2, b: &Pose2, u: f64) -> Result<Pose2> {
    if !(0.0..=1.0).contains(&u) {
        return Err(EvdiError::domain(format!(
            "interpolation parameter must be in [0, 1], got {u}"
        )));
    }
    Ok(Pose2 {
        angle: a.angle + u * (b.angle - a.angle),
        tx: a.tx + u * (b.tx - a.tx),
        ty: a.ty + u * (b.ty - a.ty),
    })
}

/// SE(3) pose with a unit quaternion rotation (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatPose {
    pub quat: [f64; 4],
    pub translation: [f64; 3],
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl QuatPose {
    pub fn new(quat: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let n = quat_norm(&quat);
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(EvdiError::domain(format!(
                "quaternion must be unit length within 1e-9, |q| = {n}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(EvdiError::domain("translation must be finite"));
        }
        Ok(QuatPose { quat, translation })
    }

    pub fn identity() -> Self {
        QuatPose {
            quat: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }
}

/// Spherical linear interpolation of the rotation with lerped translation.
///
/// The shorter great-circle arc is taken (q and -q describe the same
/// rotation); nearly parallel quaternions fall back to normalized lerp.
pub fn quat_slerp(a: &QuatPose, b: &QuatPose, u: f64) -> Result<QuatPose> {
    if !(0.0..=1.0).contains(&u) {
        return Err(EvdiError::domain(format!(
            "interpolation parameter must be in [0, 1], got {u}"
        )));
    }
    let qa = a.quat;
    let mut qb = b.quat;
    let mut dot: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
    if dot < 0.0 {
        for v in &mut qb {
            *v = -*v;
        }
        dot = -dot;
    }
    let mut q = [0.0; 4];
    if dot > 1.0 - 1e-10 {
        for i in 0..4 {
            q[i] = qa[i] + u * (qb[i] - qa[i]);
        }
    } else {
        let omega = dot.clamp(-1.0, 1.0).acos();
        let so = omega.sin();
        let wa = ((1.0 - u) * omega).sin() / so;
        let wb = (u * omega).sin() / so;
        for i in 0..4 {
            q[i] = wa * qa[i] + wb * qb[i];
        }
    }
    let n = quat_norm(&q);
    for v in &mut q {
        *v /= n;
    }
    let mut t = [0.0; 3];
    for i in 0..3 {
        t[i] = a.translation[i] + u * (b.translation[i] - a.translation[i]);
    }
    QuatPose::new(q, t)
}

/// Camera motion across one exposure: n >= 2 poses at uniformly spaced,
/// strictly increasing timesteps whose first/last coincide with the window
/// bounds.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub view_id: String,
    pub window: ExposureWindow,
    timesteps: Vec<f64>,
    poses: Vec<Pose2>,
}

impl Trajectory {
    pub fn new(view_id: impl Into<String>, window: ExposureWindow, poses: Vec<Pose2>) -> Result<Self> {
        let n = poses.len();
        if n < 2 {
            return Err(EvdiError::domain(format!(
                "trajectory needs at least 2 poses, got {n}"
            )));
        }
        let start = window.start();
        let end = window.end();
        let mut timesteps = Vec::with_capacity(n);
        for i in 0..n {
            timesteps.push(start + (end - start) * i as f64 / (n - 1) as f64);
        }
        timesteps[0] = start;
        timesteps[n - 1] = end;
        if timesteps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EvdiError::domain(
                "trajectory timesteps are not strictly increasing",
            ));
        }
        Ok(Trajectory {
            view_id: view_id.into(),
            window,
            timesteps,
            poses,
        })
    }

    /// Builds n poses by linear interpolation between two endpoint poses.
    pub fn from_endpoints(
        view_id: impl Into<String>,
        window: ExposureWindow,
        first: Pose2,
        last: Pose2,
        n: usize,
    ) -> Result<Self> {
        if n < 2 {
            return Err(EvdiError::domain(format!(
                "trajectory needs at least 2 poses, got {n}"
            )));
        }
        let poses = (0..n)
            .map(|i| pose_lerp(&first, &last, i as f64 / (n - 1) as f64))
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(view_id, window, poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn poses(&self) -> &[Pose2] {
        &self.poses
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    /// Pose at an arbitrary time inside the window. Exactly at a stored
    /// timestep the stored pose is returned unchanged. Times a few ulps
    /// outside, as produced by recomputing bounds from mid/tau, are snapped
    /// onto the nearest endpoint.
    pub fn pose_at(&self, t: f64) -> Result<Pose2> {
        let tol = 1e-9 * self.window.tau;
        if !t.is_finite() || t < self.window.start() - tol || t > self.window.end() + tol {
            return Err(EvdiError::domain(format!(
                "time {t} outside exposure window [{}, {}]",
                self.window.start(),
                self.window.end()
            )));
        }
        let t = t.clamp(self.timesteps[0], *self.timesteps.last().unwrap());
        // First index with timestep >= t.
        let k = self.timesteps.partition_point(|&ts| ts < t);
        if k < self.timesteps.len() && self.timesteps[k] == t {
            return Ok(self.poses[k]);
        }
        let j = k - 1; // k >= 1 here: t > timesteps[0] after the clamp
        let u = (t - self.timesteps[j]) / (self.timesteps[j + 1] - self.timesteps[j]);
        pose_lerp(&self.poses[j], &self.poses[j + 1], u)
    }
}
