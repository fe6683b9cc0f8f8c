//! Rigid transformations (rotation, translation, reflection) and the sweep
//! generators used for robustness evaluation.
//!
//! Positions are row vectors and a transform acts as `p·A + T`. Rotations
//! are right-handed and counterclockwise when looking down the positive
//! axis toward the origin, so a quarter turn about Z maps X onto Y.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub a: [[f64; 3]; 3],
    pub t: [f64; 3],
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            a: IDENTITY,
            t: [0.0; 3],
        }
    }

    /// Builds a transform after checking orthogonality of `a`.
    pub fn new(a: [[f64; 3]; 3], t: [f64; 3]) -> Result<Self> {
        let tr = RigidTransform { a, t };
        if tr.orthogonality_error() > 1e-9 || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("transform matrix is not orthogonal".into()));
        }
        Ok(tr)
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = self.t;
        for (j, o) in out.iter_mut().enumerate() {
            *o += p[0] * self.a[0][j] + p[1] * self.a[1][j] + p[2] * self.a[2][j];
        }
        out
    }

    /// `self` followed by `then`.
    pub fn compose(&self, then: &RigidTransform) -> RigidTransform {
        let mut a = [[0.0; 3]; 3];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.a[i][k] * then.a[k][j]).sum();
            }
        }
        RigidTransform {
            a,
            t: then.apply_point(self.t),
        }
    }

    pub fn determinant(&self) -> f64 {
        let a = &self.a;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }

    /// `max |AᵀA - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| self.a[k][i] * self.a[k][j]).sum();
                worst = worst.max((v - IDENTITY[i][j]).abs());
            }
        }
        worst
    }
}

/// Row-vector rotation matrix for angle `radians` about unit `axis`.
fn rotation_matrix(axis: [f64; 3], radians: f64) -> [[f64; 3]; 3] {
    let (s, c) = radians.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    // column-vector Rodrigues matrix, transposed for p·A
    let r = [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ];
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = r[j][i];
        }
    }
    a
}

pub fn rotation_about_axis(axis: Axis, degrees: f64) -> RigidTransform {
    let radians = degrees.to_radians();
    let (s, c) = radians.sin_cos();
    // exact entries for the coordinate axes
    let (i, j) = match axis {
        Axis::X => (1, 2),
        Axis::Y => (2, 0),
        Axis::Z => (0, 1),
    };
    let mut a = IDENTITY;
    a[i][i] = c;
    a[j][j] = c;
    a[i][j] = s;
    a[j][i] = -s;
    RigidTransform { a, t: [0.0; 3] }
}

pub fn translation_along_axis(axis: Axis, v: f64) -> RigidTransform {
    let mut t = [0.0; 3];
    t[axis.index()] = v;
    RigidTransform { a: IDENTITY, t }
}

/// Mirror across the plane normal to `axis`.
pub fn reflection_across_axis(axis: Axis) -> RigidTransform {
    let mut a = IDENTITY;
    a[axis.index()][axis.index()] = -1.0;
    RigidTransform { a, t: [0.0; 3] }
}

pub fn apply(positions: &[[f64; 3]], t: &RigidTransform) -> Vec<[f64; 3]> {
    positions.iter().map(|&p| t.apply_point(p)).collect()
}

/// Random rigid motion for training: axis uniform on the sphere, angle
/// uniform in [0, 360), translation uniform in [-1.8, 1.8]³, and a mirror
/// with probability 1/2.
pub fn random_transform<R: Rng>(rng: &mut R) -> RigidTransform {
    let mut axis = [0.0f64; 3];
    let mut norm = 0.0;
    while norm < 1e-12 {
        for v in axis.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    axis.iter_mut().for_each(|v| *v /= norm);
    let degrees: f64 = rng.random_range(0.0..360.0);
    let mut t = RigidTransform {
        a: rotation_matrix(axis, degrees.to_radians()),
        t: [0.0; 3],
    };
    if rng.random_bool(0.5) {
        t = reflection_across_axis(Axis::X).compose(&t);
    }
    for v in t.t.iter_mut() {
        *v = rng.random_range(-TRANSLATION_LIMIT..=TRANSLATION_LIMIT);
    }
    t
}

pub const TRANSLATION_LIMIT: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Rotation,
    Translation,
    Reflection,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SweepKind::Rotation => "rotation",
            SweepKind::Translation => "translation",
            SweepKind::Reflection => "reflection",
        };
        f.write_str(s)
    }
}

/// One sweep over a single axis: `start, start+step, …, stop` (degrees for
/// rotation, length units for translation; ignored for reflection).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub axis: Axis,
    #[serde(default)]
    pub start: f64,
    #[serde(default)]
    pub stop: f64,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_step() -> f64 {
    1.0
}

impl SweepSpec {
    /// 0, 10, …, 360 degrees.
    pub fn rotation(axis: Axis) -> Self {
        SweepSpec {
            kind: SweepKind::Rotation,
            axis,
            start: 0.0,
            stop: 360.0,
            step: 10.0,
        }
    }

    /// -1.8, -1.7, …, 1.8.
    pub fn translation(axis: Axis) -> Self {
        SweepSpec {
            kind: SweepKind::Translation,
            axis,
            start: -TRANSLATION_LIMIT,
            stop: TRANSLATION_LIMIT,
            step: 0.1,
        }
    }

    pub fn reflection(axis: Axis) -> Self {
        SweepSpec {
            kind: SweepKind::Reflection,
            axis,
            start: 0.0,
            stop: 0.0,
            step: 1.0,
        }
    }

    /// Rotation, translation and reflection sweeps over all three axes:
    /// 225 transforms in total.
    pub fn full_suite() -> Vec<SweepSpec> {
        let mut v = Vec::with_capacity(9);
        for make in [SweepSpec::rotation, SweepSpec::translation, SweepSpec::reflection] {
            v.extend(Axis::ALL.iter().map(|&a| make(a)));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == SweepKind::Reflection {
            return Ok(());
        }
        let (lo, hi) = match self.kind {
            SweepKind::Rotation => (0.0, 360.0),
            _ => (-TRANSLATION_LIMIT, TRANSLATION_LIMIT),
        };
        let eps = 1e-9;
        if !(self.step > 0.0) || self.start > self.stop + eps {
            return Err(Error::Config(format!("invalid sweep range {self:?}")));
        }
        if self.start < lo - eps || self.stop > hi + eps {
            return Err(Error::Config(format!(
                "{} sweep must stay within [{lo}, {hi}], got [{}, {}]",
                self.kind, self.start, self.stop
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.kind == SweepKind::Reflection {
            return vec![0.0];
        }
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| {
                // snap to the step grid to avoid accumulated drift
                let v = self.start + i as f64 * self.step;
                (v * 1e9).round() / 1e9
            })
            .collect()
    }

    pub fn transform_for(&self, value: f64) -> RigidTransform {
        match self.kind {
            SweepKind::Rotation => rotation_about_axis(self.axis, value),
            SweepKind::Translation => translation_along_axis(self.axis, value),
            SweepKind::Reflection => reflection_across_axis(self.axis),
        }
    }
}

/// Every transform of a sweep, paired with its parameter value.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<(f64, RigidTransform)>> {
    spec.validate()?;
    Ok(spec.values().into_iter().map(|v| (v, spec.transform_for(v))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = rotation_about_axis(Axis::Z, 90.0);
        assert!(close(t.apply_point([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], 1e-15));
        let out = apply(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &t);
        assert!(close(out[1], [-1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn quarter_turns_follow_right_hand_rule() {
        let x = rotation_about_axis(Axis::X, 90.0);
        assert!(close(x.apply_point([0.0, 1.0, 0.0]), [0.0, 0.0, 1.0], 1e-15));
        let y = rotation_about_axis(Axis::Y, 90.0);
        assert!(close(y.apply_point([0.0, 0.0, 1.0]), [1.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn zero_and_full_turn_are_identity() {
        assert_eq!(rotation_about_axis(Axis::X, 0.0), RigidTransform::identity());
        let full = rotation_about_axis(Axis::Y, 360.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((full.a[i][j] - IDENTITY[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translations() {
        let t = translation_along_axis(Axis::X, 0.5);
        assert_eq!(t.apply_point([0.0; 3]), [0.5, 0.0, 0.0]);
        assert_eq!(translation_along_axis(Axis::Y, 0.0), RigidTransform::identity());
        let z = translation_along_axis(Axis::Z, -1.8);
        assert_eq!(z.apply_point([0.0, 0.0, 1.8]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn reflections() {
        let r = reflection_across_axis(Axis::X);
        assert_eq!(r.apply_point([1.0, 2.0, 3.0]), [-1.0, 2.0, 3.0]);
        assert_eq!(r.compose(&r), RigidTransform::identity());
        assert_eq!(reflection_across_axis(Axis::Y).apply_point([1.0, 0.0, 3.0]), [1.0, 0.0, 3.0]);
        assert_eq!(r.determinant(), -1.0);
    }

    #[test]
    fn sweep_counts() {
        assert_eq!(sweep(&SweepSpec::rotation(Axis::X)).unwrap().len(), 37);
        let tr = sweep(&SweepSpec::translation(Axis::Y)).unwrap();
        assert_eq!(tr.len(), 37);
        assert_eq!(tr[0].0, -1.8);
        assert_eq!(tr[36].0, 1.8);
        assert_eq!(tr[18].0, 0.0);
        assert_eq!(sweep(&SweepSpec::reflection(Axis::Z)).unwrap().len(), 1);
        let total: usize = SweepSpec::full_suite().iter().map(|s| sweep(s).unwrap().len()).sum();
        assert_eq!(total, 225);
    }

    #[test]
    fn out_of_range_sweeps_rejected() {
        let mut s = SweepSpec::translation(Axis::X);
        s.stop = 2.5;
        assert!(sweep(&s).is_err());
        let mut r = SweepSpec::rotation(Axis::X);
        r.start = -10.0;
        assert!(sweep(&r).is_err());
    }

    #[test]
    fn sweep_spec_serializes_as_config_fragment() {
        let s: SweepSpec = toml::from_str("kind = \"rotation\"\naxis = \"Z\"\nstart = 0\nstop = 90\nstep = 45").unwrap();
        assert_eq!(s.values(), [0.0, 45.0, 90.0]);
    }
}
