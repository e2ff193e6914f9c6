//! Rigid transforms, frame geometry and pose-chain accumulation.
//!
//! A [`RigidTransform`] carries six parameters: three intrinsic Z-Y-X Euler
//! angles (radians) and a translation in millimetres. The rotation block of
//! its homogeneous matrix is `Rz(rot[0]) * Ry(rot[1]) * Rx(rot[2])`.
//!
//! A frame's image plane is the `z = 0` plane of its local coordinates, with
//! pixel `(col, row)` at `(col * spacing, row * spacing, 0)`. A transform
//! labelled "frame i -> frame j" maps points expressed in frame `j` into
//! frame `i`, so world poses compose left to right along a chain.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Z, Y, X rotation angles in radians.
    pub rot: [f64; 3],
    /// Translation in mm.
    pub trans: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rot: [0.0; 3],
        trans: [0.0; 3],
    };

    pub fn new(rot: [f64; 3], trans: [f64; 3]) -> Result<Self> {
        let t = RigidTransform { rot, trans };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(trans: [f64; 3]) -> Self {
        RigidTransform {
            rot: [0.0; 3],
            trans,
        }
    }

    /// Parameters packed as `[rz, ry, rx, tx, ty, tz]`.
    pub fn from_params(p: &[f64]) -> Result<Self> {
        if p.len() != 6 {
            return Err(Error::InvalidInput(format!(
                "expected 6 transform parameters, got {}",
                p.len()
            )));
        }
        Self::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn params(&self) -> [f64; 6] {
        let [a, b, c] = self.rot;
        let [x, y, z] = self.trans;
        [a, b, c, x, y, z]
    }

    pub fn is_finite(&self) -> bool {
        self.rot.iter().chain(self.trans.iter()).all(|v| v.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "non-finite rigid transform parameters {:?}",
                self.params()
            )))
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_zyx(self.rot)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.trans)
    }

    /// Homogeneous 4x4 view. Does not validate; see [`to_matrix`].
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation());
        m
    }

    /// Recovers parameters from a homogeneous matrix whose rotation block is
    /// orthonormal. Unique for pitch in (-pi/2, pi/2); at gimbal lock the X
    /// angle is set to zero.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r = m.fixed_view::<3, 3>(0, 0);
        let sb = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let pitch = sb.asin();
        let cb = (r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt();
        let (yaw, roll) = if cb > 1e-12 {
            (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
        } else {
            ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
        };
        RigidTransform {
            rot: [yaw, pitch, roll],
            trans: [m[(0, 3)], m[(1, 3)], m[(2, 3)]],
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }
}

/// `Rz(a) * Ry(b) * Rx(c)` for `rot = [a, b, c]`.
pub fn euler_zyx(rot: [f64; 3]) -> Matrix3<f64> {
    let [a, b, c] = rot;
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    Matrix3::new(
        ca * cb,
        ca * sb * sc - sa * cc,
        ca * sb * cc + sa * sc,
        sa * cb,
        sa * sb * sc + ca * cc,
        sa * sb * cc - ca * sc,
        -sb,
        cb * sc,
        cb * cc,
    )
}

/// Partial derivatives of [`euler_zyx`] with respect to each of the three
/// angles.
pub fn euler_zyx_partials(rot: [f64; 3]) -> [Matrix3<f64>; 3] {
    let [a, b, c] = rot;
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rz = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    let ry = Matrix3::new(cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cc, -sc, 0.0, sc, cc);
    let drz = Matrix3::new(-sa, -ca, 0.0, ca, -sa, 0.0, 0.0, 0.0, 0.0);
    let dry = Matrix3::new(-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sc, -cc, 0.0, cc, -sc);
    [drz * ry * rx, rz * dry * rx, rz * ry * drx]
}

/// Homogeneous matrix of `p`, rejecting non-finite parameters.
pub fn to_matrix(p: &RigidTransform) -> Result<Matrix4<f64>> {
    p.validate()?;
    Ok(p.matrix())
}

pub fn from_matrix(m: &Matrix4<f64>) -> RigidTransform {
    RigidTransform::from_matrix(m)
}

/// `a` followed by `b` in the chain sense: `matrix(result) = matrix(a) * matrix(b)`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let ra = a.rotation();
    let r = ra * b.rotation();
    let t = ra * b.translation() + a.translation();
    from_rt(&r, &t)
}

pub fn invert(a: &RigidTransform) -> RigidTransform {
    let rt = a.rotation().transpose();
    let t = -(rt * a.translation());
    from_rt(&rt, &t)
}

/// Transform taking frame `j` coordinates to frame `i` coordinates, given both
/// frames' world poses.
pub fn relative_pose(world_i: &RigidTransform, world_j: &RigidTransform) -> RigidTransform {
    compose(&invert(world_i), world_j)
}

fn from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> RigidTransform {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    RigidTransform::from_matrix(&m)
}

/// Relative transforms between consecutive frames and the world poses they
/// accumulate to (world = frame 0).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseChain {
    pub rel: Vec<RigidTransform>,
    pub world: Vec<RigidTransform>,
}

impl PoseChain {
    pub fn len(&self) -> usize {
        self.world.len()
    }

    pub fn is_empty(&self) -> bool {
        self.world.is_empty()
    }

    pub fn world_matrices(&self) -> Vec<Matrix4<f64>> {
        accumulate_matrices(&self.rel)
    }
}

pub fn accumulate(rels: &[RigidTransform]) -> PoseChain {
    let world = accumulate_matrices(rels)
        .iter()
        .enumerate()
        .map(|(k, m)| {
            if k == 0 {
                RigidTransform::IDENTITY
            } else {
                RigidTransform::from_matrix(m)
            }
        })
        .collect();
    PoseChain {
        rel: rels.to_vec(),
        world,
    }
}

/// World (frame 0) matrices of every frame, as running left-to-right products.
pub fn accumulate_matrices(rels: &[RigidTransform]) -> Vec<Matrix4<f64>> {
    let mut out = Vec::with_capacity(rels.len() + 1);
    let mut acc = Matrix4::identity();
    out.push(acc);
    for r in rels {
        acc *= r.matrix();
        out.push(acc);
    }
    out
}

/// Re-expresses world poses relative to the first pose, so that the first
/// returned matrix is the identity.
pub fn relative_to_first(world: &[RigidTransform]) -> Vec<Matrix4<f64>> {
    let Some(first) = world.first() else {
        return Vec::new();
    };
    let inv0 = invert(first).matrix();
    world.iter().map(|w| inv0 * w.matrix()).collect()
}

/// Consecutive relative transforms of a world-pose sequence.
pub fn consecutive_relatives(world: &[RigidTransform]) -> Vec<RigidTransform> {
    world
        .windows(2)
        .map(|w| relative_pose(&w[0], &w[1]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub height_px: usize,
    pub width_px: usize,
    /// Isotropic in-plane pixel spacing, mm per pixel.
    pub spacing_mm: f64,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        FrameGeometry {
            height_px: 64,
            width_px: 64,
            spacing_mm: 0.5,
        }
    }
}

impl FrameGeometry {
    pub fn new(height_px: usize, width_px: usize, spacing_mm: f64) -> Result<Self> {
        let g = FrameGeometry {
            height_px,
            width_px,
            spacing_mm,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::InvalidParameter(format!(
                "frame size must be positive, got {}x{}",
                self.height_px, self.width_px
            )));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel spacing must be positive, got {}",
                self.spacing_mm
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.height_px * self.width_px
    }

    /// Frame-local position of the image centre.
    pub fn center(&self) -> Point3<f64> {
        Point3::new(
            (self.width_px as f64 - 1.0) * self.spacing_mm / 2.0,
            (self.height_px as f64 - 1.0) * self.spacing_mm / 2.0,
            0.0,
        )
    }

    pub fn pixel_point(&self, row: usize, col: usize) -> Point3<f64> {
        Point3::new(
            col as f64 * self.spacing_mm,
            row as f64 * self.spacing_mm,
            0.0,
        )
    }
}

/// The four pixel-index corners of a frame, in mm.
pub fn frame_corners(g: &FrameGeometry) -> [Point3<f64>; 4] {
    let (h, w) = (g.height_px - 1, g.width_px - 1);
    [
        g.pixel_point(0, 0),
        g.pixel_point(0, w),
        g.pixel_point(h, 0),
        g.pixel_point(h, w),
    ]
}

/// Every `stride`-th pixel along rows and columns, starting at pixel (0, 0).
pub fn frame_pixel_grid(g: &FrameGeometry, stride: usize) -> Result<Vec<Point3<f64>>> {
    if stride == 0 {
        return Err(Error::InvalidParameter("pixel stride must be >= 1".into()));
    }
    let mut pts = Vec::with_capacity(g.height_px.div_ceil(stride) * g.width_px.div_ceil(stride));
    for row in (0..g.height_px).step_by(stride) {
        for col in (0..g.width_px).step_by(stride) {
            pts.push(g.pixel_point(row, col));
        }
    }
    Ok(pts)
}
