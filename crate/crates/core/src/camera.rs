//! Pinhole cameras: projection, unprojection and point flow.
//!
//! Right-handed camera frame looking down +Z. Image origin is the top-left
//! corner with `v` growing downwards; the centre of pixel `(i, j)` sits at
//! `(i + 0.5, j + 0.5)`.

use std::fmt::Write as _;

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::math::{matvec_c, transpose_f, V3};

pub const DEFAULT_NEAR: f64 = 1e-4;

/// Rigid world-to-camera transform `x_cam = R·x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let rt = crate::math::matmul_f(&rotation, &transpose_f(&rotation));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rt[i][j] - want).abs() > 1e-9 {
                    return Err(Error::Domain("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn apply<R: Real>(&self, x: V3<R>) -> V3<R> {
        let r = matvec_c(&self.rotation, x);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn inverse_apply(&self, x: [f64; 3]) -> [f64; 3] {
        let d = [
            x[0] - self.translation[0],
            x[1] - self.translation[1],
            x[2] - self.translation[2],
        ];
        matvec_c(&transpose_f(&self.rotation), d)
    }

    /// Pose of a camera at `eye` looking at `target`; `up` is world-up
    /// (image rows grow along `-up`).
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let f = normalize(crate::math::sub3f(target, eye))?;
        // camera y points down in the image
        let r = normalize(cross(f, up))?;
        let d = cross(f, r);
        let rot = [r, d, f];
        let t = matvec_c(&rot, eye);
        RigidTransform::new(rot, [-t[0], -t[1], -t[2]])
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> Result<[f64; 3]> {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::Domain("degenerate camera frame".into()));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_cam: RigidTransform,
    pub near: f64,
}

/// Projected point: pixel coordinates and camera-space depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<R> {
    pub uv: [R; 2],
    pub depth: R,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_cam: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Domain(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Domain("image size must be at least 1x1".into()));
        }
        Ok(PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_cam,
            near: DEFAULT_NEAR,
        })
    }

    /// Camera with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize, world_to_cam: RigidTransform) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 * 0.5,
            height as f64 * 0.5,
            width,
            height,
            world_to_cam,
        )
    }

    pub fn center(&self) -> [f64; 3] {
        self.world_to_cam.inverse_apply([0.0; 3])
    }

    pub fn to_camera<R: Real>(&self, x: V3<R>) -> V3<R> {
        self.world_to_cam.apply(x)
    }

    /// Projects a world point; points at or behind the near plane are errors.
    pub fn project<R: Real>(&self, x: V3<R>) -> Result<Projection<R>> {
        let c = self.to_camera(x);
        self.project_camera(c)
    }

    pub fn project_camera<R: Real>(&self, c: V3<R>) -> Result<Projection<R>> {
        let z = c[2];
        if !(z.val() > self.near) {
            return Err(Error::BehindCamera(z.val()));
        }
        let inv = R::cst(1.0) / z;
        Ok(Projection {
            uv: [c[0] * inv * self.fx + self.cx, c[1] * inv * self.fy + self.cy],
            depth: z,
        })
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<[f64; 3]> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("unproject needs positive depth, got {depth}")));
        }
        let c = [
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ];
        Ok(self.world_to_cam.inverse_apply(c))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Plain-text record: one `key value...` line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fx {:?}", self.fx);
        let _ = writeln!(s, "fy {:?}", self.fy);
        let _ = writeln!(s, "cx {:?}", self.cx);
        let _ = writeln!(s, "cy {:?}", self.cy);
        let _ = writeln!(s, "width {}", self.width);
        let _ = writeln!(s, "height {}", self.height);
        let r = &self.world_to_cam.rotation;
        let t = &self.world_to_cam.translation;
        let _ = write!(s, "world_to_cam");
        for i in 0..3 {
            let _ = write!(s, " {:?} {:?} {:?} {:?}", r[i][0], r[i][1], r[i][2], t[i]);
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vals: std::collections::HashMap<&str, Vec<&str>> = Default::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default();
            if !matches!(key, "fx" | "fy" | "cx" | "cy" | "width" | "height" | "world_to_cam") {
                return Err(Error::Format(format!("unknown camera key '{key}'")));
            }
            vals.insert(key, it.collect());
        }
        let num = |k: &str| -> Result<f64> {
            let v = vals
                .get(k)
                .and_then(|v| v.first())
                .ok_or_else(|| Error::Format(format!("camera record lacks '{k}'")))?;
            v.parse::<f64>()
                .map_err(|e| Error::Format(format!("camera '{k}': {e}")))
        };
        let m = vals
            .get("world_to_cam")
            .ok_or_else(|| Error::Format("camera record lacks 'world_to_cam'".into()))?;
        if m.len() != 12 {
            return Err(Error::Format(format!("world_to_cam needs 12 numbers, got {}", m.len())));
        }
        let m: Vec<f64> = m
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("world_to_cam: {e}"))))
            .collect::<Result<_>>()?;
        let rot = [
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ];
        let pose = RigidTransform::new(rot, [m[3], m[7], m[11]])?;
        PinholeCamera::new(
            num("fx")?,
            num("fy")?,
            num("cx")?,
            num("cy")?,
            num("width")? as usize,
            num("height")? as usize,
            pose,
        )
    }
}

/// Pixel displacement of a point moving from `x_prev` (seen by `cam_prev`)
/// to `x_curr` (seen by `cam_curr`).
pub fn flow_between<R: Real>(
    cam_prev: &PinholeCamera,
    cam_curr: &PinholeCamera,
    x_prev: V3<R>,
    x_curr: V3<R>,
) -> Result<[R; 2]> {
    let a = cam_prev.project(x_prev)?;
    let b = cam_curr.project(x_curr)?;
    Ok([b.uv[0] - a.uv[0], b.uv[1] - a.uv[1]])
}
