//! 3D Gaussians: parameters, covariance and spatial contribution.

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::math::{quat_to_rot, sub3, transpose, matvec, M3, V3};

/// Zeroth-order real spherical-harmonics constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// First-order real spherical-harmonics constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the input. Values already unit within 1e-9 are kept as-is.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if !(n2.is_finite() && n2 > 0.0) {
            return Err(Error::Domain(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        let n = n2.sqrt();
        if (n - 1.0).abs() <= 1e-9 {
            Ok(Quaternion { w, x, y, z })
        } else {
            Ok(Quaternion {
                w: w / n,
                x: x / n,
                y: y / n,
                z: z / n,
            })
        }
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return Err(Error::Domain("zero rotation axis".into()));
        }
        let s = (angle * 0.5).sin() / n;
        Self::new((angle * 0.5).cos(), axis[0] * s, axis[1] * s, axis[2] * s)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product `self · rhs`.
    pub fn mul(self, r: Quaternion) -> Quaternion {
        let (a, b) = (self, r);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
        .expect("product of unit quaternions is nonzero")
    }

    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        quat_to_rot(self.to_array())
    }
}

/// Parameters of a single Gaussian in a form generic over the scalar type.
///
/// `rotation` need not be unit length; consumers normalize it.
#[derive(Clone, Debug)]
pub struct Splat<R> {
    pub center: V3<R>,
    pub rotation: [R; 4],
    pub scale: V3<R>,
    pub opacity: R,
    pub sh: Vec<V3<R>>,
}

/// Σ = R·diag(s)²·Rᵀ
pub fn covariance<R: Real>(rotation: [R; 4], scale: V3<R>) -> M3<R> {
    let r = quat_to_rot(rotation);
    let mut m = r;
    for row in m.iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = *v * scale[k];
        }
    }
    let mut out = [[R::cst(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
        }
    }
    out
}

/// Covariance of a Gaussian with the given rotation and linear scale.
pub fn covariance_from(rotation: Quaternion, scale: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("scale must be positive, got {scale:?}")));
    }
    Ok(covariance(rotation.to_array(), scale))
}

/// Opacity-weighted Gaussian density `o·exp(-½(x-μ)ᵀΣ⁻¹(x-μ))`.
pub fn contribution_at<R: Real>(s: &Splat<R>, x: V3<R>) -> R {
    let r = quat_to_rot(s.rotation);
    let local = matvec(&transpose(&r), sub3(x, s.center));
    let mut m = R::cst(0.0);
    for k in 0..3 {
        let z = local[k] / s.scale[k];
        m = m + z * z;
    }
    s.opacity * (m * -0.5).exp()
}

pub fn contribution(g: &Gaussian3D, x: [f64; 3]) -> f64 {
    contribution_at(&g.splat(), x)
}

/// Unclamped SH colour, `dir` pointing from the camera to the Gaussian.
pub fn sh_eval<R: Real>(sh: &[V3<R>], dir: V3<R>) -> Result<V3<R>> {
    let mut out = [R::cst(0.5); 3];
    match sh.len() {
        1 | 4 => {}
        n => {
            return Err(Error::Config(format!(
                "unsupported SH coefficient count {n} (degree 0 or 1 expected)"
            )))
        }
    }
    for c in 0..3 {
        out[c] = sh[0][c] * SH_C0 + 0.5;
    }
    if sh.len() == 4 {
        let (x, y, z) = (dir[0], dir[1], dir[2]);
        for c in 0..3 {
            out[c] = out[c] - y * sh[1][c] * SH_C1 + z * sh[2][c] * SH_C1 - x * sh[3][c] * SH_C1;
        }
    }
    Ok(out)
}

/// View-dependent colour clamped to [0, 1].
pub fn sh_to_color<R: Real>(sh: &[V3<R>], dir: V3<R>) -> Result<V3<R>> {
    let c = sh_eval(sh, dir)?;
    Ok([c[0].clamp_c(0.0, 1.0), c[1].clamp_c(0.0, 1.0), c[2].clamp_c(0.0, 1.0)])
}

pub fn sh_coeff_count(degree: usize) -> Result<usize> {
    match degree {
        0 => Ok(1),
        1 => Ok(4),
        d => Err(Error::Config(format!("unsupported SH degree {d}"))),
    }
}

/// DC coefficient producing the given colour.
pub fn rgb_to_sh_dc(rgb: [f64; 3]) -> [f64; 3] {
    [(rgb[0] - 0.5) / SH_C0, (rgb[1] - 0.5) / SH_C0, (rgb[2] - 0.5) / SH_C0]
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single 3D Gaussian.
///
/// Scale is kept in log space and opacity as a logit so that the optimizer
/// and the file formats see the unconstrained values; accessors return the
/// linear scale and the opacity in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub center: [f64; 3],
    pub rotation: Quaternion,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// `(degree+1)²` RGB coefficient triples.
    pub sh: Vec<[f64; 3]>,
    /// Flow confidence per registered view (empty when unused).
    pub confidence: Vec<f64>,
}

impl Gaussian3D {
    pub fn new(center: [f64; 3], rotation: Quaternion, scale: [f64; 3], opacity: f64, rgb: [f64; 3]) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("scale must be positive, got {scale:?}")));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::Domain(format!("opacity {opacity} outside [0, 1]")));
        }
        Ok(Gaussian3D {
            center,
            rotation,
            log_scale: [scale[0].ln(), scale[1].ln(), scale[2].ln()],
            opacity_logit: logit(opacity),
            sh: vec![rgb_to_sh_dc(rgb)],
            confidence: Vec::new(),
        })
    }

    pub fn scale(&self) -> [f64; 3] {
        [self.log_scale[0].exp(), self.log_scale[1].exp(), self.log_scale[2].exp()]
    }

    pub fn set_scale(&mut self, s: [f64; 3]) -> Result<()> {
        if s.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("scale must be positive, got {s:?}")));
        }
        self.log_scale = [s[0].ln(), s[1].ln(), s[2].ln()];
        Ok(())
    }

    pub fn opacity(&self) -> f64 {
        self.opacity_logit.sigmoid()
    }

    pub fn set_opacity(&mut self, o: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&o) {
            return Err(Error::Domain(format!("opacity {o} outside [0, 1]")));
        }
        self.opacity_logit = logit(o);
        Ok(())
    }

    pub fn sh_degree(&self) -> usize {
        if self.sh.len() == 4 {
            1
        } else {
            0
        }
    }

    /// Raises degree 0 to degree 1 with zero higher-order coefficients.
    pub fn with_degree(mut self, degree: usize) -> Result<Self> {
        let n = sh_coeff_count(degree)?;
        self.sh.resize(n, [0.0; 3]);
        Ok(self)
    }

    pub fn covariance(&self) -> [[f64; 3]; 3] {
        covariance(self.rotation.to_array(), self.scale())
    }

    pub fn splat(&self) -> Splat<f64> {
        Splat {
            center: self.center,
            rotation: self.rotation.to_array(),
            scale: self.scale(),
            opacity: self.opacity(),
            sh: self.sh.clone(),
        }
    }
}

/// Ordered collection of Gaussians with a structural generation counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    dynamic_flags: Option<Vec<bool>>,
    generation: u64,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        GaussianCloud {
            gaussians,
            dynamic_flags: None,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn set_generation(&mut self, g: u64) {
        self.generation = g;
    }

    /// Replaces the Gaussians after a structural change (densify/prune).
    pub fn replace(&mut self, gaussians: Vec<Gaussian3D>) {
        self.gaussians = gaussians;
        self.dynamic_flags = None;
        self.generation += 1;
    }

    pub fn dynamic_flags(&self) -> Option<&[bool]> {
        self.dynamic_flags.as_deref()
    }

    pub fn set_dynamic_flags(&mut self, flags: Option<Vec<bool>>) -> Result<()> {
        if let Some(f) = &flags {
            if f.len() != self.len() {
                return Err(Error::Domain(format!(
                    "{} dynamic flags for {} Gaussians",
                    f.len(),
                    self.len()
                )));
            }
        }
        self.dynamic_flags = flags;
        Ok(())
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.gaussians.iter().map(|g| g.center).collect()
    }

    pub fn splats(&self) -> Vec<Splat<f64>> {
        self.gaussians.iter().map(Gaussian3D::splat).collect()
    }

    pub fn sh_degree(&self) -> usize {
        self.gaussians.first().map_or(0, Gaussian3D::sh_degree)
    }

    /// Axis-aligned bounds of the centers.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.gaussians.first()?.center;
        let mut lo = first;
        let mut hi = first;
        for g in &self.gaussians {
            for k in 0..3 {
                lo[k] = lo[k].min(g.center[k]);
                hi[k] = hi[k].max(g.center[k]);
            }
        }
        Some((lo, hi))
    }

    /// Radius of the smallest centroid-centred sphere containing all centers.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.len() as f64;
        let mut c = [0.0; 3];
        for g in &self.gaussians {
            for k in 0..3 {
                c[k] += g.center[k] / n;
            }
        }
        self.gaussians
            .iter()
            .map(|g| crate::math::dist3f(g.center, c))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quaternion {
        Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .unwrap()
    }

    fn to_na(m: [[f64; 3]; 3]) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| m[i][j])
    }

    #[test]
    fn identity_and_axis_aligned_covariance() {
        let c = covariance_from(Quaternion::IDENTITY, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, crate::math::identity3());
        let c = covariance_from(Quaternion::IDENTITY, [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let c = to_na(covariance_from(q, [1.0, 2.0, 3.0]).unwrap());
            assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, want) in ev.iter().zip([1.0, 4.0, 9.0]) {
                assert!((e - want).abs() < 1e-9, "{ev:?}");
            }
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        assert!(covariance_from(Quaternion::IDENTITY, [1.0, 0.0, 1.0]).is_err());
        assert!(covariance_from(Quaternion::IDENTITY, [1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn covariance_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let q0 = random_quat(&mut rng);
            let s = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
            let lhs = to_na(covariance_from(q.mul(q0), s).unwrap());
            let r = to_na(q.to_matrix());
            let rhs = r * to_na(covariance_from(q0, s).unwrap()) * r.transpose();
            assert!((lhs - rhs).abs().max() < 1e-9);
        }
    }

    #[test]
    fn contribution_examples() {
        let g = Gaussian3D::new([0.5, -1.0, 2.0], Quaternion::IDENTITY, [0.3, 0.7, 1.1], 0.8, [0.5; 3]).unwrap();
        assert!((contribution(&g, g.center) - g.opacity()).abs() < 1e-15);
        let x = [g.center[0] + 0.3, g.center[1], g.center[2]];
        assert!((contribution(&g, x) - g.opacity() * (-0.5f64).exp()).abs() < 1e-15);
        let mut z = g.clone();
        z.set_opacity(0.0).unwrap();
        assert_eq!(contribution(&z, [3.0, 1.0, 0.0]), 0.0);
        // long-range extent: tiny but positive
        assert!(contribution(&g, [g.center[0] + 3.0, g.center[1], g.center[2]]) > 0.0);
    }

    #[test]
    fn contribution_decreases_along_rays_and_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let q = random_quat(&mut rng);
            let g = Gaussian3D::new([0.1, 0.2, 0.3], q, [0.5, 1.0, 0.2], 0.6, [0.5; 3]).unwrap();
            let dir = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut prev = contribution(&g, g.center);
            for k in 1..20 {
                let t = k as f64 * 0.1;
                let x = [g.center[0] + t * dir[0], g.center[1] + t * dir[1], g.center[2] + t * dir[2]];
                let c = contribution(&g, x);
                assert!(c < prev);
                prev = c;
            }
            // rigid transform of both
            let rq = random_quat(&mut rng);
            let rm = rq.to_matrix();
            let t = [1.0, -2.0, 0.5];
            let x = [0.4, -0.1, 0.9];
            let tf = |p: [f64; 3]| {
                let r = crate::math::matvec_c(&rm, p);
                [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
            };
            let mut g2 = g.clone();
            g2.center = tf(g.center);
            g2.rotation = rq.mul(g.rotation);
            assert!((contribution(&g, x) - contribution(&g2, tf(x))).abs() < 1e-12);
        }
    }

    #[test]
    fn contribution_integral_matches_normalizer() {
        // midpoint rule over a box of ±6σ_max
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = random_quat(&mut rng);
        let s = [0.3, 0.5, 0.8];
        let g = Gaussian3D::new([0.0; 3], q, s, 0.7, [0.5; 3]).unwrap();
        let half = 6.0 * 0.8;
        let n = 120;
        let h = 2.0 * half / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = [
                        -half + (i as f64 + 0.5) * h,
                        -half + (j as f64 + 0.5) * h,
                        -half + (k as f64 + 0.5) * h,
                    ];
                    acc += contribution(&g, x);
                }
            }
        }
        let est = acc * h * h * h;
        let det_sqrt = s[0] * s[1] * s[2];
        let want = 0.7 * (2.0 * std::f64::consts::PI).powf(1.5) * det_sqrt;
        assert!((est - want).abs() / want < 0.01, "{est} vs {want}");
    }

    #[test]
    fn sh_degree_zero_is_view_independent() {
        let sh = [[0.0; 3]];
        let c = sh_to_color(&sh, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c, [0.5; 3]);
        let sh = [rgb_to_sh_dc([0.2, 0.4, 0.9])];
        let a = sh_to_color(&sh, [1.0, 0.0, 0.0]).unwrap();
        let b = sh_to_color(&sh, [0.0, -1.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert!((a[2] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sh_degree_one_is_odd_about_dc() {
        let sh = [[0.1, -0.2, 0.3], [0.4, 0.1, -0.3], [-0.2, 0.5, 0.2], [0.3, 0.3, -0.1]];
        let d = [0.6f64, -0.48, 0.64];
        let nd = [-d[0], -d[1], -d[2]];
        let a = sh_eval(&sh, d).unwrap();
        let b = sh_eval(&sh, nd).unwrap();
        let dc = sh_eval(&sh[..1], d).unwrap();
        for c in 0..3 {
            assert!(((a[c] + b[c]) * 0.5 - dc[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn sh_degree_one_matches_basis_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let sh: Vec<[f64; 3]> = (0..4)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let mut d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0f64..1.0)];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            d.iter_mut().for_each(|v| *v /= n);
            // real SH basis: Y00 = 1/(2√π), Y1m = √(3/(4π))·{y, z, x} with sign (-,+,-)
            let y00 = 0.5 / std::f64::consts::PI.sqrt();
            let y1 = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
            let basis = [y00, -y1 * d[1], y1 * d[2], -y1 * d[0]];
            let got = sh_to_color(&sh, d).unwrap();
            for c in 0..3 {
                let v: f64 = (0..4).map(|k| basis[k] * sh[k][c]).sum::<f64>() + 0.5;
                assert!((got[c] - v.clamp(0.0, 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsupported_degree_is_config_error() {
        let sh = [[0.0; 3]; 9];
        assert!(matches!(sh_to_color(&sh, [0.0, 0.0, 1.0]), Err(Error::Config(_))));
        assert!(sh_coeff_count(2).is_err());
    }

    #[test]
    fn quaternion_is_normalized() {
        let q = Quaternion::new(2.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(q.to_array(), [1.0, 0.0, 0.0, 0.0]);
        let q = Quaternion::new(1.0, 2.0, -3.0, 0.5).unwrap();
        assert!((q.norm() - 1.0).abs() < 1e-9);
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn dynamic_flags_must_match_length() {
        let g = Gaussian3D::new([0.0; 3], Quaternion::IDENTITY, [1.0; 3], 0.5, [0.5; 3]).unwrap();
        let mut c = GaussianCloud::new(vec![g.clone(), g]);
        assert!(c.set_dynamic_flags(Some(vec![true])).is_err());
        c.set_dynamic_flags(Some(vec![true, false])).unwrap();
        let gen = c.generation();
        let gs = c.gaussians.clone();
        c.replace(gs);
        assert!(c.generation() > gen);
        assert!(c.dynamic_flags().is_none());
    }
}
