//! Canonical-space deformation: a multi-resolution HexPlane feature field
//! with MLP decoders for per-time offsets and instantaneous velocity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{ParamSet, Params, Real, SegId};
use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Splat};
use crate::image::ImageBuf;
use crate::losses::normalized_map;
use crate::math::V3;
use crate::raster::{render_velocity_map, RasterConfig};

/// Axis pairs of the six planes; axis 3 is time.
pub const PLANES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

pub const HEX: &str = "hexplane";
pub const DECODER: &str = "decoder";
pub const VELOCITY: &str = "velocity_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlaneField {
    pub f_dim: usize,
    /// Spatial grid nodes per axis, one entry per level.
    pub resolutions: Vec<usize>,
    /// Time grid nodes (all levels).
    pub time_resolution: usize,
    pub bounds_lo: [f64; 3],
    pub bounds_hi: [f64; 3],
}

impl HexPlaneField {
    pub fn new(f_dim: usize, resolutions: Vec<usize>, time_resolution: usize, lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        if f_dim == 0 || resolutions.is_empty() {
            return Err(Error::Config("feature field needs f_dim >= 1 and one level".into()));
        }
        if resolutions.iter().any(|&r| r < 2) || time_resolution < 2 {
            return Err(Error::Config("grid resolutions must be at least 2".into()));
        }
        if (0..3).any(|k| !(hi[k] > lo[k])) {
            return Err(Error::Config(format!("empty field bounds {lo:?}..{hi:?}")));
        }
        Ok(HexPlaneField {
            f_dim,
            resolutions,
            time_resolution,
            bounds_lo: lo,
            bounds_hi: hi,
        })
    }

    fn axis_res(&self, level: usize, axis: usize) -> usize {
        if axis == 3 {
            self.time_resolution
        } else {
            self.resolutions[level]
        }
    }

    /// Offset of plane `p` of `level` in the flat feature vector.
    fn plane_offset(&self, level: usize, p: usize) -> usize {
        let mut off = 0;
        for l in 0..=level {
            for (q, &(a, b)) in PLANES.iter().enumerate() {
                if l == level && q == p {
                    return off;
                }
                off += self.axis_res(l, a) * self.axis_res(l, b) * self.f_dim;
            }
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        (0..self.resolutions.len())
            .map(|l| PLANES.iter().map(|&(a, b)| self.axis_res(l, a) * self.axis_res(l, b)).sum::<usize>())
            .sum::<usize>()
            * self.f_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.f_dim * self.resolutions.len()
    }

    /// Spatial planes uniform in [0.1, 0.5], time planes at 1.
    pub fn init_features<G: Rng>(&self, rng: &mut G) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.resolutions.len() {
            for &(a, b) in PLANES.iter() {
                let n = self.axis_res(l, a) * self.axis_res(l, b) * self.f_dim;
                if b == 3 {
                    out.extend(std::iter::repeat_n(1.0, n));
                } else {
                    out.extend((0..n).map(|_| rng.random_range(0.1..0.5)));
                }
            }
        }
        out
    }

    /// Normalized grid coordinate along `axis`, clamped to the bounds.
    fn grid_coord<R: Real>(&self, v: R, axis: usize, res: usize) -> R {
        let n = if axis == 3 {
            v
        } else {
            (v - self.bounds_lo[axis]) / (self.bounds_hi[axis] - self.bounds_lo[axis])
        };
        n.clamp_c(0.0, 1.0) * (res - 1) as f64
    }

    /// Fused feature at `(x, t)`: per level, bilinear samples of the six
    /// planes multiplied elementwise; levels concatenated. `t` in [0, 1].
    pub fn query<R: Real>(&self, feats: &[R], x: V3<R>, t: f64) -> Vec<R> {
        let coords = [x[0], x[1], x[2], R::cst(t)];
        let mut out = Vec::with_capacity(self.feature_dim());
        for l in 0..self.resolutions.len() {
            let mut fused: Vec<R> = Vec::new();
            for (p, &(a, b)) in PLANES.iter().enumerate() {
                let (ra, rb) = (self.axis_res(l, a), self.axis_res(l, b));
                let ga = self.grid_coord(coords[a], a, ra);
                let gb = self.grid_coord(coords[b], b, rb);
                let ia = (ga.val().floor() as usize).min(ra - 2);
                let ib = (gb.val().floor() as usize).min(rb - 2);
                let fa = ga - ia as f64;
                let fb = gb - ib as f64;
                let one = R::cst(1.0);
                let w = [(one - fa) * (one - fb), (one - fa) * fb, fa * (one - fb), fa * fb];
                let base = self.plane_offset(l, p);
                let node = |i: usize, j: usize| base + (i * rb + j) * self.f_dim;
                let n = [node(ia, ib), node(ia, ib + 1), node(ia + 1, ib), node(ia + 1, ib + 1)];
                for c in 0..self.f_dim {
                    let f = [feats[n[0] + c], feats[n[1] + c], feats[n[2] + c], feats[n[3] + c]];
                    let s = R::affine(R::cst(0.0), &w, &f);
                    if p == 0 {
                        fused.push(s);
                    } else {
                        fused[c] = fused[c] * s;
                    }
                }
            }
            out.extend(fused);
        }
        out
    }
}

/// Fully connected network with ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp { sizes })
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    /// Glorot-uniform hidden layers, zero output layer.
    pub fn init<G: Rng>(&self, rng: &mut G) -> Vec<f64> {
        let last = self.sizes.len() - 2;
        let mut out = Vec::with_capacity(self.param_count());
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            if l == last {
                out.extend(std::iter::repeat_n(0.0, i * o + o));
            } else {
                let a = (6.0 / (i + o) as f64).sqrt();
                out.extend((0..i * o).map(|_| rng.random_range(-a..a)));
                out.extend(std::iter::repeat_n(0.0, o));
            }
        }
        out
    }

    pub fn forward<R: Real>(&self, w: &[R], x: &[R]) -> Vec<R> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut h = x.to_vec();
        let mut off = 0;
        let layers = self.sizes.len() - 1;
        for (l, s) in self.sizes.windows(2).enumerate() {
            let (i, o) = (s[0], s[1]);
            let bias = off + i * o;
            let mut next = Vec::with_capacity(o);
            for r in 0..o {
                let v = R::affine(w[bias + r], &w[off + r * i..off + (r + 1) * i], &h);
                next.push(if l + 1 < layers { v.relu() } else { v });
            }
            off = bias + o;
            h = next;
        }
        h
    }
}

/// Applies decoded offsets `[Δμ(3), Δq(4), Δs(3)]` to a canonical splat.
/// The rotation is left unnormalized; consumers normalize.
pub fn deform_splat<R: Real>(g: &Splat<R>, d: &[R]) -> Splat<R> {
    Splat {
        center: [g.center[0] + d[0], g.center[1] + d[1], g.center[2] + d[2]],
        rotation: [g.rotation[0] + d[3], g.rotation[1] + d[4], g.rotation[2] + d[5], g.rotation[3] + d[6]],
        scale: [g.scale[0] * d[7].exp(), g.scale[1] * d[8].exp(), g.scale[2] * d[9].exp()],
        opacity: g.opacity,
        sh: g.sh.clone(),
    }
}

/// Field plus deformation decoder and velocity head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformModel {
    pub field: HexPlaneField,
    pub decoder: Mlp,
    pub velocity: Mlp,
    /// Normalized time step between consecutive frames.
    pub dt: f64,
}

/// Segment handles of a registered [`DeformModel`].
#[derive(Clone, Copy, Debug)]
pub struct DeformSegs {
    pub hex: SegId,
    pub decoder: SegId,
    pub velocity: SegId,
}

impl DeformModel {
    /// Default desk-scale model: 8 features, levels 16 and 32, width 64.
    pub fn new(frames: usize, lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        Self::with_sizes(frames, lo, hi, 8, vec![16, 32], 64)
    }

    pub fn with_sizes(frames: usize, lo: [f64; 3], hi: [f64; 3], f_dim: usize, res: Vec<usize>, width: usize) -> Result<Self> {
        if frames < 2 {
            return Err(Error::Config("deformation needs at least two frames".into()));
        }
        let field = HexPlaneField::new(f_dim, res, frames.max(2), lo, hi)?;
        let g = field.feature_dim();
        Ok(DeformModel {
            decoder: Mlp::new(vec![g, width, width, 10])?,
            velocity: Mlp::new(vec![3 * g, width, width, 3])?,
            field,
            dt: 1.0 / (frames - 1) as f64,
        })
    }

    pub fn register<G: Rng>(&self, ps: &mut ParamSet, rng: &mut G) -> DeformSegs {
        DeformSegs {
            hex: ps.add(HEX, &self.field.init_features(rng)),
            decoder: ps.add(DECODER, &self.decoder.init(rng)),
            velocity: ps.add(VELOCITY, &self.velocity.init(rng)),
        }
    }

    /// Normalized time of frame `t`.
    pub fn time_of(&self, frame: usize) -> f64 {
        (frame as f64 * self.dt).min(1.0)
    }

    /// Canonical splats deformed to time `t`.
    pub fn deformed<R: Real>(&self, p: &Params<'_, R>, segs: &DeformSegs, canon: &[Splat<R>], t: f64) -> Vec<Splat<R>> {
        let (hex, dec) = (p.seg(segs.hex), p.seg(segs.decoder));
        canon
            .iter()
            .map(|g| {
                let f = self.field.query(hex, g.center, t);
                let d = self.decoder.forward(dec, &f);
                deform_splat(g, &d)
            })
            .collect()
    }

    /// Instantaneous velocity at canonical position `x` and time `t`.
    pub fn velocity_at<R: Real>(&self, p: &Params<'_, R>, segs: &DeformSegs, x: V3<R>, t: f64) -> V3<R> {
        let w = p.seg(segs.velocity);
        velocity_with(&self.field, p.seg(segs.hex), x, t, self.dt, |g| {
            let v = self.velocity.forward(w, g);
            [v[0], v[1], v[2]]
        })
    }
}

/// Evaluates `head(g_t, g_{t-Δt}, g_{t+Δt})`; a neighbour outside [0, 1]
/// is replaced by `g_t`.
pub fn velocity_with<R: Real, H: Fn(&[R]) -> V3<R>>(
    field: &HexPlaneField,
    feats: &[R],
    x: V3<R>,
    t: f64,
    dt: f64,
    head: H,
) -> V3<R> {
    let g = field.query(feats, x, t);
    let tol = 1e-12;
    let before = if t - dt < -tol { g.clone() } else { field.query(feats, x, (t - dt).max(0.0)) };
    let after = if t + dt > 1.0 + tol { g.clone() } else { field.query(feats, x, (t + dt).min(1.0)) };
    let mut input = g;
    input.extend(before);
    input.extend(after);
    head(&input)
}

/// Dynamic map from learned velocities: the per-Gaussian image-space
/// displacement `‖project(μ + vΔt) - project(μ)‖` under one camera,
/// composited and normalized by `max(max value, floor)`.
pub fn refined_dynamic_map(
    cloud: &GaussianCloud,
    cam: &PinholeCamera,
    velocities: &[[f64; 3]],
    dt: f64,
    floor: f64,
    cfg: &RasterConfig,
) -> Result<ImageBuf> {
    if velocities.len() != cloud.len() {
        return Err(Error::Domain(format!(
            "{} velocities for {} Gaussians",
            velocities.len(),
            cloud.len()
        )));
    }
    let mags: Vec<f64> = cloud
        .gaussians
        .iter()
        .zip(velocities)
        .map(|(g, v)| {
            let m = g.center;
            let moved = [m[0] + v[0] * dt, m[1] + v[1] * dt, m[2] + v[2] * dt];
            match (cam.project(m), cam.project(moved)) {
                (Ok(a), Ok(b)) => (b.uv[0] - a.uv[0]).hypot(b.uv[1] - a.uv[1]),
                _ => 0.0,
            }
        })
        .collect();
    let img = render_velocity_map(cloud, cam, &mags, cfg)?;
    Ok(normalized_map(cam.width, cam.height, img.data, floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{grad_check, GradCheckOptions, Objective, Tape};
    use crate::camera::RigidTransform;
    use crate::gaussian::{Gaussian3D, Quaternion};
    use crate::raster::{render, render_splats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field() -> HexPlaneField {
        HexPlaneField::new(3, vec![4, 6], 5, [-1.0, -1.0, 0.0], [1.0, 1.0, 2.0]).unwrap()
    }

    /// Independent bilinear evaluation straight from the storage layout.
    fn oracle(f: &HexPlaneField, feats: &[f64], x: [f64; 3], t: f64) -> Vec<f64> {
        let mut out = vec![];
        let mut off = 0;
        for l in 0..f.resolutions.len() {
            let mut fused = vec![1.0; f.f_dim];
            for &(a, b) in PLANES.iter() {
                let res = |ax: usize| if ax == 3 { f.time_resolution } else { f.resolutions[l] };
                let coord = |ax: usize| {
                    let n = if ax == 3 { t } else { (x[ax] - f.bounds_lo[ax]) / (f.bounds_hi[ax] - f.bounds_lo[ax]) };
                    n.clamp(0.0, 1.0) * (res(ax) - 1) as f64
                };
                let (ra, rb) = (res(a), res(b));
                let (ca, cb) = (coord(a), coord(b));
                for c in 0..f.f_dim {
                    let at = |i: usize, j: usize| feats[off + (i * rb + j) * f.f_dim + c];
                    let mut s = 0.0;
                    for i in 0..ra {
                        for j in 0..rb {
                            let wa = (1.0 - (ca - i as f64).abs()).max(0.0);
                            let wb = (1.0 - (cb - j as f64).abs()).max(0.0);
                            s += wa * wb * at(i, j);
                        }
                    }
                    fused[c] *= s;
                }
                off += ra * rb * f.f_dim;
            }
            out.extend(fused);
        }
        out
    }

    #[test]
    fn query_matches_bilinear_oracle() {
        let f = field();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<f64> = (0..f.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..50 {
            let x = [rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3), rng.random_range(-0.2..2.2)];
            let t = rng.random_range(0.0..1.0);
            let got = f.query(&feats, x, t);
            let want = oracle(&f, &feats, x, t);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn query_at_node_and_constant_planes() {
        let f = field();
        let ones = vec![1.0; f.param_count()];
        assert_eq!(f.query(&ones, [0.3, -0.2, 1.1], 0.4), vec![1.0; f.feature_dim()]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<f64> = (0..f.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // level 0 has 4 nodes per spatial axis, 5 in time: node (1, 2, 3, t=2)
        let x = [-1.0 + 2.0 / 3.0, -1.0 + 4.0 / 3.0, 2.0];
        let g = f.query(&feats, x, 0.5);
        let node = [1usize, 2, 3, 2];
        for c in 0..f.f_dim {
            let mut want = 1.0;
            for (p, &(a, b)) in PLANES.iter().enumerate() {
                let rb = if b == 3 { 5 } else { 4 };
                want *= feats[f.plane_offset(0, p) + (node[a] * rb + node[b]) * f.f_dim + c];
            }
            assert!((g[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn query_is_lipschitz_along_a_sweep() {
        let f = field();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<f64> = (0..f.param_count()).map(|_| rng.random_range(0.0..1.0)).collect();
        // each plane factor changes by at most (max node diff)·(grid step per unit), products of
        // factors bounded by 1 change by at most the sum of factor changes
        let max_diff = 1.0;
        let step = 1e-3;
        let mut prev = f.query(&feats, [-1.0, 0.0, 1.0], 0.3);
        for i in 1..2000 {
            let x = [-1.0 + i as f64 * step, 0.0, 1.0];
            let g = f.query(&feats, x, 0.3);
            for l in 0..2 {
                let cells = (f.resolutions[l] - 1) as f64 / 2.0;
                let bound = 6.0 * max_diff * cells * step + 1e-12;
                for c in 0..f.f_dim {
                    let k = l * f.f_dim + c;
                    assert!((g[k] - prev[k]).abs() <= bound);
                }
            }
            prev = g;
        }
    }

    fn model() -> (DeformModel, ParamSet, DeformSegs) {
        let m = DeformModel::with_sizes(5, [-1.0; 3], [1.0, 1.0, 3.0], 4, vec![4, 6], 16).unwrap();
        let mut ps = ParamSet::new();
        let segs = m.register(&mut ps, &mut ChaCha8Rng::seed_from_u64(4));
        (m, ps, segs)
    }

    fn cloud() -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        GaussianCloud::new(
            (0..6)
                .map(|_| {
                    Gaussian3D::new(
                        [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(1.5..2.5)],
                        Quaternion::from_axis_angle([1.0, 2.0, 0.5], rng.random_range(0.0..3.0)).unwrap(),
                        [rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random_range(0.05..0.2)],
                        rng.random_range(0.3..0.9),
                        [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    fn cam() -> PinholeCamera {
        PinholeCamera::centered(20.0, 16, 16, RigidTransform::IDENTITY).unwrap()
    }

    #[test]
    fn zero_init_is_identity_and_renders_bitwise_equal() {
        let (m, ps, segs) = model();
        let c = cloud();
        let canon = c.splats();
        let p = ps.plain();
        for frame in 0..5 {
            let d = m.deformed(&p, &segs, &canon, m.time_of(frame));
            let (img, _) = render_splats(&d, &cam(), [0.1; 3], &RasterConfig::default()).unwrap();
            let base = render(&c, &cam(), [0.1; 3], &RasterConfig::default()).unwrap();
            assert_eq!(img, base.color.data);
            let v = m.velocity_at(&p, &segs, canon[0].center, m.time_of(frame));
            assert_eq!(v, [0.0; 3]);
        }
    }

    #[test]
    fn stubbed_offsets_shift_center() {
        let c = cloud();
        let g = &c.splats()[0];
        let mut d = vec![0.0; 10];
        d[0] = 1.0;
        let s = deform_splat(g, &d);
        assert_eq!(s.center, [g.center[0] + 1.0, g.center[1], g.center[2]]);
        assert_eq!(s.scale, g.scale);
        assert_eq!(s.rotation, g.rotation);
    }

    #[test]
    fn velocity_boundary_rule_and_stub_head() {
        let (m, ps, segs) = model();
        let feats = ps.get(segs.hex);
        let x = [0.1, -0.2, 1.9];
        let head = |g: &[f64]| [g[0], g[1], g[2]];
        let v = velocity_with(&m.field, feats, x, 0.5, m.dt, head);
        let g = m.field.query(feats, x, 0.5);
        assert_eq!(v, [g[0], g[1], g[2]]);
        // boundary: t = 0 sees g_t in place of g_{t-Δt}
        let probe = |g: &[f64]| [g[m.field.feature_dim()], g[2 * m.field.feature_dim()], 0.0];
        let v0 = velocity_with(&m.field, feats, x, 0.0, m.dt, probe);
        let g0 = m.field.query(feats, x, 0.0);
        let g1 = m.field.query(feats, x, m.dt);
        assert_eq!(v0, [g0[0], g1[0], 0.0]);
        let v1 = velocity_with(&m.field, feats, x, 1.0, m.dt, probe);
        let gl = m.field.query(feats, x, 1.0);
        let gp = m.field.query(feats, x, 1.0 - m.dt);
        assert_eq!(v1, [gp[0], gl[0], 0.0]);
    }

    struct RenderThroughField {
        m: DeformModel,
        segs: DeformSegs,
        canon: GaussianCloud,
        target: Vec<f64>,
    }

    impl Objective for RenderThroughField {
        fn eval<R: Real>(&self, p: &Params<'_, R>) -> Result<R> {
            let canon: Vec<Splat<R>> = self
                .canon
                .splats()
                .iter()
                .map(|s| Splat {
                    center: s.center.map(R::cst),
                    rotation: s.rotation.map(R::cst),
                    scale: s.scale.map(R::cst),
                    opacity: R::cst(s.opacity),
                    sh: s.sh.iter().map(|c| c.map(R::cst)).collect(),
                })
                .collect();
            let d = self.m.deformed(p, &self.segs, &canon, 0.4);
            let (img, _) = render_splats(&d, &cam(), [0.0; 3], &RasterConfig::exact())?;
            let v = self.m.velocity_at(p, &self.segs, canon[0].center, 0.4);
            let mut acc = v[0] * v[0] + v[1] * v[2];
            for (a, b) in img.iter().zip(&self.target) {
                acc = acc + (*a - *b) * (*a - *b);
            }
            Ok(acc)
        }
    }

    #[test]
    fn gradients_reach_field_and_heads() {
        let (m, mut ps, segs) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // non-zero output layers so every segment is exercised
        for id in [segs.decoder, segs.velocity] {
            for v in ps.get_mut(id).iter_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.05..0.05);
                }
            }
        }
        // target near the current render keeps the loss small next to its gradients
        let mut obj = RenderThroughField {
            m,
            segs,
            canon: cloud(),
            target: vec![],
        };
        let (base, _) = render_splats(&obj.canon.splats(), &cam(), [0.0; 3], &RasterConfig::exact()).unwrap();
        obj.target = base.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        let opts = GradCheckOptions {
            max_per_segment: Some(60),
            ..Default::default()
        };
        let r = grad_check(&obj, &ps, &opts).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn velocity_gradient_reaches_neighbouring_times() {
        let (m, mut ps, segs) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in ps.get_mut(segs.velocity).iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let x = [0.0, 0.0, 1.0].map(Var::constant);
        // frame 2 of 5: time nodes 1 and 3 are only reachable via g_{t±Δt}
        let v = m.velocity_at(&p, &segs, x, m.time_of(2));
        let loss = v[0] + v[1] + v[2];
        let g = crate::ad::backward(loss, &p, &tape).unwrap();
        let hex = g.get(segs.hex);
        let f = &m.field;
        let (ra, rb) = (f.resolutions[0], f.time_resolution);
        // plane (x, t) of level 0
        let base = f.plane_offset(0, 3);
        let time_col = |tn: usize| (0..ra).flat_map(move |i| (0..f.f_dim).map(move |c| base + (i * rb + tn) * f.f_dim + c));
        assert!(time_col(1).any(|k| hex[k] != 0.0));
        assert!(time_col(3).any(|k| hex[k] != 0.0));
        assert!(time_col(0).all(|k| hex[k] == 0.0));
    }

    use crate::ad::Var;

    #[test]
    fn refined_map_examples() {
        let c = cloud();
        let cm = cam();
        let zero = vec![[0.0; 3]; c.len()];
        let d = refined_dynamic_map(&c, &cm, &zero, 0.25, 0.5, &RasterConfig::default()).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
        let mut v = zero.clone();
        v[0] = [1.0, 0.0, 0.0];
        let d = refined_dynamic_map(&c, &cm, &v, 0.25, 0.5, &RasterConfig::default()).unwrap();
        let peak = d.data.iter().copied().fold(0.0, f64::max);
        assert!(peak > 0.5 && peak <= 1.0);
        assert!(refined_dynamic_map(&c, &cm, &v[..2], 0.25, 0.5, &RasterConfig::default()).is_err());
    }
}
