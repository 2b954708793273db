//! Synthetic dynamic scenes with analytic motion, rendered observations and
//! a dominant-contributor flow oracle.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{flow_between, PinholeCamera, RigidTransform};
use crate::correspondence::{csv_err, FlowField2D};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianCloud, Quaternion};
use crate::image::ImageBuf;
use crate::io::{atomic_write, read_flo, read_png, write_depth, write_flo, write_png};
use crate::raster::{render, RasterConfig};

pub const MIN_BLOB: usize = 5;
pub const MAX_BLOB: usize = 30;
/// Pixels whose GT alpha is below this carry no oracle flow.
pub const FLOW_ALPHA_FLOOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub background: [f64; 3],
    pub rig: RigSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub backdrop: Option<BackdropSpec>,
    #[serde(default)]
    pub blobs: Vec<BlobSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RigSpec {
    /// `views` fixed cameras spread over `span_degrees` of a circle.
    Ring {
        views: usize,
        radius: f64,
        focal: f64,
        #[serde(default = "full_circle")]
        span_degrees: f64,
        #[serde(default)]
        elevation: f64,
    },
    /// One camera sweeping `arc_degrees` over the sequence.
    MonocularArc {
        radius: f64,
        focal: f64,
        arc_degrees: f64,
        #[serde(default)]
        elevation: f64,
    },
}

fn full_circle() -> f64 {
    360.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
}

/// Static wall of Gaussians on the plane `z = depth` with a two-colour
/// checker pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdropSpec {
    pub depth: f64,
    pub extent: [f64; 2],
    pub cells: [usize; 2],
    pub colors: [[f64; 3]; 2],
    #[serde(default = "opaque")]
    pub opacity: f64,
}

fn opaque() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobShape {
    /// Centers uniform in a ball.
    Ball,
    /// Centers on a jittered grid in the plane `z = center.z`.
    Sheet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub count: usize,
    pub radius: f64,
    pub scale: f64,
    pub color: [f64; 3],
    #[serde(default = "opaque")]
    pub opacity: f64,
    #[serde(default = "ball")]
    pub shape: BlobShape,
    #[serde(default)]
    pub motion: Motion,
}

fn ball() -> BlobShape {
    BlobShape::Ball
}

/// Rigid motion program of a blob, in world units per frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    #[default]
    Static,
    Linear { velocity: [f64; 3] },
    /// Rotation about `axis` through `pivot` by `rate` radians per frame.
    Orbit { pivot: [f64; 3], axis: [f64; 3], rate: f64 },
    /// Piecewise-linear offsets of the blob, keyframes spread evenly over
    /// the sequence.
    Waypoints { points: Vec<[f64; 3]> },
}

impl Motion {
    /// Rotation and translation taking frame-0 positions to frame `t`
    /// (`t` measured in frames, `total` frames overall).
    fn pose(&self, t: usize, total: usize) -> Result<([[f64; 3]; 3], [f64; 3], Quaternion)> {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let tf = t as f64;
        Ok(match self {
            Motion::Static => (eye, [0.0; 3], Quaternion::IDENTITY),
            Motion::Linear { velocity } => (eye, velocity.map(|v| v * tf), Quaternion::IDENTITY),
            Motion::Orbit { pivot, axis, rate } => {
                let q = Quaternion::from_axis_angle(*axis, rate * tf)?;
                let r = q.to_matrix();
                let rp = mat_vec(&r, *pivot);
                (r, [pivot[0] - rp[0], pivot[1] - rp[1], pivot[2] - rp[2]], q)
            }
            Motion::Waypoints { points } => {
                let s = if total > 1 { tf / (total - 1) as f64 * (points.len() - 1) as f64 } else { 0.0 };
                let k = (s.floor() as usize).min(points.len() - 1);
                let f = s - k as f64;
                let a = points[k];
                let b = points[(k + 1).min(points.len() - 1)];
                let d = [0, 1, 2].map(|i| a[i] + f * (b[i] - a[i]) - points[0][i]);
                (eye, d, Quaternion::IDENTITY)
            }
        })
    }

    pub fn is_static(&self) -> bool {
        match self {
            Motion::Static => true,
            Motion::Linear { velocity } => velocity.iter().all(|&v| v == 0.0),
            Motion::Orbit { rate, .. } => *rate == 0.0,
            Motion::Waypoints { points } => points.iter().all(|p| *p == points[0]),
        }
    }
}

fn mat_vec(m: &[[f64; 3]; 3], x: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * x[0] + m[i][1] * x[1] + m[i][2] * x[2])
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("scene spec: {e}")))
    }

    pub fn views(&self) -> usize {
        match self.rig {
            RigSpec::Ring { views, .. } => views,
            RigSpec::MonocularArc { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if self.views() == 0 {
            return bad("rig needs at least one view".into());
        }
        let (radius, focal) = match self.rig {
            RigSpec::Ring { radius, focal, .. } | RigSpec::MonocularArc { radius, focal, .. } => (radius, focal),
        };
        if !(radius > 0.0 && focal > 0.0) {
            return bad("rig radius and focal must be positive".into());
        }
        if !(self.noise.sigma >= 0.0) || !(0.0..=1.0).contains(&self.noise.outlier_fraction) {
            return bad("noise sigma must be >= 0 and outlier_fraction in [0, 1]".into());
        }
        if self.blobs.is_empty() && self.backdrop.is_none() {
            return bad("scene has no Gaussians".into());
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if !(MIN_BLOB..=MAX_BLOB).contains(&b.count) {
                return bad(format!("blob {i}: count {} outside [{MIN_BLOB}, {MAX_BLOB}]", b.count));
            }
            if !(b.radius >= 0.0 && b.scale > 0.0 && (0.0..=1.0).contains(&b.opacity)) {
                return bad(format!("blob {i}: bad radius, scale or opacity"));
            }
            if let Motion::Waypoints { points } = &b.motion {
                if points.is_empty() {
                    return bad(format!("blob {i}: waypoints need at least one point"));
                }
            }
            if let Motion::Orbit { axis, .. } = &b.motion {
                if axis.iter().all(|&a| a == 0.0) {
                    return bad(format!("blob {i}: zero orbit axis"));
                }
            }
        }
        if let Some(w) = &self.backdrop {
            if w.cells[0] == 0 || w.cells[1] == 0 || !(w.extent[0] > 0.0 && w.extent[1] > 0.0) {
                return bad("backdrop needs positive extent and cells".into());
            }
        }
        Ok(())
    }

    fn angle(&self, t: f64, view: f64) -> (f64, f64, f64, f64) {
        match self.rig {
            RigSpec::Ring {
                views,
                radius,
                focal,
                span_degrees,
                elevation,
            } => {
                let a = if span_degrees >= 360.0 {
                    360.0 * view / views as f64
                } else if views == 1 {
                    0.0
                } else {
                    -0.5 * span_degrees + span_degrees * view / (views - 1) as f64
                };
                (a, radius, focal, elevation)
            }
            RigSpec::MonocularArc {
                radius,
                focal,
                arc_degrees,
                elevation,
            } => {
                let a = -0.5 * arc_degrees + arc_degrees * t / (self.frames - 1) as f64;
                (a, radius, focal, elevation)
            }
        }
    }

    fn camera_at(&self, (angle, radius, focal, elevation): (f64, f64, f64, f64)) -> Result<PinholeCamera> {
        let th = angle.to_radians();
        let eye = [radius * th.sin(), -elevation, -radius * th.cos()];
        let pose = RigidTransform::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0])?;
        PinholeCamera::centered(focal, self.width, self.height, pose)
    }

    /// Camera of `view` at frame `t`.
    pub fn camera(&self, t: usize, view: usize) -> Result<PinholeCamera> {
        self.camera_at(self.angle(t as f64, view as f64))
    }

    /// A camera never used for training at frame `t`: half a frame step
    /// further along the arc, or halfway between ring views 0 and 1.
    pub fn held_out_camera(&self, t: usize) -> Result<PinholeCamera> {
        let (tt, v) = match self.rig {
            RigSpec::MonocularArc { .. } => (t as f64 + 0.5, 0.0),
            RigSpec::Ring { .. } => (t as f64, 0.5),
        };
        self.camera_at(self.angle(tt, v))
    }
}

/// Everything the generator knows about a scene.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub spec: SceneSpec,
    pub seed: u64,
    /// GT cloud per frame; Gaussian `i` is the same physical Gaussian in
    /// every state.
    pub states: Vec<GaussianCloud>,
    pub dynamic: Vec<bool>,
    /// Blob index per Gaussian (`None` for the backdrop).
    pub blob: Vec<Option<usize>>,
    /// `[t][view]`.
    pub cameras: Vec<Vec<PinholeCamera>>,
    pub images: Vec<Vec<ImageBuf>>,
    pub depths: Vec<Vec<ImageBuf>>,
    pub alphas: Vec<Vec<ImageBuf>>,
    /// `[t][view]` for `t < T-1`: forward flow t → t+1 on frame t's pixels,
    /// after the scene's `noise` settings.
    pub flows: Vec<Vec<FlowField2D>>,
    /// Same, before noise.
    pub clean_flows: Vec<Vec<FlowField2D>>,
}

impl GroundTruth {
    pub fn frames(&self) -> usize {
        self.states.len()
    }

    pub fn views(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.len())
    }

    pub fn trajectories(&self) -> Vec<Vec<[f64; 3]>> {
        self.states.iter().map(|s| s.centers()).collect()
    }

    /// Observations as a trainer sees them.
    pub fn dataset(&self) -> Dataset {
        Dataset {
            background: self.spec.background,
            cameras: self.cameras.clone(),
            images: self.images.clone(),
            flows: self.flows.iter().map(|f| f.iter().cloned().map(Some).collect()).collect(),
        }
    }

    /// GT image of frame `t` from [`SceneSpec::held_out_camera`].
    pub fn held_out(&self, t: usize) -> Result<(PinholeCamera, ImageBuf)> {
        let cam = self.spec.held_out_camera(t)?;
        let out = render(&self.states[t], &cam, self.spec.background, &raster_config())?;
        Ok((cam, out.color))
    }

    /// GT motion footprint of frame `t` in `view`: pixels where the
    /// dynamic Gaussians alone reach alpha 0.5.
    pub fn motion_footprint(&self, t: usize, view: usize) -> Result<Vec<bool>> {
        let gs = self.states[t]
            .gaussians
            .iter()
            .zip(&self.dynamic)
            .filter(|(_, &d)| d)
            .map(|(g, _)| g.clone())
            .collect();
        let out = render(&GaussianCloud::new(gs), &self.cameras[t][view], [0.0; 3], &raster_config())?;
        Ok(out.alpha.data.iter().map(|&a| a >= FLOW_ALPHA_FLOOR).collect())
    }
}

/// Renderer settings used for every GT observation.
pub fn raster_config() -> RasterConfig {
    RasterConfig::default()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Result<Quaternion> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng))
}

fn jitter_color(rng: &mut ChaCha8Rng, c: [f64; 3]) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
}

fn blob_gaussians(rng: &mut ChaCha8Rng, b: &BlobSpec) -> Result<Vec<Gaussian3D>> {
    let mut out = Vec::with_capacity(b.count);
    let side = (b.count as f64).sqrt().ceil() as usize;
    for k in 0..b.count {
        let offset = match b.shape {
            BlobShape::Ball => loop {
                let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
                    break p.map(|v| v * b.radius);
                }
            },
            BlobShape::Sheet => {
                let (i, j) = (k % side, k / side);
                let cell = 2.0 * b.radius / side as f64;
                [
                    -b.radius + (i as f64 + 0.5 + rng.random_range(-0.2..0.2)) * cell,
                    -b.radius + (j as f64 + 0.5 + rng.random_range(-0.2..0.2)) * cell,
                    0.0,
                ]
            }
        };
        let center = [0, 1, 2].map(|i| b.center[i] + offset[i]);
        let (rot, scale) = match b.shape {
            BlobShape::Ball => (random_rotation(rng)?, [0; 3].map(|_| b.scale * rng.random_range(0.8..1.2))),
            BlobShape::Sheet => (Quaternion::IDENTITY, [b.scale, b.scale, 0.3 * b.scale]),
        };
        out.push(Gaussian3D::new(center, rot, scale, b.opacity, jitter_color(rng, b.color))?);
    }
    Ok(out)
}

fn backdrop_gaussians(w: &BackdropSpec) -> Result<Vec<Gaussian3D>> {
    let [nx, ny] = w.cells;
    let (cx, cy) = (w.extent[0] / nx as f64, w.extent[1] / ny as f64);
    let s = 0.6 * cx.max(cy);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let center = [
                -0.5 * w.extent[0] + (i as f64 + 0.5) * cx,
                -0.5 * w.extent[1] + (j as f64 + 0.5) * cy,
                w.depth,
            ];
            let color = w.colors[(i + j) % 2];
            out.push(Gaussian3D::new(center, Quaternion::IDENTITY, [s, s, 0.2 * s], w.opacity, color)?);
        }
    }
    Ok(out)
}

/// Generates the full ground truth of `spec`. The same seed gives
/// bit-identical output.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = Vec::new();
    let mut blob = Vec::new();
    if let Some(w) = &spec.backdrop {
        let gs = backdrop_gaussians(w)?;
        blob.extend(std::iter::repeat_n(None, gs.len()));
        base.extend(gs);
    }
    for (bi, b) in spec.blobs.iter().enumerate() {
        let gs = blob_gaussians(&mut rng, b)?;
        blob.extend(std::iter::repeat_n(Some(bi), gs.len()));
        base.extend(gs);
    }
    let t_count = spec.frames;
    let mut states = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let poses: Vec<_> = spec
            .blobs
            .iter()
            .map(|b| b.motion.pose(t, t_count))
            .collect::<Result<_>>()?;
        let gs = base
            .iter()
            .zip(&blob)
            .map(|(g, owner)| {
                let mut g = g.clone();
                if let Some(bi) = owner {
                    let (r, d, q) = &poses[*bi];
                    let x = mat_vec(r, g.center);
                    g.center = [x[0] + d[0], x[1] + d[1], x[2] + d[2]];
                    if *q != Quaternion::IDENTITY {
                        g.rotation = q.mul(g.rotation);
                    }
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        states.push(GaussianCloud::new(gs));
    }
    let dynamic: Vec<bool> = blob
        .iter()
        .map(|o| o.is_some_and(|bi| !spec.blobs[bi].motion.is_static()))
        .collect();

    let cfg = raster_config();
    let views = spec.views();
    let mut cameras = Vec::with_capacity(t_count);
    let (mut images, mut depths, mut alphas, mut contribs) = (vec![], vec![], vec![], vec![]);
    for (t, state) in states.iter().enumerate() {
        let cams: Vec<PinholeCamera> = (0..views).map(|v| spec.camera(t, v)).collect::<Result<_>>()?;
        let (mut im, mut de, mut al, mut co) = (vec![], vec![], vec![], vec![]);
        for cam in &cams {
            let out = render(state, cam, spec.background, &cfg)?;
            im.push(out.color);
            de.push(out.depth);
            al.push(out.alpha);
            co.push(out.contributors);
        }
        cameras.push(cams);
        images.push(im);
        depths.push(de);
        alphas.push(al);
        contribs.push(co);
    }

    let mut clean_flows = Vec::with_capacity(t_count - 1);
    let mut flows = Vec::with_capacity(t_count - 1);
    for t in 0..t_count - 1 {
        let (mut cl, mut no) = (vec![], vec![]);
        for v in 0..views {
            let f = oracle_flow(
                &states[t],
                &states[t + 1],
                &cameras[t][v],
                &cameras[t + 1][v],
                &contribs[t][v],
                &alphas[t][v],
            )?;
            let sub = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul((t * views + v + 1) as u64));
            no.push(corrupt_flow(&f, spec.noise.sigma, spec.noise.outlier_fraction, sub)?);
            cl.push(f);
        }
        clean_flows.push(cl);
        flows.push(no);
    }
    Ok(GroundTruth {
        spec: spec.clone(),
        seed,
        states,
        dynamic,
        blob,
        cameras,
        images,
        depths,
        alphas,
        flows,
        clean_flows,
    })
}

/// Credits each pixel with alpha ≥ 0.5 to its maximum-weight contributor
/// and reports that Gaussian's projected motion.
pub fn oracle_flow(
    prev: &GaussianCloud,
    next: &GaussianCloud,
    cam_prev: &PinholeCamera,
    cam_next: &PinholeCamera,
    contributors: &[Vec<crate::raster::Contributor>],
    alpha: &ImageBuf,
) -> Result<FlowField2D> {
    let mut f = FlowField2D::zeros(cam_prev.width, cam_prev.height);
    for (i, recs) in contributors.iter().enumerate() {
        f.valid[i] = false;
        if alpha.data[i] < FLOW_ALPHA_FLOOR {
            continue;
        }
        let Some(best) = recs
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight).then(b.index.cmp(&a.index)))
        else {
            continue;
        };
        let g = best.index;
        if let Ok(d) = flow_between(cam_prev, cam_next, prev.gaussians[g].center, next.gaussians[g].center) {
            f.data[i] = d;
            f.valid[i] = true;
        }
    }
    Ok(f)
}

/// Adds i.i.d. N(0, σ²) noise to both components of every valid pixel,
/// then replaces `outlier_frac` of the valid pixels by flows uniform in
/// `±width/4`.
pub fn corrupt_flow(flow: &FlowField2D, sigma: f64, outlier_frac: f64, seed: u64) -> Result<FlowField2D> {
    if !(sigma >= 0.0) || !(0.0..=1.0).contains(&outlier_frac) {
        return Err(Error::Config(format!(
            "corrupt_flow needs sigma >= 0 and outlier_frac in [0, 1] (got {sigma}, {outlier_frac})"
        )));
    }
    let mut out = flow.clone();
    if sigma == 0.0 && outlier_frac == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let valid: Vec<usize> = (0..flow.data.len()).filter(|&i| flow.valid[i]).collect();
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for &i in &valid {
            out.data[i][0] += n.sample(&mut rng);
            out.data[i][1] += n.sample(&mut rng);
        }
    }
    let k = (outlier_frac * valid.len() as f64).round() as usize;
    if k > 0 {
        let range = flow.width as f64 / 4.0;
        for j in sample(&mut rng, valid.len(), k) {
            let i = valid[j];
            out.data[i] = [rng.random_range(-range..=range), rng.random_range(-range..=range)];
        }
    }
    Ok(out)
}

/// Observations handed to the trainers.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub background: [f64; 3],
    /// `[t][view]`.
    pub cameras: Vec<Vec<PinholeCamera>>,
    pub images: Vec<Vec<ImageBuf>>,
    /// `[t][view]`, `t < T-1`: forward flow t → t+1; `None` when missing.
    pub flows: Vec<Vec<Option<FlowField2D>>>,
}

impl Dataset {
    pub fn frames(&self) -> usize {
        self.images.len()
    }

    pub fn views(&self) -> usize {
        self.images.first().map_or(0, |v| v.len())
    }

    /// Flow from frame `t-1` to `t` in `view`.
    pub fn flow_into(&self, t: usize, view: usize) -> Option<&FlowField2D> {
        if t == 0 {
            return None;
        }
        self.flows.get(t - 1)?.get(view)?.as_ref()
    }

    /// Reads a dataset directory written by [`write_dataset`]. Missing flow
    /// files are tolerated.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = SceneSpec::from_toml(&fs::read_to_string(dir.join("spec.cfg"))?)?;
        let (t_count, views) = (spec.frames, spec.views());
        let mut cameras = vec![];
        let mut images = vec![];
        let mut flows = vec![];
        for t in 0..t_count {
            let mut cams = vec![];
            let mut ims = vec![];
            let mut fl = vec![];
            for v in 0..views {
                cams.push(PinholeCamera::from_text(&fs::read_to_string(camera_path(dir, t, v))?)?);
                ims.push(read_png(&dir.join(format!("frames/{t}/{v}.png")))?);
                if t + 1 < t_count {
                    let p = dir.join(format!("flow/{t}/{v}.flo"));
                    fl.push(if p.exists() { Some(read_flo(&p)?) } else { None });
                }
            }
            cameras.push(cams);
            images.push(ims);
            if t + 1 < t_count {
                flows.push(fl);
            }
        }
        Ok(Dataset {
            background: spec.background,
            cameras,
            images,
            flows,
        })
    }
}

fn camera_path(dir: &Path, t: usize, v: usize) -> std::path::PathBuf {
    dir.join(format!("cams/{t}_{v}.txt"))
}

/// Writes the dataset layout: cams, frames, depth, flow, gt and spec.cfg.
pub fn write_dataset(gt: &GroundTruth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in 0..gt.frames() {
        for v in 0..gt.views() {
            atomic_write(&camera_path(dir, t, v), gt.cameras[t][v].to_text().as_bytes())?;
            write_png(&dir.join(format!("frames/{t}/{v}.png")), &gt.images[t][v])?;
            write_depth(&dir.join(format!("depth/{t}/{v}.dpt")), &gt.depths[t][v])?;
            if t + 1 < gt.frames() {
                write_flo(&dir.join(format!("flow/{t}/{v}.flo")), &gt.flows[t][v])?;
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "gaussian", "x", "y", "z"]).map_err(csv_err)?;
    for (t, s) in gt.states.iter().enumerate() {
        for (i, c) in s.centers().iter().enumerate() {
            w.write_record([t.to_string(), i.to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string()])
                .map_err(csv_err)?;
        }
    }
    atomic_write(&dir.join("gt/trajectories.csv"), &csv_bytes(w)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["gaussian", "dynamic", "blob"]).map_err(csv_err)?;
    for (i, (d, b)) in gt.dynamic.iter().zip(&gt.blob).enumerate() {
        let b = b.map_or("-1".to_string(), |b| b.to_string());
        w.write_record([i.to_string(), (*d as u8).to_string(), b]).map_err(csv_err)?;
    }
    atomic_write(&dir.join("gt/labels.csv"), &csv_bytes(w)?)?;
    atomic_write(&dir.join("spec.cfg"), gt.spec.to_toml()?.as_bytes())
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
}

/// Reads `gt/trajectories.csv` into `[frame][gaussian]` centers.
pub fn read_trajectories(path: &Path) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out: Vec<Vec<[f64; 3]>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad trajectory row {rec:?}")))
        };
        let (t, g) = (num(0)? as usize, num(1)? as usize);
        if t >= out.len() {
            out.resize(t + 1, Vec::new());
        }
        if g != out[t].len() {
            return Err(Error::Format(format!("trajectory rows out of order at frame {t}")));
        }
        out[t].push([num(2)?, num(3)?, num(4)?]);
    }
    Ok(out)
}

/// Reads `gt/labels.csv` into per-Gaussian dynamic flags.
pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(rec.get(1) == Some("1"))
        })
        .collect()
}

/// A fronto-parallel sheet translating by `step` per frame in front of a
/// single static camera. Every point of the sheet shares the same image
/// motion `f·step/z`.
pub fn rigid_translation_scene(step: [f64; 2]) -> SceneSpec {
    SceneSpec {
        frames: 3,
        width: 32,
        height: 32,
        background: [0.0; 3],
        rig: RigSpec::Ring {
            views: 1,
            radius: 2.0,
            focal: 32.0,
            span_degrees: 0.0,
            elevation: 0.0,
        },
        noise: NoiseSpec::default(),
        backdrop: None,
        blobs: vec![BlobSpec {
            center: [0.0; 3],
            count: 25,
            radius: 0.4,
            scale: 0.09,
            color: [0.8, 0.4, 0.2],
            opacity: 0.95,
            shape: BlobShape::Sheet,
            motion: Motion::Linear {
                velocity: [step[0], step[1], 0.0],
            },
        }],
    }
}

/// A translating background sheet behind a static, mostly opaque occluder.
pub fn occluder_scene() -> SceneSpec {
    SceneSpec {
        frames: 2,
        width: 48,
        height: 48,
        background: [0.0; 3],
        rig: RigSpec::Ring {
            views: 1,
            radius: 2.0,
            focal: 48.0,
            span_degrees: 0.0,
            elevation: 0.0,
        },
        noise: NoiseSpec::default(),
        backdrop: None,
        blobs: vec![
            BlobSpec {
                center: [0.0, 0.0, 0.8],
                count: 30,
                radius: 0.9,
                scale: 0.16,
                color: [0.2, 0.5, 0.9],
                opacity: 0.95,
                shape: BlobShape::Sheet,
                motion: Motion::Linear {
                    velocity: [0.08, 0.0, 0.0],
                },
            },
            BlobSpec {
                center: [0.0, 0.0, -0.4],
                count: 9,
                radius: 0.18,
                scale: 0.08,
                color: [0.9, 0.8, 0.1],
                opacity: 0.95,
                shape: BlobShape::Sheet,
                motion: Motion::Static,
            },
        ],
    }
}

fn desk_backdrop() -> BackdropSpec {
    BackdropSpec {
        depth: 1.2,
        extent: [4.0, 4.0],
        cells: [8, 8],
        colors: [[0.85, 0.85, 0.8], [0.25, 0.3, 0.35]],
        opacity: 0.95,
    }
}

/// Static textured scene seen by a camera sweeping an arc.
pub fn static_arc_scene() -> SceneSpec {
    SceneSpec {
        frames: 5,
        width: 32,
        height: 32,
        background: [0.0; 3],
        rig: RigSpec::MonocularArc {
            radius: 2.5,
            focal: 32.0,
            arc_degrees: 12.0,
            elevation: 0.0,
        },
        noise: NoiseSpec::default(),
        backdrop: Some(desk_backdrop()),
        blobs: vec![BlobSpec {
            center: [0.1, 0.0, 0.0],
            count: 12,
            radius: 0.3,
            scale: 0.1,
            color: [0.8, 0.3, 0.2],
            opacity: 0.9,
            shape: BlobShape::Ball,
            motion: Motion::Static,
        }],
    }
}

/// One blob translating across a static textured backdrop, monocular arc.
pub fn moving_blob_scene() -> SceneSpec {
    SceneSpec {
        frames: 5,
        width: 32,
        height: 32,
        background: [0.0; 3],
        rig: RigSpec::MonocularArc {
            radius: 2.5,
            focal: 32.0,
            arc_degrees: 8.0,
            elevation: 0.0,
        },
        noise: NoiseSpec::default(),
        backdrop: Some(desk_backdrop()),
        blobs: vec![BlobSpec {
            center: [-0.3, 0.0, 0.0],
            count: 16,
            radius: 0.25,
            scale: 0.09,
            color: [0.9, 0.35, 0.1],
            opacity: 0.9,
            shape: BlobShape::Ball,
            motion: Motion::Linear {
                velocity: [0.15, 0.04, 0.0],
            },
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_blob(motion: Motion) -> SceneSpec {
        SceneSpec {
            frames: 3,
            width: 24,
            height: 24,
            background: [0.0; 3],
            rig: RigSpec::Ring {
                views: 1,
                radius: 1.0,
                focal: 100.0,
                span_degrees: 0.0,
                elevation: 0.0,
            },
            noise: NoiseSpec::default(),
            backdrop: None,
            blobs: vec![BlobSpec {
                center: [0.0; 3],
                count: 5,
                radius: 0.0,
                scale: 0.05,
                color: [0.5; 3],
                opacity: 0.9,
                shape: BlobShape::Ball,
                motion,
            }],
        }
    }

    #[test]
    fn linear_blob_at_depth_one_moves_ten_pixels() {
        let gt = generate(&single_blob(Motion::Linear { velocity: [0.1, 0.0, 0.0] }), 3).unwrap();
        let f = &gt.clean_flows[0][0];
        let n = f.valid.iter().filter(|&&v| v).count();
        assert!(n > 0);
        for i in 0..f.data.len() {
            if f.valid[i] {
                assert!((f.data[i][0] - 10.0).abs() < 1e-9 && f.data[i][1].abs() < 1e-9, "{:?}", f.data[i]);
            }
        }
    }

    #[test]
    fn static_spec_has_zero_flow() {
        let mut spec = static_arc_scene();
        spec.rig = RigSpec::Ring {
            views: 2,
            radius: 2.5,
            focal: 32.0,
            span_degrees: 30.0,
            elevation: 0.2,
        };
        let gt = generate(&spec, 1).unwrap();
        assert!(gt.dynamic.iter().all(|&d| !d));
        for per_view in &gt.clean_flows {
            for f in per_view {
                assert!(f.data.iter().all(|d| *d == [0.0, 0.0]));
            }
        }
    }

    #[test]
    fn orbit_flow_matches_projected_centers() {
        let motion = Motion::Orbit {
            pivot: [0.1, 0.0, 0.2],
            axis: [0.0, 1.0, 0.3],
            rate: 0.2,
        };
        let mut spec = single_blob(motion);
        spec.blobs[0].radius = 0.2;
        spec.blobs[0].count = 10;
        spec.rig = RigSpec::Ring {
            views: 1,
            radius: 2.0,
            focal: 30.0,
            span_degrees: 0.0,
            elevation: 0.0,
        };
        let gt = generate(&spec, 9).unwrap();
        let out = render(&gt.states[1], &gt.cameras[1][0], [0.0; 3], &raster_config()).unwrap();
        let f = &gt.clean_flows[1][0];
        let mut checked = 0;
        for (i, recs) in out.contributors.iter().enumerate() {
            if !f.valid[i] {
                continue;
            }
            let g = recs.iter().max_by(|a, b| a.weight.total_cmp(&b.weight)).unwrap().index;
            let a = gt.cameras[1][0].project(gt.states[1].gaussians[g].center).unwrap().uv;
            let b = gt.cameras[2][0].project(gt.states[2].gaussians[g].center).unwrap().uv;
            assert!((f.data[i][0] - (b[0] - a[0])).abs() < 1e-9);
            assert!((f.data[i][1] - (b[1] - a[1])).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn orbit_preserves_pairwise_distances() {
        let motion = Motion::Orbit {
            pivot: [0.0; 3],
            axis: [1.0, 1.0, 0.0],
            rate: 0.5,
        };
        let mut spec = single_blob(motion);
        spec.blobs[0].radius = 0.3;
        let gt = generate(&spec, 2).unwrap();
        let d = |c: &[[f64; 3]], i: usize, j: usize| crate::math::dist3f(c[i], c[j]);
        let (a, b) = (gt.states[0].centers(), gt.states[2].centers());
        for i in 0..a.len() {
            for j in 0..a.len() {
                assert!((d(&a, i, j) - d(&b, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn waypoints_interpolate() {
        let m = Motion::Waypoints {
            points: vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 2.0, 0.0]],
        };
        assert_eq!(m.pose(0, 5).unwrap().1, [0.0; 3]);
        assert_eq!(m.pose(1, 5).unwrap().1, [0.5, 0.0, 0.0]);
        assert_eq!(m.pose(2, 5).unwrap().1, [1.0, 0.0, 0.0]);
        assert_eq!(m.pose(4, 5).unwrap().1, [1.0, 2.0, 0.0]);
    }

    #[test]
    fn generation_is_deterministic_and_self_consistent() {
        let spec = moving_blob_scene();
        let a = generate(&spec, 11).unwrap();
        let b = generate(&spec, 11).unwrap();
        for t in 0..a.frames() {
            assert_eq!(a.states[t], b.states[t]);
            assert_eq!(a.images[t][0].data, b.images[t][0].data);
            let re = render(&a.states[t], &a.cameras[t][0], spec.background, &raster_config()).unwrap();
            assert_eq!(re.color.data, a.images[t][0].data);
        }
        let c = generate(&spec, 12).unwrap();
        assert_ne!(a.states[0], c.states[0]);
    }

    #[test]
    fn labels_follow_motion_programs() {
        let gt = generate(&moving_blob_scene(), 0).unwrap();
        let n_wall = 64;
        assert!(gt.dynamic[..n_wall].iter().all(|&d| !d));
        assert!(gt.dynamic[n_wall..].iter().all(|&d| d));
        assert_eq!(gt.blob[0], None);
        assert_eq!(gt.blob[n_wall], Some(0));
    }

    #[test]
    fn corrupt_flow_identity_and_statistics() {
        let data: Vec<[f64; 2]> = (0..10_000).map(|i| [(i % 7) as f64, -((i % 5) as f64)]).collect();
        let f = FlowField2D::from_vec(100, 100, data).unwrap();
        assert_eq!(corrupt_flow(&f, 0.0, 0.0, 1).unwrap(), f);

        let g = corrupt_flow(&f, 1.0, 0.0, 2).unwrap();
        let res: Vec<f64> = g.data.iter().zip(&f.data).flat_map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / res.len() as f64).sqrt();
        assert!((0.95..=1.05).contains(&std), "{std}");

        let h = corrupt_flow(&f, 1.0, 0.1, 3).unwrap();
        let far = h
            .data
            .iter()
            .zip(&f.data)
            .filter(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]) > 5.0)
            .count() as f64
            / 1e4;
        assert!((0.09..=0.11).contains(&far), "{far}");
        assert!(corrupt_flow(&f, -1.0, 0.0, 0).is_err());
        assert!(corrupt_flow(&f, 0.0, 1.5, 0).is_err());
    }

    #[test]
    fn invalid_pixels_stay_invalid_under_noise() {
        let mut f = FlowField2D::zeros(4, 4);
        f.valid[3] = false;
        let g = corrupt_flow(&f, 1.0, 0.5, 5).unwrap();
        assert!(!g.valid[3]);
        assert_eq!(g.data[3], [0.0, 0.0]);
    }

    #[test]
    fn spec_toml_roundtrip_and_unknown_keys() {
        let spec = moving_blob_scene();
        let text = spec.to_toml().unwrap();
        assert_eq!(SceneSpec::from_toml(&text).unwrap(), spec);
        let bad = format!("{text}\nbogus = 1\n");
        assert!(matches!(SceneSpec::from_toml(&bad), Err(Error::Config(_))));
        let mut one = spec.clone();
        one.frames = 1;
        assert!(one.validate().is_err());
        let mut big = spec;
        big.blobs[0].count = 31;
        assert!(big.validate().is_err());
    }

    #[test]
    fn dataset_roundtrip_through_directory() {
        let gt = generate(&moving_blob_scene(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&gt, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.frames(), 5);
        assert_eq!(ds.views(), 1);
        assert_eq!(ds.cameras, gt.cameras);
        assert_eq!(ds.flows.len(), 4);
        assert!(ds.flow_into(0, 0).is_none() && ds.flow_into(1, 0).is_some());
        assert_eq!(read_trajectories(&dir.path().join("gt/trajectories.csv")).unwrap(), gt.trajectories());
        assert_eq!(read_labels(&dir.path().join("gt/labels.csv")).unwrap(), gt.dynamic);
        assert!(dir.path().join("depth/4/0.dpt").exists());
    }
}
