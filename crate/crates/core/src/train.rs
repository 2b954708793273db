//! Static fitting, the iterative paradigm and two-stage deformation
//! training.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ad::{backward, Objective, ParamSet, Params, Real, SegId, Tape};
use crate::camera::PinholeCamera;
use crate::config::{DynamicMap, FlowLoss, TrainConfig};
use crate::correspondence::{
    csv_err, foreground_search, lift_dynamic_mask, predicted_flows, CandidateSet, DynamicMask3D, FlowField2D,
    SearchOptions,
};
use crate::deform::{refined_dynamic_map, DeformModel, DeformSegs, DECODER, HEX, VELOCITY};
use crate::densify::{densify_and_prune, GradStats};
use crate::error::{Error, Result};
use crate::gaussian::{logit, Gaussian3D, GaussianCloud, Quaternion, Splat};
use crate::image::ImageBuf;
use crate::knn::KdTree;
use crate::layout::{CloudLayout, Groups, LOG_SCALE, OPACITY, POS, ROT, SH};
use crate::losses::{
    color_loss_dynamic, dynamic_map_from_flow, flow_loss_kl, flow_loss_l1, mse, physical_loss, physical_neighbors,
    total_loss_deform, total_loss_iterative, velocity_alignment, velocity_targets, LossBreakdown, LossParts, Schedule,
    VelocityTarget,
};
use crate::math::V3;
use crate::metrics::{psnr, ssim};
use crate::optim::Adam;
use crate::raster::{render, render_splats, RasterConfig};
use crate::synth::Dataset;

/// Segment of per-Gaussian, per-view log flow confidences.
pub const CONF: &str = "log_conf";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Static,
    Frame(usize),
    Fine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: Stage,
    pub loss: LossBreakdown,
    pub gaussian_count: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// `[t][view]`.
    pub psnr: Vec<Vec<f64>>,
    pub ssim: Vec<Vec<f64>>,
    /// Gaussian count at the start and after every structural change.
    pub counts: Vec<usize>,
    /// Trajectory end-point error against ground truth, when known.
    pub epe: Option<f64>,
}

impl TrainReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.psnr.iter().flatten())
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.ssim.iter().flatten())
    }

    pub fn final_count(&self) -> usize {
        self.counts.last().copied().unwrap_or(0)
    }

    /// Equality ignoring wall-clock times.
    pub fn same_outcome(&self, o: &TrainReport) -> bool {
        let strip = |r: &TrainReport| {
            let mut r = r.clone();
            r.log.iter_mut().for_each(|l| l.wall_ms = 0.0);
            r
        };
        strip(self) == strip(o)
    }

    /// CSV with columns iteration, loss_color, loss_flow, loss_phys,
    /// loss_vel, lambda_f, gaussian_count, wall_ms.
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "iteration",
            "loss_color",
            "loss_flow",
            "loss_phys",
            "loss_vel",
            "lambda_f",
            "gaussian_count",
            "wall_ms",
        ])
        .map_err(csv_err)?;
        for r in &self.log {
            c.write_record([
                r.iteration.to_string(),
                r.loss.color.to_string(),
                r.loss.flow.to_string(),
                r.loss.physical.to_string(),
                r.loss.velocity.to_string(),
                r.loss.lambda_f.to_string(),
                r.gaussian_count.to_string(),
                format!("{:.3}", r.wall_ms),
            ])
            .map_err(csv_err)?;
        }
        c.flush()?;
        Ok(())
    }
}

fn mean<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), &x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn lr_of(cfg: &TrainConfig) -> impl Fn(&str) -> f64 + '_ {
    move |name| {
        let l = &cfg.lr;
        match name {
            POS => l.position,
            ROT => l.rotation,
            LOG_SCALE => l.scale,
            OPACITY => l.opacity,
            SH => l.sh,
            CONF => l.confidence,
            HEX => l.hexplane,
            DECODER => l.decoder,
            VELOCITY => l.velocity,
            _ => 0.0,
        }
    }
}

fn per_gaussian(name: &str) -> bool {
    matches!(name, POS | ROT | LOG_SCALE | OPACITY | SH | CONF)
}

fn check_finite(v: f64, iter: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iter,
            what: format!("{what} loss is {v}"),
        })
    }
}

/// Seeds a cloud from points (an SfM stand-in): jittered centers, colour
/// sampled from the first frame of view 0, isotropic scale from the mean
/// distance to the three nearest neighbours.
pub fn init_cloud(points: &[[f64; 3]], ds: &Dataset, cfg: &TrainConfig) -> Result<GaussianCloud> {
    if points.is_empty() {
        return Err(Error::Domain("no seed points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.init.jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let centers: Vec<[f64; 3]> = points
        .iter()
        .map(|p| p.map(|v| v + if cfg.init.jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 }))
        .collect();
    let tree = KdTree::build(&centers)?;
    let (cam, img) = (&ds.cameras[0][0], &ds.images[0][0]);
    centers
        .iter()
        .map(|&c| {
            let nn = tree.nearest(c, 4);
            let d: Vec<f64> = nn.iter().skip(1).map(|n| n.dist2.sqrt()).collect();
            let s = if d.is_empty() { 0.05 } else { (d.iter().sum::<f64>() / d.len() as f64).max(1e-3) };
            let rgb = match cam.project(c) {
                Ok(p) if p.uv[0] >= 0.0 && p.uv[1] >= 0.0 && (p.uv[0] as usize) < img.width && (p.uv[1] as usize) < img.height => {
                    let (x, y) = (p.uv[0] as usize, p.uv[1] as usize);
                    [0, 1, 2].map(|k| img.at(x, y, k.min(img.channels - 1)).clamp(0.02, 0.98))
                }
                _ => [0.5; 3],
            };
            Gaussian3D::new(c, Quaternion::IDENTITY, [s; 3], cfg.init.opacity, rgb)
        })
        .collect::<Result<Vec<_>>>()
        .map(GaussianCloud::new)
}

/// Converts plain splats back into a cloud stamped with `generation`.
pub fn cloud_from_splats(splats: &[Splat<f64>], generation: u64) -> Result<GaussianCloud> {
    let gs = splats
        .iter()
        .map(|s| {
            Ok(Gaussian3D {
                center: s.center,
                rotation: Quaternion::from_array(s.rotation)?,
                log_scale: s.scale.map(f64::ln),
                opacity_logit: logit(s.opacity),
                sh: s.sh.clone(),
                confidence: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = GaussianCloud::new(gs);
    c.set_generation(generation);
    Ok(c)
}

/// Mean colour MSE over a set of views.
pub struct StaticObjective<'a> {
    pub layout: &'a CloudLayout,
    pub reference: &'a GaussianCloud,
    pub views: Vec<(PinholeCamera, ImageBuf)>,
    pub background: [f64; 3],
    pub raster: RasterConfig,
}

impl Objective for StaticObjective<'_> {
    fn eval<R: Real>(&self, p: &Params<'_, R>) -> Result<R> {
        let splats = self.layout.splats(p, self.reference);
        let mut acc = R::cst(0.0);
        for (cam, img) in &self.views {
            let (pred, _) = render_splats(&splats, cam, self.background, &self.raster)?;
            acc = acc + mse(&pred, &img.data);
        }
        Ok(acc / self.views.len() as f64)
    }
}

/// Fits all parameters of `init` to frame 0 with density control.
pub fn train_static(ds: &Dataset, init: GaussianCloud, cfg: &TrainConfig) -> Result<(GaussianCloud, TrainReport)> {
    let mut report = TrainReport::default();
    let cloud = fit_static(ds, init, cfg, cfg.budgets.static_iters, &mut report)?;
    Ok((cloud, report))
}

fn fit_static(ds: &Dataset, init: GaussianCloud, cfg: &TrainConfig, iters: usize, report: &mut TrainReport) -> Result<GaussianCloud> {
    if ds.frames() == 0 || ds.views() == 0 {
        return Err(Error::Domain("static fitting needs at least one view of frame 0".into()));
    }
    let views: Vec<(PinholeCamera, ImageBuf)> = (0..ds.views())
        .map(|v| (ds.cameras[0][v].clone(), ds.images[0][v].clone()))
        .collect();
    let raster = cfg.raster.config();
    let extent = init.extent();
    let lr = lr_of(cfg);
    let mut cloud = init;
    let mut ps = ParamSet::new();
    let mut layout = CloudLayout::register(&mut ps, &cloud, Groups::ALL);
    let mut opt = Adam::new(&ps, &lr);
    let mut stats = GradStats::new(cloud.len());
    report.counts.push(cloud.len());
    let clock = Instant::now();
    for it in 0..iters {
        let obj = StaticObjective {
            layout: &layout,
            reference: &cloud,
            views: views.clone(),
            background: ds.background,
            raster: raster.clone(),
        };
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let loss = obj.eval(&p)?;
        check_finite(loss.val(), it, "colour")?;
        let g = backward(loss, &p, &tape)?;
        if let Some(id) = layout.pos {
            stats.add(g.get(id))?;
        }
        opt.step(&mut ps, &g)?;
        layout.normalize_rotations(&mut ps);
        report.log.push(LogRow {
            iteration: it,
            stage: Stage::Static,
            loss: LossBreakdown {
                color: loss.val(),
                total: loss.val(),
                ..Default::default()
            },
            gaussian_count: cloud.len(),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.densify.due(it) {
            layout.write_back(&ps, &mut cloud)?;
            let out = densify_and_prune(&cloud, &stats, &cfg.densify, extent)?;
            let mut nps = ParamSet::new();
            let nl = CloudLayout::register(&mut nps, &out.cloud, Groups::ALL);
            opt = opt.remap(&ps, &nps, &out.origin, per_gaussian, &lr)?;
            log::debug!(
                "densify at {it}: +{} clones, {} splits, -{} pruned -> {}",
                out.cloned,
                out.split,
                out.pruned,
                out.cloud.len()
            );
            ps = nps;
            layout = nl;
            cloud = out.cloud;
            stats = GradStats::new(cloud.len());
            report.counts.push(cloud.len());
        }
    }
    layout.write_back(&ps, &mut cloud)?;
    Ok(cloud)
}

fn conf_values(cloud: &GaussianCloud, views: usize) -> Vec<f64> {
    cloud
        .gaussians
        .iter()
        .flat_map(|g| {
            (0..views).map(move |v| if g.confidence.len() == views { g.confidence[v].ln() } else { 0.0 })
        })
        .collect()
}

fn write_conf(ps: &ParamSet, id: SegId, cloud: &mut GaussianCloud, views: usize) {
    let lc = ps.get(id);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        g.confidence = (0..views).map(|v| lc[i * views + v].exp()).collect();
    }
}

fn conf_column<R: Real>(lc: &[R], views: usize, v: usize) -> Vec<R> {
    lc.iter().skip(v).step_by(views).copied().collect()
}

fn search_opts(cfg: &TrainConfig) -> SearchOptions {
    SearchOptions {
        k: cfg.corr.k,
        alpha_floor: cfg.corr.alpha_floor,
        stride: 1,
    }
}

/// Per-view data of one iterative-paradigm frame.
#[derive(Clone, Debug)]
pub struct FrameView {
    pub cam_prev: PinholeCamera,
    pub cam: PinholeCamera,
    pub image: ImageBuf,
    pub dmap: ImageBuf,
    pub cands: CandidateSet,
    pub flow: Option<FlowField2D>,
}

/// Objective `L^I` for moving the frame `t-1` state to frame `t`.
pub struct IterativeFrame<'a> {
    pub layout: CloudLayout,
    pub conf: SegId,
    pub reference: &'a GaussianCloud,
    pub prev_centers: Vec<[f64; 3]>,
    pub views: Vec<FrameView>,
    pub mask: DynamicMask3D,
    pub neighbors: Vec<(usize, Vec<usize>)>,
    pub background: [f64; 3],
    pub raster: RasterConfig,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub flow_loss: FlowLoss,
}

impl<'a> IterativeFrame<'a> {
    /// Builds candidates from the previous state's renders, the dynamic
    /// maps and mask, and registers centers, rotations and confidences in
    /// `ps`.
    pub fn prepare(ds: &Dataset, prev: &'a GaussianCloud, t: usize, cfg: &TrainConfig, ps: &mut ParamSet) -> Result<Self> {
        if t == 0 || t >= ds.frames() {
            return Err(Error::Domain(format!("frame {t} outside 1..{}", ds.frames())));
        }
        let raster = cfg.raster.config();
        let mut views = Vec::with_capacity(ds.views());
        for v in 0..ds.views() {
            let cam_prev = ds.cameras[t - 1][v].clone();
            let out = render(prev, &cam_prev, ds.background, &raster)?;
            let cands = foreground_search(&out.depth, &out.alpha, &cam_prev, prev, &search_opts(cfg))?;
            let flow = ds.flow_into(t, v).cloned();
            if flow.is_none() {
                log::warn!("no flow into frame {t} for view {v}; flow term skipped");
            }
            let dmap = flow
                .as_ref()
                .map(dynamic_map_from_flow)
                .unwrap_or_else(|| ImageBuf::new(cam_prev.width, cam_prev.height, 1));
            views.push(FrameView {
                cam_prev,
                cam: ds.cameras[t][v].clone(),
                image: ds.images[t][v].clone(),
                dmap,
                cands,
                flow,
            });
        }
        let pairs: Vec<(&CandidateSet, &ImageBuf)> = views.iter().map(|v| (&v.cands, &v.dmap)).collect();
        let mask = lift_dynamic_mask(&pairs, prev.len(), cfg.corr.tau_dyn)?;
        let prev_centers = prev.centers();
        let neighbors = physical_neighbors(&prev_centers, &mask.flags, cfg.corr.m)?;
        let layout = CloudLayout::register(ps, prev, Groups::MOTION);
        let conf = ps.add(CONF, &conf_values(prev, ds.views()));
        Ok(IterativeFrame {
            layout,
            conf,
            reference: prev,
            prev_centers,
            views,
            mask,
            neighbors,
            background: ds.background,
            raster,
            lambda_c: cfg.loss.lambda_c,
            lambda_p: cfg.loss.lambda_p,
            lambda_f: 0.0,
            flow_loss: cfg.loss.flow,
        })
    }

    pub fn parts<R: Real>(&self, p: &Params<'_, R>) -> Result<LossParts<R>> {
        let splats = self.layout.splats(p, self.reference);
        let curr: Vec<V3<R>> = splats.iter().map(|s| s.center).collect();
        let prev: Vec<V3<R>> = self.prev_centers.iter().map(|c| c.map(R::cst)).collect();
        let nv = self.views.len();
        let lc = p.seg(self.conf);
        let mut parts = LossParts::zero();
        let mut flow_views = 0usize;
        for (v, view) in self.views.iter().enumerate() {
            let (pred, _) = render_splats(&splats, &view.cam, self.background, &self.raster)?;
            parts.color = parts.color + color_loss_dynamic(&pred, &view.image, &view.dmap, self.lambda_c)?;
            let Some(flow) = &view.flow else { continue };
            if self.flow_loss == FlowLoss::None {
                continue;
            }
            let preds = predicted_flows(
                &view.cands,
                &prev,
                &curr,
                &view.cam_prev,
                &view.cam,
                self.reference.generation(),
            )?;
            let term = match self.flow_loss {
                FlowLoss::Kl => flow_loss_kl(flow, &view.cands, &preds, &conf_column(lc, nv, v))?,
                _ => flow_loss_l1(flow, &view.cands, &preds)?,
            };
            parts.flow = parts.flow + term;
            flow_views += 1;
        }
        parts.color = parts.color / nv as f64;
        if flow_views > 0 {
            parts.flow = parts.flow / flow_views as f64;
        }
        parts.physical = physical_loss(&curr, &self.prev_centers, &self.neighbors)?;
        Ok(parts)
    }
}

impl Objective for IterativeFrame<'_> {
    fn eval<R: Real>(&self, p: &Params<'_, R>) -> Result<R> {
        let parts = self.parts(p)?;
        Ok(total_loss_iterative(&parts, self.lambda_p, self.lambda_f).0)
    }
}

#[derive(Clone, Debug)]
pub struct IterativeResult {
    pub states: Vec<GaussianCloud>,
    pub masks: Vec<DynamicMask3D>,
    pub report: TrainReport,
}

/// Static fit of frame 0, then per-frame tuning of centers and rotations.
pub fn train_iterative(ds: &Dataset, init: GaussianCloud, cfg: &TrainConfig) -> Result<IterativeResult> {
    let mut report = TrainReport::default();
    let first = fit_static(ds, init, cfg, cfg.budgets.static_iters, &mut report)?;
    let mut states = vec![first];
    let mut masks = Vec::new();
    let lr = lr_of(cfg);
    let clock = Instant::now();
    let iters = cfg.budgets.per_frame;
    let sched = Schedule::spanning(iters, cfg.loss.warmup_frac, cfg.loss.lambda_max, cfg.loss.lambda_min)?;
    for t in 1..ds.frames() {
        let prev = states.last().expect("frame 0 state");
        let mut ps = ParamSet::new();
        let mut frame = IterativeFrame::prepare(ds, prev, t, cfg, &mut ps)?;
        let mut opt = Adam::new(&ps, &lr);
        for it in 0..iters {
            frame.lambda_f = if cfg.loss.flow == FlowLoss::None { 0.0 } else { sched.lambda(it) };
            let tape = Tape::new();
            let p = ps.bind(&tape);
            let parts = frame.parts(&p)?;
            let (total, br) = total_loss_iterative(&parts, frame.lambda_p, frame.lambda_f);
            check_finite(total.val(), it, "iterative")?;
            let g = backward(total, &p, &tape)?;
            opt.step(&mut ps, &g)?;
            frame.layout.normalize_rotations(&mut ps);
            report.log.push(LogRow {
                iteration: it,
                stage: Stage::Frame(t),
                loss: br,
                gaussian_count: prev.len(),
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
        }
        let mut next = prev.clone();
        frame.layout.write_back(&ps, &mut next)?;
        write_conf(&ps, frame.conf, &mut next, ds.views());
        next.set_dynamic_flags(Some(frame.mask.flags.clone()))?;
        if next.len() != prev.len() {
            return Err(Error::Domain("Gaussian count changed during per-frame tuning".into()));
        }
        masks.push(frame.mask.clone());
        states.push(next);
    }
    let (psnr_v, ssim_v) = frame_metrics(ds, cfg, |t| Ok(states[t].clone()))?;
    report.psnr = psnr_v;
    report.ssim = ssim_v;
    Ok(IterativeResult { states, masks, report })
}

type Metrics = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// PSNR and SSIM of every frame and view.
pub fn frame_metrics(ds: &Dataset, cfg: &TrainConfig, state: impl Fn(usize) -> Result<GaussianCloud>) -> Result<Metrics> {
    let raster = cfg.raster.config();
    let (mut ps, mut ss) = (Vec::new(), Vec::new());
    for t in 0..ds.frames() {
        let cloud = state(t)?;
        let (mut pr, mut sr) = (Vec::new(), Vec::new());
        for v in 0..ds.views() {
            let out = render(&cloud, &ds.cameras[t][v], ds.background, &raster)?;
            pr.push(psnr(&out.color, &ds.images[t][v])?);
            sr.push(ssim(&out.color, &ds.images[t][v])?);
        }
        ps.push(pr);
        ss.push(sr);
    }
    Ok((ps, ss))
}

/// Trained deformation model: canonical cloud plus field, decoder and
/// velocity-head weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformState {
    pub canonical: GaussianCloud,
    pub model: DeformModel,
    /// Holds exactly the hexplane, decoder and velocity segments.
    pub params: ParamSet,
}

impl DeformState {
    pub fn segs(&self) -> Result<DeformSegs> {
        model_segs(&self.params)
    }

    pub fn deformed(&self, frame: usize) -> Result<GaussianCloud> {
        let segs = self.segs()?;
        let p = self.params.plain();
        let splats = self.model.deformed(&p, &segs, &self.canonical.splats(), self.model.time_of(frame));
        let mut c = cloud_from_splats(&splats, self.canonical.generation())?;
        for (g, src) in c.gaussians.iter_mut().zip(&self.canonical.gaussians) {
            g.opacity_logit = src.opacity_logit;
        }
        Ok(c)
    }

    /// Velocity of every Gaussian at `frame`.
    pub fn velocities(&self, frame: usize) -> Result<Vec<[f64; 3]>> {
        let segs = self.segs()?;
        let p = self.params.plain();
        let t = self.model.time_of(frame);
        Ok(self
            .canonical
            .gaussians
            .iter()
            .map(|g| self.model.velocity_at(&p, &segs, g.center, t))
            .collect())
    }

    pub fn refined_map(&self, frame: usize, cam: &PinholeCamera, floor: f64, raster: &RasterConfig) -> Result<ImageBuf> {
        refined_dynamic_map(
            &self.deformed(frame)?,
            cam,
            &self.velocities(frame)?,
            self.model.dt,
            floor,
            raster,
        )
    }

    /// Deformed centers of every frame.
    pub fn trajectories(&self, frames: usize) -> Result<Vec<Vec<[f64; 3]>>> {
        (0..frames).map(|t| Ok(self.deformed(t)?.centers())).collect()
    }
}

fn model_segs(ps: &ParamSet) -> Result<DeformSegs> {
    let id = |n: &str| ps.id(n).ok_or_else(|| Error::Domain(format!("missing segment {n}")));
    Ok(DeformSegs {
        hex: id(HEX)?,
        decoder: id(DECODER)?,
        velocity: id(VELOCITY)?,
    })
}

/// Per-view data of one deformation-training step.
#[derive(Clone, Debug)]
pub struct DeformView {
    pub cam_prev: Option<PinholeCamera>,
    pub cam: PinholeCamera,
    pub image: ImageBuf,
    pub dmap: ImageBuf,
    pub cands: Option<CandidateSet>,
    pub flow: Option<FlowField2D>,
    pub targets: Vec<VelocityTarget>,
}

/// Objective `L^D` at one sampled frame.
pub struct DeformStep<'a> {
    pub model: &'a DeformModel,
    pub segs: DeformSegs,
    pub layout: &'a CloudLayout,
    pub conf: SegId,
    pub canonical: &'a GaussianCloud,
    pub frame: usize,
    pub views: Vec<DeformView>,
    pub background: [f64; 3],
    pub raster: RasterConfig,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub flow_loss: FlowLoss,
    pub injector: bool,
}

impl DeformStep<'_> {
    pub fn parts<R: Real>(&self, p: &Params<'_, R>) -> Result<LossParts<R>> {
        let canon = self.layout.splats(p, self.canonical);
        let t = self.model.time_of(self.frame);
        let cur = self.model.deformed(p, &self.segs, &canon, t);
        let nv = self.views.len();
        let mut parts = LossParts::zero();
        for view in &self.views {
            let (pred, _) = render_splats(&cur, &view.cam, self.background, &self.raster)?;
            parts.color = parts.color + color_loss_dynamic(&pred, &view.image, &view.dmap, self.lambda_c)?;
        }
        parts.color = parts.color / nv as f64;
        if self.frame == 0 || !(self.flow_loss != FlowLoss::None || self.injector) {
            return Ok(parts);
        }
        let n = canon.len();
        let mut needed = vec![false; n];
        for view in &self.views {
            if let Some(c) = &view.cands {
                for (i, r) in c.referenced(n).into_iter().enumerate() {
                    needed[i] |= r;
                }
            }
        }
        if !needed.iter().any(|&b| b) {
            return Ok(parts);
        }
        let tp = self.model.time_of(self.frame - 1);
        let zero = [R::cst(0.0); 3];
        let mut prev_pos = vec![zero; n];
        let mut vel = vec![zero; n];
        for i in (0..n).filter(|&i| needed[i]) {
            prev_pos[i] = self.model.deformed(p, &self.segs, std::slice::from_ref(&canon[i]), tp)[0].center;
            if self.injector {
                vel[i] = self.model.velocity_at(p, &self.segs, canon[i].center, tp);
            }
        }
        let curr_pos: Vec<V3<R>> = cur.iter().map(|s| s.center).collect();
        let lc = p.seg(self.conf);
        let (mut fv, mut vv) = (0usize, 0usize);
        for (v, view) in self.views.iter().enumerate() {
            let (Some(cands), Some(flow), Some(cam_prev)) = (&view.cands, &view.flow, &view.cam_prev) else {
                continue;
            };
            if self.flow_loss != FlowLoss::None {
                let preds = predicted_flows(cands, &prev_pos, &curr_pos, cam_prev, &view.cam, self.canonical.generation())?;
                parts.flow = parts.flow
                    + match self.flow_loss {
                        FlowLoss::Kl => flow_loss_kl(flow, cands, &preds, &conf_column(lc, nv, v))?,
                        _ => flow_loss_l1(flow, cands, &preds)?,
                    };
                fv += 1;
            }
            if self.injector && !view.targets.is_empty() {
                parts.velocity = parts.velocity
                    + velocity_alignment(&view.targets, &prev_pos, &vel, self.model.dt, cam_prev, &view.cam)?;
                vv += 1;
            }
        }
        if fv > 0 {
            parts.flow = parts.flow / fv as f64;
        }
        if vv > 0 {
            parts.velocity = parts.velocity / vv as f64;
        }
        Ok(parts)
    }
}

impl Objective for DeformStep<'_> {
    fn eval<R: Real>(&self, p: &Params<'_, R>) -> Result<R> {
        Ok(total_loss_deform(&self.parts(p)?, self.lambda_f).0)
    }
}

/// Canonical segments, confidences and model weights in one set.
pub struct DeformParams {
    pub ps: ParamSet,
    pub layout: CloudLayout,
    pub conf: SegId,
    pub segs: DeformSegs,
}

pub fn assemble(canonical: &GaussianCloud, views: usize, model_ps: &ParamSet) -> Result<DeformParams> {
    let mut ps = ParamSet::new();
    let layout = CloudLayout::register(&mut ps, canonical, Groups::ALL);
    let conf = ps.add(CONF, &conf_values(canonical, views));
    for name in [HEX, DECODER, VELOCITY] {
        let id = model_ps
            .id(name)
            .ok_or_else(|| Error::Domain(format!("missing segment {name}")))?;
        ps.add(name, model_ps.get(id));
    }
    let segs = model_segs(&ps)?;
    Ok(DeformParams { ps, layout, conf, segs })
}

fn model_params(ps: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for name in [HEX, DECODER, VELOCITY] {
        let id = ps.id(name).ok_or_else(|| Error::Domain(format!("missing segment {name}")))?;
        out.add(name, ps.get(id));
    }
    Ok(out)
}

/// Builds the per-view inputs of a deformation step at `frame` from the
/// current parameters.
#[allow(clippy::too_many_arguments)]
pub fn deform_views(
    ds: &Dataset,
    cfg: &TrainConfig,
    model: &DeformModel,
    dp: &DeformParams,
    canonical: &GaussianCloud,
    frame: usize,
    need_flow: bool,
    raster: &RasterConfig,
) -> Result<Vec<DeformView>> {
    let plain = dp.ps.plain();
    let canon = dp.layout.splats(&plain, canonical);
    let gen = canonical.generation();
    let at = |f: usize| -> Result<GaussianCloud> {
        cloud_from_splats(&model.deformed(&plain, &dp.segs, &canon, model.time_of(f)), gen)
    };
    let refined = cfg.loss.lambda_c > 0.0 && cfg.loss.dynamic_map == DynamicMap::Refined;
    let (cur_cloud, vel) = if refined {
        let t = model.time_of(frame);
        let vel: Vec<[f64; 3]> = canon.iter().map(|s| model.velocity_at(&plain, &dp.segs, s.center, t)).collect();
        (Some(at(frame)?), vel)
    } else {
        (None, Vec::new())
    };
    let prev_cloud = if need_flow { Some(at(frame - 1)?) } else { None };
    let mut views = Vec::with_capacity(ds.views());
    for v in 0..ds.views() {
        let cam = ds.cameras[frame][v].clone();
        let flow = if need_flow { ds.flow_into(frame, v).cloned() } else { None };
        let dmap = if cfg.loss.lambda_c == 0.0 {
            ImageBuf::new(cam.width, cam.height, 1)
        } else if let Some(c) = &cur_cloud {
            refined_dynamic_map(c, &cam, &vel, model.dt, cfg.loss.refine_floor, raster)?
        } else {
            let f = if frame == 0 { ds.flows.first().and_then(|f| f[v].as_ref()) } else { ds.flow_into(frame, v) };
            f.map(dynamic_map_from_flow)
                .unwrap_or_else(|| ImageBuf::new(cam.width, cam.height, 1))
        };
        let (cam_prev, cands, targets) = match (&prev_cloud, &flow) {
            (Some(pc), Some(fl)) => {
                let cp = ds.cameras[frame - 1][v].clone();
                let out = render(pc, &cp, ds.background, raster)?;
                let c = foreground_search(&out.depth, &out.alpha, &cp, pc, &search_opts(cfg))?;
                let targets = if cfg.loss.injector { velocity_targets(fl, &c) } else { Vec::new() };
                (Some(cp), Some(c), targets)
            }
            _ => (None, None, Vec::new()),
        };
        views.push(DeformView {
            cam_prev,
            cam,
            image: ds.images[frame][v].clone(),
            dmap,
            cands,
            flow,
            targets,
        });
    }
    Ok(views)
}

#[derive(Clone, Debug)]
pub struct DeformResult {
    pub state: DeformState,
    pub report: TrainReport,
}

/// Coarse static fit of frame 0, then joint training of the canonical
/// cloud, field, decoder, velocity head and confidences on random frames.
pub fn train_deform(ds: &Dataset, init: GaussianCloud, cfg: &TrainConfig) -> Result<DeformResult> {
    let frames = ds.frames();
    let mut report = TrainReport::default();
    let mut canonical = fit_static(ds, init, cfg, cfg.budgets.coarse, &mut report)?;
    let (lo, hi) = canonical
        .bounds()
        .ok_or_else(|| Error::Domain("empty canonical cloud".into()))?;
    let pad = 0.1 * canonical.extent().max(1e-3);
    let lo = lo.map(|v| v - pad);
    let hi = hi.map(|v| v + pad);
    let model = DeformModel::with_sizes(
        frames,
        lo,
        hi,
        cfg.field.f_dim,
        cfg.field.resolutions.clone(),
        cfg.field.width,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66);
    let mut model_ps = ParamSet::new();
    model.register(&mut model_ps, &mut rng);
    let mut dp = assemble(&canonical, ds.views(), &model_ps)?;
    let lr = lr_of(cfg);
    let mut opt = Adam::new(&dp.ps, &lr);
    let extent = canonical.extent();
    let mut stats = GradStats::new(canonical.len());
    let raster = cfg.raster.config();
    let iters = cfg.budgets.fine;
    let sched = Schedule::spanning(iters, cfg.loss.warmup_frac, cfg.loss.lambda_max, cfg.loss.lambda_min)?;
    let clock = Instant::now();
    for it in 0..iters {
        let frame = rng.random_range(0..frames);
        let lambda_f = if cfg.uses_flow() { sched.lambda(it) } else { 0.0 };
        let need_flow = frame > 0 && lambda_f > 0.0;
        let views = deform_views(ds, cfg, &model, &dp, &canonical, frame, need_flow, &raster)?;
        let step = DeformStep {
            model: &model,
            segs: dp.segs,
            layout: &dp.layout,
            conf: dp.conf,
            canonical: &canonical,
            frame,
            views,
            background: ds.background,
            raster: raster.clone(),
            lambda_c: cfg.loss.lambda_c,
            lambda_f,
            flow_loss: if need_flow { cfg.loss.flow } else { FlowLoss::None },
            injector: need_flow && cfg.loss.injector,
        };
        let tape = Tape::new();
        let p = dp.ps.bind(&tape);
        let parts = step.parts(&p)?;
        let (total, br) = total_loss_deform(&parts, lambda_f);
        check_finite(total.val(), it, "deformation")?;
        let densifying = cfg.densify.enabled && it < cfg.densify.stop;
        if densifying {
            let gc = backward(parts.color, &p, &tape)?;
            if let Some(id) = dp.layout.pos {
                stats.add(gc.get(id))?;
            }
        }
        let g = backward(total, &p, &tape)?;
        drop(step);
        opt.step(&mut dp.ps, &g)?;
        dp.layout.normalize_rotations(&mut dp.ps);
        report.log.push(LogRow {
            iteration: it,
            stage: Stage::Fine,
            loss: br,
            gaussian_count: canonical.len(),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.densify.due(it) {
            dp.layout.write_back(&dp.ps, &mut canonical)?;
            write_conf(&dp.ps, dp.conf, &mut canonical, ds.views());
            let out = densify_and_prune(&canonical, &stats, &cfg.densify, extent)?;
            let next = assemble(&out.cloud, ds.views(), &model_params(&dp.ps)?)?;
            opt = opt.remap(&dp.ps, &next.ps, &out.origin, per_gaussian, &lr)?;
            dp = next;
            canonical = out.cloud;
            stats = GradStats::new(canonical.len());
            report.counts.push(canonical.len());
        }
    }
    dp.layout.write_back(&dp.ps, &mut canonical)?;
    write_conf(&dp.ps, dp.conf, &mut canonical, ds.views());
    let state = DeformState {
        canonical,
        model,
        params: model_params(&dp.ps)?,
    };
    let (psnr_v, ssim_v) = frame_metrics(ds, cfg, |t| state.deformed(t))?;
    report.psnr = psnr_v;
    report.ssim = ssim_v;
    Ok(DeformResult { state, report })
}

/// Minimum opacity for a Gaussian to count in trajectory EPE.
pub const EPE_MIN_OPACITY: f64 = 0.05;

/// Mean over frames `t ≥ 1` and over visible trained Gaussians of
/// `‖(x_i(t) - x_i(0)) - (g_j(t) - g_j(0))‖`, where `j` is the GT Gaussian
/// nearest to `x_i(0)` at frame 0.
pub fn trajectory_epe(trained: &[Vec<[f64; 3]>], opacity: &[f64], gt: &[Vec<[f64; 3]>]) -> Result<f64> {
    let frames = trained.len().min(gt.len());
    if frames < 2 {
        return Err(Error::Domain("trajectory EPE needs two frames".into()));
    }
    let tree = KdTree::build(&gt[0])?;
    let ids: Vec<usize> = (0..trained[0].len()).filter(|&i| opacity[i] > EPE_MIN_OPACITY).collect();
    if ids.is_empty() {
        return Err(Error::Domain("no visible Gaussians for trajectory EPE".into()));
    }
    let matched: Vec<usize> = ids.iter().map(|&i| tree.nearest(trained[0][i], 1)[0].index).collect();
    let mut acc = 0.0;
    for t in 1..frames {
        for (&i, &j) in ids.iter().zip(&matched) {
            let d: [f64; 3] = [0, 1, 2]
                .map(|k| (trained[t][i][k] - trained[0][i][k]) - (gt[t][j][k] - gt[0][j][k]));
            acc += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
    }
    Ok(acc / ((frames - 1) * ids.len()) as f64)
}

/// Per-pixel flow of a trained model between two states of the same
/// cloud: the weight-averaged projected motion of each pixel's candidates.
pub fn model_flow(
    prev: &GaussianCloud,
    curr: &GaussianCloud,
    cam_prev: &PinholeCamera,
    cam_curr: &PinholeCamera,
    background: [f64; 3],
    cfg: &TrainConfig,
) -> Result<FlowField2D> {
    if prev.len() != curr.len() {
        return Err(Error::Domain("model flow needs two states of one cloud".into()));
    }
    let out = render(prev, cam_prev, background, &cfg.raster.config())?;
    let cands = foreground_search(&out.depth, &out.alpha, cam_prev, prev, &search_opts(cfg))?;
    let preds = predicted_flows(&cands, &prev.centers(), &curr.centers(), cam_prev, cam_curr, prev.generation())?;
    let mut flow = FlowField2D::zeros(cam_prev.width, cam_prev.height);
    flow.valid.iter_mut().for_each(|v| *v = false);
    for (px, fl) in cands.pixels.iter().zip(&preds) {
        let w: f64 = fl.iter().map(|c| c.weight).sum();
        if w <= 0.0 {
            continue;
        }
        let i = px.v * flow.width + px.u;
        flow.data[i] = [0, 1].map(|k| fl.iter().map(|c| c.weight * c.flow[k]).sum::<f64>() / w);
        flow.valid[i] = true;
    }
    Ok(flow)
}
