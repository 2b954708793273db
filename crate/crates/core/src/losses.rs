//! Training objectives and the flow-weight schedule.

use crate::ad::Real;
use crate::camera::PinholeCamera;
use crate::correspondence::{CandidateFlow, CandidateSet, FlowField2D};
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::knn::KdTree;
use crate::math::V3;

/// Flow magnitudes at or below this count as no motion (px).
pub const FLOW_EPS: f64 = 1e-6;
/// Bounds of the learnable flow confidence.
pub const CONF_MIN: f64 = 1e-3;
pub const CONF_MAX: f64 = 1e3;

/// `|F| / max|F|` over valid pixels; all zeros when nothing moves.
pub fn dynamic_map_from_flow(flow: &FlowField2D) -> ImageBuf {
    normalized_map(flow.width, flow.height, flow.magnitude(), FLOW_EPS)
}

/// Normalizes a nonnegative map by `max(max value, floor)`; a map whose
/// maximum does not exceed `eps` becomes zero.
pub fn normalized_map(width: usize, height: usize, mag: Vec<f64>, floor: f64) -> ImageBuf {
    let max = mag.iter().copied().fold(0.0, f64::max);
    let mut out = ImageBuf::new(width, height, 1);
    if max > FLOW_EPS {
        let denom = max.max(floor);
        for (o, m) in out.data.iter_mut().zip(&mag) {
            *o = m / denom;
        }
    }
    out
}

/// `mean[(1-λc)(C-Ĉ)² + λc·D²(C-Ĉ)²]` over pixels and channels.
pub fn color_loss_dynamic<R: Real>(pred: &[R], target: &ImageBuf, d: &ImageBuf, lambda_c: f64) -> Result<R> {
    if pred.len() != target.data.len() {
        return Err(Error::Domain(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.data.len()
        )));
    }
    if d.width != target.width || d.height != target.height || d.channels != 1 {
        return Err(Error::Domain("dynamic map does not match the image".into()));
    }
    if !(0.0..=1.0).contains(&lambda_c) {
        return Err(Error::Config(format!("lambda_c {lambda_c} outside [0, 1]")));
    }
    let ch = target.channels;
    let mut acc = R::cst(0.0);
    for (i, (&p, &t)) in pred.iter().zip(&target.data).enumerate() {
        let dv = d.data[i / ch];
        let w = (1.0 - lambda_c) + lambda_c * dv * dv;
        let r = p - t;
        acc = acc + r * r * w;
    }
    Ok(acc / pred.len() as f64)
}

/// Plain mean squared error.
pub fn mse<R: Real>(pred: &[R], target: &[f64]) -> R {
    let mut acc = R::cst(0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let r = p - t;
        acc = acc + r * r;
    }
    acc / pred.len().max(1) as f64
}

/// Uncertainty-weighted flow loss.
///
/// Every candidate of a pixel is compared against the same flow value with
/// precision `1/σ² = weight · c`, contributing `‖F - F̂‖²/(2σ²) + ½ log σ²`.
/// `log_conf[i]` is the log confidence used for Gaussian `i`. The result is
/// the mean over all candidates of valid pixels.
pub fn flow_loss_kl<R: Real>(
    flow: &FlowField2D,
    cands: &CandidateSet,
    preds: &[Vec<CandidateFlow<R>>],
    log_conf: &[R],
) -> Result<R> {
    check_flow(flow, cands, preds)?;
    let (lo, hi) = (CONF_MIN.ln(), CONF_MAX.ln());
    let mut acc = R::cst(0.0);
    let mut count = 0usize;
    for (p, fl) in cands.pixels.iter().zip(preds) {
        let Some(f) = flow.at(p.u, p.v) else { continue };
        for cf in fl.iter().filter(|cf| cf.weight > 0.0) {
            let lc = log_conf[cf.index].clamp_c(lo, hi);
            let prec = lc.exp() * cf.weight;
            let (rx, ry) = (cf.flow[0] - f[0], cf.flow[1] - f[1]);
            let r2 = rx * rx + ry * ry;
            // ½ log σ² = -½ (log c + log w)
            acc = acc + r2 * prec * 0.5 - (lc + cf.weight.ln()) * 0.5;
            count += 1;
        }
    }
    Ok(if count == 0 { R::cst(0.0) } else { acc / count as f64 })
}

/// Unweighted L1 flow loss over the same candidate fan-out.
pub fn flow_loss_l1<R: Real>(flow: &FlowField2D, cands: &CandidateSet, preds: &[Vec<CandidateFlow<R>>]) -> Result<R> {
    check_flow(flow, cands, preds)?;
    let mut acc = R::cst(0.0);
    let mut count = 0usize;
    for (p, fl) in cands.pixels.iter().zip(preds) {
        let Some(f) = flow.at(p.u, p.v) else { continue };
        for cf in fl {
            acc = acc + (cf.flow[0] - f[0]).abs() + (cf.flow[1] - f[1]).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { R::cst(0.0) } else { acc / count as f64 })
}

fn check_flow<R>(flow: &FlowField2D, cands: &CandidateSet, preds: &[Vec<CandidateFlow<R>>]) -> Result<()> {
    if flow.width != cands.width || flow.height != cands.height {
        return Err(Error::Domain("flow field does not match candidate image size".into()));
    }
    if preds.len() != cands.pixels.len() {
        return Err(Error::Domain("predicted flows do not match the candidate set".into()));
    }
    Ok(())
}

/// Neighbour lists for the physical loss: for every dynamic Gaussian, its
/// `m` nearest dynamic Gaussians at the previous frame.
pub fn physical_neighbors(prev: &[[f64; 3]], dynamic: &[bool], m: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    if prev.len() != dynamic.len() {
        return Err(Error::Domain("dynamic mask does not match the cloud".into()));
    }
    let ids: Vec<usize> = (0..prev.len()).filter(|&i| dynamic[i]).collect();
    if ids.len() < 2 || m == 0 {
        return Ok(Vec::new());
    }
    let pts: Vec<[f64; 3]> = ids.iter().map(|&i| prev[i]).collect();
    let tree = KdTree::build(&pts)?;
    Ok(ids
        .iter()
        .map(|&i| {
            let nb = tree
                .nearest(prev[i], m + 1)
                .into_iter()
                .map(|n| ids[n.index])
                .filter(|&j| j != i)
                .take(m)
                .collect();
            (i, nb)
        })
        .collect())
}

/// Local rigidity: mean over neighbour pairs of
/// `‖(μ_i,t - μ_j,t) - (μ_i,t-1 - μ_j,t-1)‖²`.
pub fn physical_loss<R: Real>(curr: &[V3<R>], prev: &[[f64; 3]], neighbors: &[(usize, Vec<usize>)]) -> Result<R> {
    if curr.len() != prev.len() {
        return Err(Error::Stale {
            built: prev.len() as u64,
            current: curr.len() as u64,
        });
    }
    let mut acc = R::cst(0.0);
    let mut count = 0usize;
    for (i, nb) in neighbors {
        for &j in nb {
            let mut s = R::cst(0.0);
            for k in 0..3 {
                let d = (curr[*i][k] - curr[j][k]) - (prev[*i][k] - prev[j][k]);
                s = s + d * d;
            }
            acc = acc + s;
            count += 1;
        }
    }
    Ok(if count == 0 { R::cst(0.0) } else { acc / count as f64 })
}

/// One velocity-alignment term: Gaussian `index` should move by `flow`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityTarget {
    pub index: usize,
    pub flow: [f64; 2],
}

/// Pairs every candidate of every valid pixel with the pixel's flow.
pub fn velocity_targets(flow: &FlowField2D, cands: &CandidateSet) -> Vec<VelocityTarget> {
    let mut out = Vec::new();
    for p in &cands.pixels {
        if let Some(f) = flow.at(p.u, p.v) {
            out.extend(p.candidates.iter().map(|c| VelocityTarget { index: c.index, flow: f }));
        }
    }
    out
}

/// Mean L1 distance between `project_curr(μ + vΔt) - project_prev(μ)` and
/// the target flow of every selected Gaussian.
pub fn velocity_alignment<R: Real>(
    targets: &[VelocityTarget],
    pos: &[V3<R>],
    vel: &[V3<R>],
    dt: f64,
    cam_prev: &PinholeCamera,
    cam_curr: &PinholeCamera,
) -> Result<R> {
    if targets.is_empty() {
        log::warn!("velocity alignment has no selected Gaussians");
        return Ok(R::cst(0.0));
    }
    let mut proj: Vec<Option<[R; 2]>> = vec![None; pos.len()];
    let mut acc = R::cst(0.0);
    let mut count = 0usize;
    for t in targets {
        if proj[t.index].is_none() {
            let (m, v) = (pos[t.index], vel[t.index]);
            let moved = [m[0] + v[0] * dt, m[1] + v[1] * dt, m[2] + v[2] * dt];
            let (Ok(a), Ok(b)) = (cam_prev.project(m), cam_curr.project(moved)) else {
                continue;
            };
            proj[t.index] = Some([b.uv[0] - a.uv[0], b.uv[1] - a.uv[1]]);
        }
        let Some(f) = proj[t.index] else { continue };
        acc = acc + (f[0] - t.flow[0]).abs() + (f[1] - t.flow[1]).abs();
        count += 1;
    }
    Ok(if count == 0 { R::cst(0.0) } else { acc / count as f64 })
}

/// Individual loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub color: f64,
    pub flow: f64,
    pub physical: f64,
    pub velocity: f64,
    pub lambda_f: f64,
    pub lambda_p: f64,
    pub total: f64,
}

/// Terms of one objective evaluation, in any scalar type.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<R> {
    pub color: R,
    pub flow: R,
    pub physical: R,
    pub velocity: R,
}

impl<R: Real> LossParts<R> {
    pub fn zero() -> Self {
        LossParts {
            color: R::cst(0.0),
            flow: R::cst(0.0),
            physical: R::cst(0.0),
            velocity: R::cst(0.0),
        }
    }
}

/// `L_c + λp·L_p + λf·L_f`.
pub fn total_loss_iterative<R: Real>(parts: &LossParts<R>, lambda_p: f64, lambda_f: f64) -> (R, LossBreakdown) {
    let total = parts.color + parts.physical * lambda_p + parts.flow * lambda_f;
    (total, breakdown(parts, lambda_p, lambda_f, total.val()))
}

/// `L_c + λf·(L_f + L_v)`.
pub fn total_loss_deform<R: Real>(parts: &LossParts<R>, lambda_f: f64) -> (R, LossBreakdown) {
    let total = parts.color + (parts.flow + parts.velocity) * lambda_f;
    (total, breakdown(parts, 0.0, lambda_f, total.val()))
}

fn breakdown<R: Real>(p: &LossParts<R>, lambda_p: f64, lambda_f: f64, total: f64) -> LossBreakdown {
    LossBreakdown {
        color: p.color.val(),
        flow: p.flow.val(),
        physical: p.physical.val(),
        velocity: p.velocity.val(),
        lambda_f,
        lambda_p,
        total,
    }
}

/// Linear warmup to `lambda_max`, cosine decay to `lambda_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_end: usize,
    pub decay_end: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Schedule {
    pub fn new(warmup_end: usize, decay_end: usize, lambda_max: f64, lambda_min: f64) -> Result<Self> {
        if warmup_end >= decay_end {
            return Err(Error::Config(format!(
                "schedule needs warmup_end < decay_end ({warmup_end} >= {decay_end})"
            )));
        }
        Ok(Schedule {
            warmup_end,
            decay_end,
            lambda_max,
            lambda_min,
        })
    }

    /// Schedule spanning `iters` iterations with a warmup fraction.
    pub fn spanning(iters: usize, warmup_frac: f64, lambda_max: f64, lambda_min: f64) -> Result<Self> {
        let decay_end = iters.max(2);
        let warmup_end = ((decay_end as f64 * warmup_frac).round() as usize).min(decay_end - 1);
        Self::new(warmup_end, decay_end, lambda_max, lambda_min)
    }

    pub fn lambda(&self, iter: usize) -> f64 {
        if iter <= self.warmup_end {
            if self.warmup_end == 0 {
                return self.lambda_max;
            }
            return self.lambda_max * iter as f64 / self.warmup_end as f64;
        }
        if iter >= self.decay_end {
            return self.lambda_min;
        }
        let x = (iter - self.warmup_end) as f64 / (self.decay_end - self.warmup_end) as f64;
        self.lambda_min + 0.5 * (self.lambda_max - self.lambda_min) * (1.0 + (std::f64::consts::PI * x).cos())
    }
}
