//! Pixel-to-Gaussian motion correspondence.
//!
//! Pixels of the previous frame are lifted to 3D with its rendered depth,
//! the `k` nearest Gaussian centers become the pixel's candidates, and each
//! candidate's reprojected motion is compared against the pixel's flow.

use std::io::Write;

use crate::ad::Real;
use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Splat};
use crate::image::ImageBuf;
use crate::knn::KdTree;
use crate::math::{quat_to_rot, V3};
use crate::raster::{render_channels, RasterConfig};

/// Dense 2D flow with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField2D {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField2D {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Flow from raw vectors; non-finite entries are marked invalid.
    pub fn from_vec(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Domain(format!(
                "{} flow vectors for a {width}x{height} field",
                data.len()
            )));
        }
        let valid = data.iter().map(|f| f[0].is_finite() && f[1].is_finite()).collect();
        Ok(FlowField2D {
            width,
            height,
            data,
            valid,
        })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Option<[f64; 2]> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.data[i])
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data
            .iter()
            .zip(&self.valid)
            .map(|(f, &ok)| if ok { f[0].hypot(f[1]) } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub index: usize,
    /// Contribution of the Gaussian at the lifted point.
    pub phi: f64,
    /// `phi / max_k phi`, in (0, 1].
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelCandidates {
    pub u: usize,
    pub v: usize,
    pub point: [f64; 3],
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub width: usize,
    pub height: usize,
    pub generation: u64,
    pub pixels: Vec<PixelCandidates>,
}

impl CandidateSet {
    pub fn candidate_count(&self) -> usize {
        self.pixels.iter().map(|p| p.candidates.len()).sum()
    }

    /// Gaussians appearing as a candidate of at least one pixel.
    pub fn referenced(&self, n: usize) -> Vec<bool> {
        let mut r = vec![false; n];
        for p in &self.pixels {
            for c in &p.candidates {
                r[c.index] = true;
            }
        }
        r
    }

    /// CSV dump: `u,v,rank,gaussian,weight`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["u", "v", "rank", "gaussian", "weight"]).map_err(csv_err)?;
        for p in &self.pixels {
            for (rank, c) in p.candidates.iter().enumerate() {
                out.write_record(&[
                    p.u.to_string(),
                    p.v.to_string(),
                    rank.to_string(),
                    c.index.to_string(),
                    format!("{:?}", c.weight),
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOptions {
    pub k: usize,
    pub alpha_floor: f64,
    pub stride: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            k: 4,
            alpha_floor: 0.5,
            stride: 1,
        }
    }
}

/// Precomputed inverse-covariance data for evaluating contributions.
struct Density {
    center: [f64; 3],
    rot: [[f64; 3]; 3],
    inv_scale: [f64; 3],
    log_opacity: f64,
}

impl Density {
    fn new(s: &Splat<f64>) -> Self {
        Density {
            center: s.center,
            rot: quat_to_rot(s.rotation),
            inv_scale: s.scale.map(|v| 1.0 / v),
            log_opacity: s.opacity.ln(),
        }
    }

    fn log_phi(&self, x: [f64; 3]) -> f64 {
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        let mut m = 0.0;
        for k in 0..3 {
            let l = self.rot[0][k] * d[0] + self.rot[1][k] * d[1] + self.rot[2][k] * d[2];
            let z = l * self.inv_scale[k];
            m += z * z;
        }
        self.log_opacity - 0.5 * m
    }
}

/// Lifts every valid pixel of the previous frame and gathers its `k`
/// nearest Gaussians.
pub fn foreground_search(
    depth_prev: &ImageBuf,
    alpha_prev: &ImageBuf,
    cam_prev: &PinholeCamera,
    cloud_prev: &GaussianCloud,
    opts: &SearchOptions,
) -> Result<CandidateSet> {
    let (w, h) = (cam_prev.width, cam_prev.height);
    for (name, img) in [("depth", depth_prev), ("alpha", alpha_prev)] {
        if img.width != w || img.height != h || img.channels != 1 {
            return Err(Error::Domain(format!(
                "{name} map is {}x{}x{}, camera expects {w}x{h}x1",
                img.width, img.height, img.channels
            )));
        }
    }
    if opts.k == 0 || opts.stride == 0 {
        return Err(Error::Config("k and stride must be at least 1".into()));
    }
    let tree = KdTree::build(&cloud_prev.centers())?;
    let dens: Vec<Density> = cloud_prev.splats().iter().map(Density::new).collect();
    let mut pixels = Vec::new();
    for v in (0..h).step_by(opts.stride) {
        for u in (0..w).step_by(opts.stride) {
            let i = v * w + u;
            let d = depth_prev.data[i];
            if alpha_prev.data[i] < opts.alpha_floor || !(d > 0.0) {
                continue;
            }
            let x = cam_prev.unproject(u as f64 + 0.5, v as f64 + 0.5, d)?;
            let hits = tree.nearest(x, opts.k);
            let logs: Vec<f64> = hits.iter().map(|n| dens[n.index].log_phi(x)).collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                continue;
            }
            let candidates = hits
                .iter()
                .zip(&logs)
                .map(|(n, &l)| Candidate {
                    index: n.index,
                    phi: l.exp(),
                    weight: (l - top).exp(),
                })
                .collect();
            pixels.push(PixelCandidates {
                u,
                v,
                point: x,
                candidates,
            });
        }
    }
    Ok(CandidateSet {
        width: w,
        height: h,
        generation: cloud_prev.generation(),
        pixels,
    })
}

/// Projected motion of every Gaussian flagged in `needed`:
/// `project_curr(curr_i) - project_prev(prev_i)`. `None` marks Gaussians
/// that are not needed or fall behind either camera.
pub fn gaussian_flows<R: Real>(
    prev: &[V3<R>],
    curr: &[V3<R>],
    cam_prev: &PinholeCamera,
    cam_curr: &PinholeCamera,
    needed: &[bool],
) -> Result<Vec<Option<[R; 2]>>> {
    if prev.len() != curr.len() || needed.len() != prev.len() {
        return Err(Error::Domain("position arrays differ in length".into()));
    }
    Ok((0..prev.len())
        .map(|i| {
            if !needed[i] {
                return None;
            }
            let a = cam_prev.project(prev[i]).ok()?;
            let b = cam_curr.project(curr[i]).ok()?;
            Some([b.uv[0] - a.uv[0], b.uv[1] - a.uv[1]])
        })
        .collect())
}

/// One candidate's predicted flow.
#[derive(Clone, Copy, Debug)]
pub struct CandidateFlow<R> {
    pub index: usize,
    pub weight: f64,
    pub flow: [R; 2],
}

/// Per pixel of `cands`, the predicted flow of each candidate. The same
/// per-Gaussian flow value is shared by every pixel that references it.
pub fn predicted_flows<R: Real>(
    cands: &CandidateSet,
    prev: &[V3<R>],
    curr: &[V3<R>],
    cam_prev: &PinholeCamera,
    cam_curr: &PinholeCamera,
    generation: u64,
) -> Result<Vec<Vec<CandidateFlow<R>>>> {
    if generation != cands.generation {
        return Err(Error::Stale {
            built: cands.generation,
            current: generation,
        });
    }
    let per = gaussian_flows(prev, curr, cam_prev, cam_curr, &cands.referenced(prev.len()))?;
    Ok(cands
        .pixels
        .iter()
        .map(|p| {
            p.candidates
                .iter()
                .filter_map(|c| {
                    per[c.index].map(|flow| CandidateFlow {
                        index: c.index,
                        weight: c.weight,
                        flow,
                    })
                })
                .collect()
        })
        .collect())
}

/// Per-Gaussian dynamic labels with the threshold that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMask3D {
    pub flags: Vec<bool>,
    /// Largest weight-credited dynamic-map value seen per Gaussian.
    pub score: Vec<f64>,
    pub tau: f64,
}

impl DynamicMask3D {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Marks a Gaussian dynamic when `weight · D(pixel)` reaches `tau` at some
/// pixel of some view where it is a candidate.
pub fn lift_dynamic_mask(views: &[(&CandidateSet, &ImageBuf)], n: usize, tau: f64) -> Result<DynamicMask3D> {
    if views.is_empty() {
        return Err(Error::Domain("dynamic mask needs at least one view".into()));
    }
    let mut score = vec![0.0f64; n];
    for (cands, d) in views {
        if d.width != cands.width || d.height != cands.height {
            return Err(Error::Domain("dynamic map does not match candidate image size".into()));
        }
        for p in &cands.pixels {
            let dv = d.data[p.v * d.width + p.u];
            for c in &p.candidates {
                if c.index >= n {
                    return Err(Error::Stale {
                        built: cands.generation,
                        current: u64::MAX,
                    });
                }
                score[c.index] = score[c.index].max(c.weight * dv);
            }
        }
    }
    Ok(DynamicMask3D {
        flags: score.iter().map(|&s| s >= tau).collect(),
        score,
        tau,
    })
}

/// Flow obtained by alpha-compositing per-Gaussian projected motion, the
/// way a renderer would produce it.
pub fn rendered_flow(
    cloud_prev: &GaussianCloud,
    curr: &[[f64; 3]],
    cam_prev: &PinholeCamera,
    cam_curr: &PinholeCamera,
    cfg: &RasterConfig,
) -> Result<FlowField2D> {
    let prev = cloud_prev.centers();
    let per = gaussian_flows(&prev, curr, cam_prev, cam_curr, &vec![true; prev.len()])?;
    let values: Vec<Vec<f64>> = per.iter().map(|f| f.unwrap_or([0.0; 2]).to_vec()).collect();
    let img = render_channels(&cloud_prev.splats(), cam_prev, &values, 2, cfg)?;
    FlowField2D::from_vec(
        cam_prev.width,
        cam_prev.height,
        img.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
    )
}
