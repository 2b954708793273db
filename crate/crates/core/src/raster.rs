//! Differentiable point-based rasterization.
//!
//! Gaussians are projected with the local affine approximation of the
//! perspective map, sorted by center depth and alpha-composited front to
//! back at every pixel centre. The same generic code path serves plain
//! rendering (`f64`) and recorded rendering (`Var`).

use crate::ad::Real;
use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussian::{covariance, sh_to_color, GaussianCloud, Gaussian3D, Splat};
use crate::image::ImageBuf;
use crate::math::{cst3, norm3, sub3};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    /// Added to the diagonal of every projected covariance (px²).
    pub dilation: f64,
    /// Upper clamp on per-Gaussian alpha.
    pub alpha_clamp: f64,
    /// Contributions with alpha below this are skipped; also fixes each
    /// Gaussian's pixel footprint. Zero disables culling.
    pub min_alpha: f64,
    /// Compositing stops once transmittance falls below this. Zero disables.
    pub transmittance_cutoff: f64,
    /// Contributor records kept per pixel (largest weights).
    pub max_contributors: usize,
    /// Pixels with alpha below this get the depth sentinel 0.
    pub depth_alpha_floor: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            dilation: 0.3,
            alpha_clamp: 0.99,
            min_alpha: 1e-8,
            transmittance_cutoff: 1e-6,
            max_contributors: 32,
            depth_alpha_floor: 0.5,
        }
    }
}

impl RasterConfig {
    /// No culling and no early termination.
    pub fn exact() -> Self {
        RasterConfig {
            min_alpha: 0.0,
            transmittance_cutoff: 0.0,
            max_contributors: usize::MAX,
            ..Default::default()
        }
    }

    /// Coarser culling used for fast training renders.
    pub fn fast() -> Self {
        RasterConfig {
            min_alpha: 1.0 / 255.0,
            transmittance_cutoff: 1e-4,
            ..Default::default()
        }
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected2DGaussian {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub source_index: usize,
}

/// One entry of a pixel's blending list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contributor {
    pub index: usize,
    pub alpha: f64,
    /// `alpha · transmittance` in front of this entry.
    pub weight: f64,
    pub depth: f64,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: ImageBuf,
    pub depth: ImageBuf,
    pub alpha: ImageBuf,
    /// Per pixel, sorted by nondecreasing depth.
    pub contributors: Vec<Vec<Contributor>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

struct ProjectedR<R> {
    mean: [R; 2],
    /// Upper triangle `(xx, xy, yy)` of the 2D covariance.
    cov: [R; 3],
    depth: R,
}

/// Projects a splat: `cov2d = J·W·Σ·Wᵀ·Jᵀ + dilation·I`.
fn project_splat<R: Real>(cam: &PinholeCamera, s: &Splat<R>, dilation: f64) -> Result<ProjectedR<R>> {
    let c = cam.to_camera(s.center);
    let p = cam.project_camera(c)?;
    let z = c[2];
    let iz = R::cst(1.0) / z;
    let iz2 = iz * iz;
    // J rows: [fx/z, 0, -fx·x/z²], [0, fy/z, -fy·y/z²]
    let j0 = [iz * cam.fx, R::cst(0.0), -(c[0] * iz2) * cam.fx];
    let j1 = [R::cst(0.0), iz * cam.fy, -(c[1] * iz2) * cam.fy];
    let w = &cam.world_to_cam.rotation;
    let mut t = [[R::cst(0.0); 3]; 2];
    for k in 0..3 {
        t[0][k] = j0[0] * w[0][k] + j0[1] * w[1][k] + j0[2] * w[2][k];
        t[1][k] = j1[0] * w[0][k] + j1[1] * w[1][k] + j1[2] * w[2][k];
    }
    let sigma = covariance(s.rotation, s.scale);
    let mut ts = [[R::cst(0.0); 3]; 2];
    for r in 0..2 {
        for k in 0..3 {
            ts[r][k] = t[r][0] * sigma[0][k] + t[r][1] * sigma[1][k] + t[r][2] * sigma[2][k];
        }
    }
    let dot = |a: &[R; 3], b: &[R; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    Ok(ProjectedR {
        mean: p.uv,
        cov: [dot(&ts[0], &t[0]) + dilation, dot(&ts[0], &t[1]), dot(&ts[1], &t[1]) + dilation],
        depth: p.depth,
    })
}

/// Projects one Gaussian to the image plane of `cam`.
pub fn project_gaussian(cam: &PinholeCamera, g: &Gaussian3D, dilation: f64) -> Result<Projected2DGaussian> {
    let p = project_splat(cam, &g.splat(), dilation)?;
    Ok(Projected2DGaussian {
        mean2d: p.mean,
        cov2d: [[p.cov[0], p.cov[1]], [p.cov[1], p.cov[2]]],
        depth: p.depth,
        source_index: 0,
    })
}

struct Prepared<R> {
    mean: [R; 2],
    conic: [R; 3],
    opacity: R,
    depth: f64,
    source: usize,
    /// Pixel footprint `[x0, x1) × [y0, y1)`.
    bbox: [usize; 4],
}

fn prepare<R: Real>(cam: &PinholeCamera, splats: &[Splat<R>], cfg: &RasterConfig) -> Vec<Prepared<R>> {
    let mut out = Vec::with_capacity(splats.len());
    for (i, s) in splats.iter().enumerate() {
        let p = match project_splat(cam, s, cfg.dilation) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let [a, b, c] = p.cov;
        let det = a * c - b * b;
        if !(det.val() > 0.0) {
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let o = s.opacity.val();
        let bbox = if cfg.min_alpha > 0.0 {
            if o < cfg.min_alpha {
                continue;
            }
            let r = (2.0 * (o / cfg.min_alpha).ln()).sqrt();
            let (mx, my) = (p.mean[0].val(), p.mean[1].val());
            let hx = r * a.val().sqrt();
            let hy = r * c.val().sqrt();
            let clampi = |v: f64, hi: usize| v.floor().max(0.0).min(hi as f64) as usize;
            // pixel centres at i + 0.5 inside [m - h, m + h]
            let x0 = clampi(mx - hx - 0.5 + 1.0, cam.width);
            let x1 = clampi(mx + hx - 0.5 + 1.0, cam.width);
            let y0 = clampi(my - hy - 0.5 + 1.0, cam.height);
            let y1 = clampi(my + hy - 0.5 + 1.0, cam.height);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            [x0, x1, y0, y1]
        } else {
            [0, cam.width, 0, cam.height]
        };
        out.push(Prepared {
            mean: p.mean,
            conic,
            opacity: s.opacity,
            depth: p.depth.val(),
            source: i,
            bbox,
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    out
}

fn splat_colors<R: Real>(cam: &PinholeCamera, splats: &[Splat<R>], prepared: &[Prepared<R>]) -> Result<Vec<Vec<R>>> {
    let eye = cst3::<R>(cam.center());
    prepared
        .iter()
        .map(|p| {
            let s = &splats[p.source];
            let d = sub3(s.center, eye);
            let n = norm3(d);
            let dir = [d[0] / n, d[1] / n, d[2] / n];
            Ok(sh_to_color(&s.sh, dir)?.to_vec())
        })
        .collect()
}

struct Pass<R> {
    image: Vec<R>,
    alpha: Vec<f64>,
    contributors: Vec<Vec<Contributor>>,
}

fn composite_pass<R: Real>(
    cam: &PinholeCamera,
    prepared: &[Prepared<R>],
    values: &[Vec<R>],
    bg: &[f64],
    cfg: &RasterConfig,
    keep_contributors: bool,
) -> Pass<R> {
    let channels = bg.len();
    let (w, h) = (cam.width, cam.height);
    let mut image = Vec::with_capacity(w * h * channels);
    let mut alpha_img = Vec::with_capacity(w * h);
    let mut contributors = Vec::with_capacity(if keep_contributors { w * h } else { 0 });
    let mut alphas: Vec<R> = Vec::new();
    let mut chan: Vec<Vec<R>> = vec![Vec::new(); channels];
    let mut recs: Vec<Contributor> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let px = [x as f64 + 0.5, y as f64 + 0.5];
            alphas.clear();
            chan.iter_mut().for_each(Vec::clear);
            recs.clear();
            let mut t = 1.0f64;
            for (k, p) in prepared.iter().enumerate() {
                let [x0, x1, y0, y1] = p.bbox;
                if x < x0 || x >= x1 || y < y0 || y >= y1 {
                    continue;
                }
                let m = [p.mean[0].val(), p.mean[1].val()];
                let q = [p.conic[0].val(), p.conic[1].val(), p.conic[2].val()];
                let raw = f64::gauss2d(m, q, p.opacity.val(), px);
                if raw < cfg.min_alpha {
                    continue;
                }
                let a = R::gauss2d(p.mean, p.conic, p.opacity, px).min_c(cfg.alpha_clamp);
                let av = a.val();
                alphas.push(a);
                for (c, ch) in chan.iter_mut().enumerate() {
                    ch.push(values[k][c]);
                }
                if keep_contributors {
                    recs.push(Contributor {
                        index: p.source,
                        alpha: av,
                        weight: av * t,
                        depth: p.depth,
                    });
                }
                t *= 1.0 - av;
                if t < cfg.transmittance_cutoff {
                    break;
                }
            }
            for (c, ch) in chan.iter().enumerate() {
                image.push(R::composite(&alphas, ch, bg[c]));
            }
            alpha_img.push(1.0 - t);
            if keep_contributors {
                if recs.len() > cfg.max_contributors {
                    let mut order: Vec<usize> = (0..recs.len()).collect();
                    order.sort_by(|&i, &j| recs[j].weight.total_cmp(&recs[i].weight).then(i.cmp(&j)));
                    let mut keep: Vec<usize> = order[..cfg.max_contributors].to_vec();
                    keep.sort_unstable();
                    contributors.push(keep.into_iter().map(|i| recs[i]).collect());
                } else {
                    contributors.push(recs.clone());
                }
            }
        }
    }
    Pass {
        image,
        alpha: alpha_img,
        contributors,
    }
}

/// Renders generic splats; returns the (possibly recorded) colour values in
/// row-major RGB order together with the plain render output.
pub fn render_splats<R: Real>(
    splats: &[Splat<R>],
    cam: &PinholeCamera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<(Vec<R>, RenderOutput)> {
    let prepared = prepare(cam, splats, cfg);
    let colors = splat_colors(cam, splats, &prepared)?;
    let pass = composite_pass(cam, &prepared, &colors, &background, cfg, true);
    let color = ImageBuf::from_vec(cam.width, cam.height, 3, pass.image.iter().map(|v| v.val()).collect())?;
    let alpha = ImageBuf::from_vec(cam.width, cam.height, 1, pass.alpha)?;
    let depth = render_depth_mode(&pass.contributors, &alpha, cfg.depth_alpha_floor)?;
    Ok((
        pass.image,
        RenderOutput {
            color,
            depth,
            alpha,
            contributors: pass.contributors,
        },
    ))
}

/// Renders a cloud with plain values.
pub fn render(cloud: &GaussianCloud, cam: &PinholeCamera, background: [f64; 3], cfg: &RasterConfig) -> Result<RenderOutput> {
    Ok(render_splats(&cloud.splats(), cam, background, cfg)?.1)
}

/// Alpha-weighted mean depth of each pixel's contributors; 0 where alpha is
/// below `floor`.
pub fn render_depth_mode(contributors: &[Vec<Contributor>], alpha: &ImageBuf, floor: f64) -> Result<ImageBuf> {
    if contributors.len() != alpha.pixels() {
        return Err(Error::Domain("contributor list does not match image size".into()));
    }
    let mut depth = ImageBuf::new(alpha.width, alpha.height, 1);
    for (i, recs) in contributors.iter().enumerate() {
        if alpha.data[i] < floor {
            continue;
        }
        let mut wsum = 0.0;
        let mut dsum = 0.0;
        for r in recs {
            wsum += r.weight;
            dsum += r.weight * r.depth;
        }
        if wsum > 0.0 {
            depth.data[i] = dsum / wsum;
        }
    }
    Ok(depth)
}

/// Composites per-Gaussian values with the colour weights (background 0).
/// `values[i]` holds `channels` entries for splat `i`.
pub fn render_channels<R: Real>(
    splats: &[Splat<R>],
    cam: &PinholeCamera,
    values: &[Vec<R>],
    channels: usize,
    cfg: &RasterConfig,
) -> Result<Vec<R>> {
    if values.len() != splats.len() {
        return Err(Error::Domain(format!(
            "{} per-Gaussian values for {} Gaussians",
            values.len(),
            splats.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| v.len() != channels) {
        return Err(Error::Domain(format!("expected {channels} channels, got {}", v.len())));
    }
    let prepared = prepare(cam, splats, cfg);
    let ordered: Vec<Vec<R>> = prepared.iter().map(|p| values[p.source].clone()).collect();
    let bg = vec![0.0; channels];
    Ok(composite_pass(cam, &prepared, &ordered, &bg, cfg, false).image)
}

/// Composites a per-Gaussian scalar (e.g. velocity magnitude).
pub fn render_velocity_map(
    cloud: &GaussianCloud,
    cam: &PinholeCamera,
    scalars: &[f64],
    cfg: &RasterConfig,
) -> Result<ImageBuf> {
    let values: Vec<Vec<f64>> = scalars.iter().map(|&s| vec![s]).collect();
    let img = render_channels(&cloud.splats(), cam, &values, 1, cfg)?;
    ImageBuf::from_vec(cam.width, cam.height, 1, img)
}
