//! Mapping between a [`GaussianCloud`] and flat parameter segments.

use crate::ad::{ParamSet, Params, Real, SegId};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, Quaternion, Splat};
use crate::math::V3;

pub const POS: &str = "pos";
pub const ROT: &str = "rot";
pub const LOG_SCALE: &str = "log_scale";
pub const OPACITY: &str = "opacity";
pub const SH: &str = "sh";

/// Segment handles of the per-Gaussian parameters inside a [`ParamSet`].
///
/// Any of the segments may be absent, in which case the value is taken from
/// the reference cloud as a constant.
#[derive(Clone, Debug)]
pub struct CloudLayout {
    pub n: usize,
    pub sh_count: usize,
    pub pos: Option<SegId>,
    pub rot: Option<SegId>,
    pub log_scale: Option<SegId>,
    pub opacity: Option<SegId>,
    pub sh: Option<SegId>,
}

/// Which parameter groups to expose as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Groups {
    pub pos: bool,
    pub rot: bool,
    pub log_scale: bool,
    pub opacity: bool,
    pub sh: bool,
}

impl Groups {
    pub const ALL: Groups = Groups {
        pos: true,
        rot: true,
        log_scale: true,
        opacity: true,
        sh: true,
    };
    /// Centers and rotations only.
    pub const MOTION: Groups = Groups {
        pos: true,
        rot: true,
        log_scale: false,
        opacity: false,
        sh: false,
    };
}

impl CloudLayout {
    /// Appends the selected groups of `cloud` to `ps`.
    pub fn register(ps: &mut ParamSet, cloud: &GaussianCloud, groups: Groups) -> Self {
        let n = cloud.len();
        let sh_count = cloud.gaussians.first().map_or(1, |g| g.sh.len());
        let gs = &cloud.gaussians;
        let pos = groups
            .pos
            .then(|| ps.add(POS, &gs.iter().flat_map(|g| g.center).collect::<Vec<_>>()));
        let rot = groups
            .rot
            .then(|| ps.add(ROT, &gs.iter().flat_map(|g| g.rotation.to_array()).collect::<Vec<_>>()));
        let log_scale = groups
            .log_scale
            .then(|| ps.add(LOG_SCALE, &gs.iter().flat_map(|g| g.log_scale).collect::<Vec<_>>()));
        let opacity = groups
            .opacity
            .then(|| ps.add(OPACITY, &gs.iter().map(|g| g.opacity_logit).collect::<Vec<_>>()));
        let sh = groups.sh.then(|| {
            ps.add(
                SH,
                &gs.iter().flat_map(|g| g.sh.iter().flatten().copied()).collect::<Vec<_>>(),
            )
        });
        CloudLayout {
            n,
            sh_count,
            pos,
            rot,
            log_scale,
            opacity,
            sh,
        }
    }

    pub fn centers<R: Real>(&self, p: &Params<'_, R>, reference: &GaussianCloud) -> Vec<V3<R>> {
        match self.pos {
            Some(id) => p.seg(id).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            None => reference
                .gaussians
                .iter()
                .map(|g| [R::cst(g.center[0]), R::cst(g.center[1]), R::cst(g.center[2])])
                .collect(),
        }
    }

    pub fn rotations<R: Real>(&self, p: &Params<'_, R>, reference: &GaussianCloud) -> Vec<[R; 4]> {
        match self.rot {
            Some(id) => p.seg(id).chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            None => reference
                .gaussians
                .iter()
                .map(|g| g.rotation.to_array().map(R::cst))
                .collect(),
        }
    }

    /// Splats with the trainable groups read from `p`.
    pub fn splats<R: Real>(&self, p: &Params<'_, R>, reference: &GaussianCloud) -> Vec<Splat<R>> {
        let centers = self.centers(p, reference);
        let rots = self.rotations(p, reference);
        let ls = self.log_scale.map(|id| p.seg(id));
        let op = self.opacity.map(|id| p.seg(id));
        let sh = self.sh.map(|id| p.seg(id));
        let m = self.sh_count;
        reference
            .gaussians
            .iter()
            .enumerate()
            .map(|(i, g)| Splat {
                center: centers[i],
                rotation: rots[i],
                scale: match ls {
                    Some(v) => [v[3 * i].exp(), v[3 * i + 1].exp(), v[3 * i + 2].exp()],
                    None => g.scale().map(R::cst),
                },
                opacity: match op {
                    Some(v) => v[i].sigmoid(),
                    None => R::cst(g.opacity()),
                },
                sh: match sh {
                    Some(v) => (0..m)
                        .map(|k| {
                            let o = 3 * (m * i + k);
                            [v[o], v[o + 1], v[o + 2]]
                        })
                        .collect(),
                    None => g.sh.iter().map(|c| c.map(R::cst)).collect(),
                },
            })
            .collect()
    }

    /// Copies trained values back into `cloud`, renormalizing rotations.
    pub fn write_back(&self, ps: &ParamSet, cloud: &mut GaussianCloud) -> Result<()> {
        if cloud.len() != self.n {
            return Err(Error::Domain(format!(
                "layout built for {} Gaussians, cloud has {}",
                self.n,
                cloud.len()
            )));
        }
        let m = self.sh_count;
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            if let Some(id) = self.pos {
                let v = ps.get(id);
                g.center = [v[3 * i], v[3 * i + 1], v[3 * i + 2]];
            }
            if let Some(id) = self.rot {
                let v = ps.get(id);
                g.rotation = Quaternion::new(v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3])?;
            }
            if let Some(id) = self.log_scale {
                let v = ps.get(id);
                g.log_scale = [v[3 * i], v[3 * i + 1], v[3 * i + 2]];
            }
            if let Some(id) = self.opacity {
                g.opacity_logit = ps.get(id)[i];
            }
            if let Some(id) = self.sh {
                let v = ps.get(id);
                for k in 0..m {
                    let o = 3 * (m * i + k);
                    g.sh[k] = [v[o], v[o + 1], v[o + 2]];
                }
            }
        }
        Ok(())
    }

    /// Renormalizes stored quaternions in place (after an optimizer step).
    pub fn normalize_rotations(&self, ps: &mut ParamSet) {
        if let Some(id) = self.rot {
            for q in ps.get_mut(id).chunks_exact_mut(4) {
                let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
                if n > 0.0 && (n - 1.0).abs() > 1e-9 {
                    q.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
    }
}
