//! Adaptive density control: clone, split and prune.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Mean world-space position-gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split,
    /// smaller ones cloned.
    pub split_fraction: f64,
    pub interval: usize,
    /// Densification happens at iterations in `[start, stop)` of a stage.
    pub start: usize,
    pub stop: usize,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            grad_threshold: 2e-4,
            split_fraction: 0.01,
            interval: 100,
            start: 100,
            stop: 1_000_000,
            prune_opacity: 0.005,
            max_gaussians: 4096,
        }
    }
}

impl DensifyConfig {
    /// True when a densify step is due after iteration `iter` (0-based).
    pub fn due(&self, iter: usize) -> bool {
        self.enabled && self.interval > 0 && iter + 1 >= self.start && iter < self.stop && (iter + 1) % self.interval == 0
    }
}

/// Accumulated position gradients per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub norm_sum: Vec<f64>,
    pub dir_sum: Vec<[f64; 3]>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        GradStats {
            norm_sum: vec![0.0; n],
            dir_sum: vec![[0.0; 3]; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Adds one observation; `pos_grad` is the flat `n×3` gradient.
    pub fn add(&mut self, pos_grad: &[f64]) -> Result<()> {
        if pos_grad.len() != 3 * self.len() {
            return Err(Error::Stale {
                built: self.len() as u64,
                current: (pos_grad.len() / 3) as u64,
            });
        }
        for (i, g) in pos_grad.chunks_exact(3).enumerate() {
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if n > 0.0 {
                self.norm_sum[i] += n;
                for k in 0..3 {
                    self.dir_sum[i][k] += g[k];
                }
                self.count[i] += 1;
            }
        }
        Ok(())
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.count[i] as f64
        }
    }
}

/// Result of one density-control step.
#[derive(Clone, Debug)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    /// For every new Gaussian, the old index whose optimizer state it
    /// keeps (`None` for freshly created copies).
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small high-gradient Gaussians (the copy is shifted by its
/// largest scale against the mean gradient), splits large ones into two
/// copies with scale ÷ 1.6 placed ± one major-axis scale apart, then prunes
/// everything with opacity below the threshold. Always bumps the
/// generation.
pub fn densify_and_prune(cloud: &GaussianCloud, stats: &GradStats, cfg: &DensifyConfig, extent: f64) -> Result<DensifyOutcome> {
    if stats.len() != cloud.len() {
        return Err(Error::Stale {
            built: stats.len() as u64,
            current: cloud.len() as u64,
        });
    }
    let split_size = cfg.split_fraction * extent;
    let mut kept = Vec::with_capacity(cloud.len());
    let mut extra = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let mut budget = cfg.max_gaussians.saturating_sub(cloud.len());
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let hot = stats.mean(i) >= cfg.grad_threshold && budget > 0;
        let s = g.scale();
        let smax = s[0].max(s[1]).max(s[2]);
        if hot && smax > split_size {
            let k = (0..3).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap_or(0);
            let r = g.rotation.to_matrix();
            for sign in [1.0, -1.0] {
                let mut c = g.clone();
                for d in 0..3 {
                    c.center[d] += sign * s[k] * r[d][k];
                }
                c.set_scale(s.map(|v| v / 1.6))?;
                extra.push(c);
            }
            split += 1;
            budget -= 1;
            continue;
        }
        kept.push((g.clone(), Some(i)));
        if hot {
            let d = stats.dir_sum[i];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let mut c = g.clone();
            if n > 0.0 {
                for k in 0..3 {
                    c.center[k] -= smax * d[k] / n;
                }
            }
            extra.push(c);
            cloned += 1;
            budget -= 1;
        }
    }
    let mut pruned = 0;
    let mut gs = Vec::with_capacity(kept.len() + extra.len());
    let mut origin = Vec::with_capacity(gs.capacity());
    for (g, o) in kept.into_iter().chain(extra.into_iter().map(|g| (g, None))) {
        if g.opacity() < cfg.prune_opacity {
            pruned += 1;
            continue;
        }
        gs.push(g);
        origin.push(o);
    }
    let mut next = cloud.clone();
    next.replace(gs);
    Ok(DensifyOutcome {
        cloud: next,
        origin,
        cloned,
        split,
        pruned,
    })
}
