//! Adam with per-segment learning rates.

use crate::ad::{GradSet, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    lr: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Per-coordinate step counts, so rows added by densification start
    /// their bias correction from scratch.
    steps: Vec<u32>,
}

impl Adam {
    /// `lr_of` maps a segment name to its learning rate (0 freezes it).
    pub fn new(ps: &ParamSet, lr_of: impl Fn(&str) -> f64) -> Self {
        let n = ps.len();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            lr: lr_table(ps, &lr_of),
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: vec![0; n],
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, g: &GradSet) -> Result<()> {
        if g.values().len() != ps.len() || self.m.len() != ps.len() {
            return Err(Error::Stale {
                built: self.m.len() as u64,
                current: ps.len() as u64,
            });
        }
        for (i, (x, &gi)) in ps.values_mut().iter_mut().zip(g.values()).enumerate() {
            let lr = self.lr[i];
            if lr == 0.0 {
                continue;
            }
            self.steps[i] += 1;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
            let t = self.steps[i] as i32;
            let mh = self.m[i] / (1.0 - self.beta1.powi(t));
            let vh = self.v[i] / (1.0 - self.beta2.powi(t));
            *x -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    /// State for a new layout after the cloud changed structure.
    ///
    /// Segments named by `per_gaussian` hold one equal-sized row per
    /// Gaussian; row `i` of the new set inherits old row `origin[i]`, or a
    /// fresh zero state when `None`. Other segments are copied whole.
    pub fn remap(
        &self,
        old: &ParamSet,
        new: &ParamSet,
        origin: &[Option<usize>],
        per_gaussian: impl Fn(&str) -> bool,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<Adam> {
        let n = new.len();
        let mut out = Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lr: lr_table(new, &lr_of),
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: vec![0; n],
        };
        for id in new.ids() {
            let name = new.name(id);
            let Some(oid) = old.id(name) else { continue };
            let (nr, or) = (new.range(id), old.range(oid));
            if per_gaussian(name) {
                if origin.is_empty() {
                    continue;
                }
                let stride = nr.len() / origin.len();
                for (i, o) in origin.iter().enumerate() {
                    let Some(o) = *o else { continue };
                    for k in 0..stride {
                        let (a, b) = (nr.start + i * stride + k, or.start + o * stride + k);
                        if b >= or.end {
                            return Err(Error::Domain(format!("origin row {o} outside segment {name}")));
                        }
                        out.m[a] = self.m[b];
                        out.v[a] = self.v[b];
                        out.steps[a] = self.steps[b];
                    }
                }
            } else if nr.len() == or.len() {
                out.m[nr.clone()].copy_from_slice(&self.m[or.clone()]);
                out.v[nr.clone()].copy_from_slice(&self.v[or.clone()]);
                out.steps[nr].copy_from_slice(&self.steps[or]);
            }
        }
        Ok(out)
    }
}

fn lr_table(ps: &ParamSet, lr_of: &impl Fn(&str) -> f64) -> Vec<f64> {
    let mut lr = vec![0.0; ps.len()];
    for id in ps.ids() {
        let v = lr_of(ps.name(id));
        lr[ps.range(id)].iter_mut().for_each(|x| *x = v);
    }
    lr
}
