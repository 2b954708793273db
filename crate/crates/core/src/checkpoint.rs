//! Binary checkpoints: magic, version, a JSON header, then raw
//! little-endian `f64` data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ad::ParamSet;
use crate::config::TrainConfig;
use crate::deform::DeformModel;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, GaussianCloud, Quaternion};
use crate::io::atomic_write;
use crate::train::DeformState;

pub const MAGIC: &[u8; 8] = b"FSPLCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to resume or render a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// One cloud for a static fit, one per frame for the iterative
    /// paradigm, the canonical cloud for the deformation paradigm.
    pub clouds: Vec<GaussianCloud>,
    pub model: Option<DeformModel>,
    pub params: Option<ParamSet>,
}

#[derive(Serialize, Deserialize)]
struct CloudHeader {
    count: usize,
    sh: usize,
    conf: usize,
    generation: u64,
    dynamic: Option<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct Segment {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    clouds: Vec<CloudHeader>,
    model: Option<DeformModel>,
    params: Option<Vec<Segment>>,
}

impl Checkpoint {
    pub fn deform(config: TrainConfig, state: &DeformState) -> Self {
        Checkpoint {
            config,
            clouds: vec![state.canonical.clone()],
            model: Some(state.model.clone()),
            params: Some(state.params.clone()),
        }
    }

    pub fn deform_state(&self) -> Result<DeformState> {
        match (&self.model, &self.params, self.clouds.first()) {
            (Some(model), Some(params), Some(canonical)) => Ok(DeformState {
                canonical: canonical.clone(),
                model: model.clone(),
                params: params.clone(),
            }),
            _ => Err(Error::Format("checkpoint holds no deformation model".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut clouds = Vec::with_capacity(self.clouds.len());
        for c in &self.clouds {
            let sh = c.gaussians.first().map_or(1, |g| g.sh.len());
            let conf = c.gaussians.first().map_or(0, |g| g.confidence.len());
            for g in &c.gaussians {
                if g.sh.len() != sh || g.confidence.len() != conf {
                    return Err(Error::Domain("Gaussians of one cloud differ in layout".into()));
                }
                data.extend_from_slice(&g.center);
                data.extend_from_slice(&g.rotation.to_array());
                data.extend_from_slice(&g.log_scale);
                data.push(g.opacity_logit);
                data.extend(g.sh.iter().flatten());
                data.extend_from_slice(&g.confidence);
            }
            clouds.push(CloudHeader {
                count: c.len(),
                sh,
                conf,
                generation: c.generation(),
                dynamic: c.dynamic_flags().map(|f| f.to_vec()),
            });
        }
        let params = self.params.as_ref().map(|ps| {
            data.extend_from_slice(ps.values());
            ps.ids()
                .map(|id| Segment {
                    name: ps.name(id).to_string(),
                    len: ps.get(id).len(),
                })
                .collect()
        });
        let header = Header {
            config: self.config.clone(),
            clouds,
            model: self.model.clone(),
            params,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 20 || &b[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")) as usize;
        let body = b
            .get(20..)
            .filter(|r| r.len() >= hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(e.to_string()))?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(Error::Format("checkpoint data is not a whole number of f64".into()));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[f64]> {
            let s = data
                .get(at..at + n)
                .ok_or_else(|| Error::Format("truncated checkpoint data".into()))?;
            at += n;
            Ok(s)
        };
        let mut clouds = Vec::with_capacity(header.clouds.len());
        for ch in &header.clouds {
            let row = 11 + 3 * ch.sh + ch.conf;
            let mut gs = Vec::with_capacity(ch.count);
            for _ in 0..ch.count {
                let r = take(row)?;
                gs.push(Gaussian3D {
                    center: [r[0], r[1], r[2]],
                    rotation: Quaternion::from_array([r[3], r[4], r[5], r[6]])?,
                    log_scale: [r[7], r[8], r[9]],
                    opacity_logit: r[10],
                    sh: r[11..11 + 3 * ch.sh].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    confidence: r[11 + 3 * ch.sh..].to_vec(),
                });
            }
            let mut c = GaussianCloud::new(gs);
            c.set_dynamic_flags(ch.dynamic.clone())?;
            c.set_generation(ch.generation);
            clouds.push(c);
        }
        let params = match &header.params {
            Some(segs) => {
                let mut ps = ParamSet::new();
                for s in segs {
                    let v = take(s.len)?;
                    ps.add(s.name.clone(), v);
                }
                Some(ps)
            }
            None => None,
        };
        if at != data.len() {
            return Err(Error::Format(format!("{} trailing values in checkpoint", data.len() - at)));
        }
        header.config.validate()?;
        Ok(Checkpoint {
            config: header.config,
            clouds,
            model: header.model,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
