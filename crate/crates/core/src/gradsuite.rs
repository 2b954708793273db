//! Finite-difference checks of every training objective on a small scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ad::{grad_check, GradCheckOptions, GradCheckReport, Objective, ParamSet, Params, Real};
use crate::config::{FieldConfig, FlowLoss, RasterMode, TrainConfig};
use crate::deform::DeformModel;
use crate::error::Result;
use crate::losses::{total_loss_deform, total_loss_iterative, LossParts};
use crate::synth::{generate, BlobShape, BlobSpec, Motion, NoiseSpec, RigSpec, SceneSpec};
use crate::train::{assemble, deform_views, DeformStep, IterativeFrame, CONF};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Color,
    Flow,
    Physical,
    Velocity,
    Total,
}

struct Pick<'a, O> {
    inner: &'a O,
    term: Term,
}

fn pick<R: Real>(parts: &LossParts<R>, term: Term) -> R {
    match term {
        Term::Color => parts.color,
        Term::Flow => parts.flow,
        Term::Physical => parts.physical,
        Term::Velocity => parts.velocity,
        Term::Total => unreachable!("totals are assembled by the caller"),
    }
}

impl Objective for Pick<'_, IterativeFrame<'_>> {
    fn eval<R: Real>(&self, p: &Params<'_, R>) -> Result<R> {
        let parts = self.inner.parts(p)?;
        Ok(match self.term {
            Term::Total => total_loss_iterative(&parts, self.inner.lambda_p, self.inner.lambda_f).0,
            t => pick(&parts, t),
        })
    }
}

impl Objective for Pick<'_, DeformStep<'_>> {
    fn eval<R: Real>(&self, p: &Params<'_, R>) -> Result<R> {
        let parts = self.inner.parts(p)?;
        Ok(match self.term {
            Term::Total => total_loss_deform(&parts, self.inner.lambda_f).0,
            t => pick(&parts, t),
        })
    }
}

/// Two views of a 3-frame, 16×16 scene: 12 moving and 12 static Gaussians.
pub fn suite_scene() -> SceneSpec {
    let blob = |center: [f64; 3], color, motion| BlobSpec {
        center,
        count: 12,
        radius: 0.3,
        scale: 0.12,
        color,
        opacity: 0.8,
        shape: BlobShape::Ball,
        motion,
    };
    SceneSpec {
        frames: 3,
        width: 16,
        height: 16,
        background: [0.1, 0.1, 0.1],
        rig: RigSpec::Ring {
            views: 2,
            radius: 2.5,
            focal: 18.0,
            span_degrees: 40.0,
            elevation: 0.2,
        },
        noise: NoiseSpec::default(),
        backdrop: None,
        blobs: vec![
            blob([-0.3, 0.0, 0.0], [0.9, 0.3, 0.2], Motion::Linear { velocity: [0.12, 0.03, 0.02] }),
            blob([0.35, 0.1, 0.2], [0.2, 0.5, 0.9], Motion::Static),
        ],
    }
}

fn suite_config() -> TrainConfig {
    TrainConfig {
        raster: RasterMode::Exact,
        field: FieldConfig {
            f_dim: 4,
            resolutions: vec![4, 6],
            width: 12,
        },
        ..TrainConfig::default()
    }
}

fn jitter(ps: &mut ParamSet, name: &str, amp: f64, rng: &mut ChaCha8Rng) {
    if let Some(id) = ps.id(name) {
        for v in ps.get_mut(id) {
            *v += rng.random_range(-amp..amp);
        }
    }
}

/// Runs every check; `max_per_segment` bounds the coordinates probed per
/// parameter segment. The step is small enough that ReLU and L1 kinks are
/// rarely straddled; gradients below `1e-6` are compared against that
/// floor since their central differences are dominated by roundoff.
pub fn run(seed: u64, max_per_segment: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let gt = generate(&suite_scene(), seed)?;
    let ds = gt.dataset();
    let cfg = suite_config();
    let opts = GradCheckOptions {
        max_per_segment: Some(max_per_segment),
        step: 1e-5,
        floor: 1e-6,
        tolerance: 1e-4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d2c);
    let mut out = Vec::new();

    let prev = &gt.states[0];
    let mut ps = ParamSet::new();
    let mut frame = IterativeFrame::prepare(&ds, prev, 1, &cfg, &mut ps)?;
    frame.lambda_f = 0.05;
    if let Some(id) = frame.layout.pos {
        let next = gt.states[1].centers();
        for (i, v) in ps.get_mut(id).iter_mut().enumerate() {
            *v = 0.5 * (*v + next[i / 3][i % 3]) + rng.random_range(-0.01..0.01);
        }
    }
    jitter(&mut ps, CONF, 0.5, &mut rng);
    for (name, term, flow) in [
        ("color_dynamic", Term::Color, FlowLoss::Kl),
        ("flow_kl", Term::Flow, FlowLoss::Kl),
        ("physical", Term::Physical, FlowLoss::Kl),
        ("total_iterative", Term::Total, FlowLoss::Kl),
    ] {
        frame.flow_loss = flow;
        let obj = Pick { inner: &frame, term };
        out.push((name.to_string(), grad_check(&obj, &ps, &opts)?));
    }

    let canonical = gt.states[0].clone();
    let (lo, hi) = canonical.bounds().expect("non-empty scene");
    let model = DeformModel::with_sizes(
        ds.frames(),
        lo.map(|v| v - 0.3),
        hi.map(|v| v + 0.3),
        cfg.field.f_dim,
        cfg.field.resolutions.clone(),
        cfg.field.width,
    )?;
    let mut mps = ParamSet::new();
    model.register(&mut mps, &mut rng);
    let mut dp = assemble(&canonical, ds.views(), &mps)?;
    for name in [crate::deform::HEX, crate::deform::DECODER, crate::deform::VELOCITY] {
        jitter(&mut dp.ps, name, 0.05, &mut rng);
    }
    jitter(&mut dp.ps, CONF, 0.5, &mut rng);
    let views = deform_views(&ds, &cfg, &model, &dp, &canonical, 2, true, &cfg.raster.config())?;
    let step = DeformStep {
        model: &model,
        segs: dp.segs,
        layout: &dp.layout,
        conf: dp.conf,
        canonical: &canonical,
        frame: 2,
        views,
        background: ds.background,
        raster: cfg.raster.config(),
        lambda_c: cfg.loss.lambda_c,
        lambda_f: 0.05,
        flow_loss: FlowLoss::Kl,
        injector: true,
    };
    for (name, term) in [("velocity", Term::Velocity), ("total_deform", Term::Total)] {
        let obj = Pick { inner: &step, term };
        out.push((name.to_string(), grad_check(&obj, &dp.ps, &opts)?));
    }
    Ok(out)
}
