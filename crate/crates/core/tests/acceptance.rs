//! Acceptance checks. Each test prints one `ACCEPTANCE` line with its
//! measured values and the pinned tolerance. A FAIL line only fails the
//! test when `ACCEPTANCE_STRICT` is set.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{Matrix2, Matrix3, Quaternion as NQuat, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowsplat::ad::ParamSet;
use flowsplat::camera::{PinholeCamera, RigidTransform};
use flowsplat::checkpoint::Checkpoint;
use flowsplat::config::{TrainConfig, Variant};
use flowsplat::correspondence::{foreground_search, gaussian_flows, predicted_flows, rendered_flow, FlowField2D, SearchOptions};
use flowsplat::deform::DeformModel;
use flowsplat::gaussian::{Gaussian3D, GaussianCloud, Quaternion, SH_C0};
use flowsplat::image::ImageBuf;
use flowsplat::io::{decode_depth, decode_flo, decode_ply, encode_depth, encode_flo, encode_ply, read_flo, write_png};
use flowsplat::losses::{dynamic_map_from_flow, Schedule};
use flowsplat::metrics::{flow_to_color, iou, psnr};
use flowsplat::raster::{render, RasterConfig};
use flowsplat::synth::{self, corrupt_flow, Dataset, GroundTruth};
use flowsplat::train::{self, init_cloud, train_deform, trajectory_epe, DeformResult};

const C1_TOL: f64 = 1e-5;
const C1_LIMIT: Duration = Duration::from_secs(10);
const C2_TOL: f64 = 1e-4;
const C2_LIMIT: Duration = Duration::from_secs(120);
const C3_TOL_PX: f64 = 1e-6;
const C4_RENDERED_MIN_DEV: f64 = 0.5;
const C4_FHAT_MAX_DEV: f64 = 0.05;
const C5_PSNR_SLACK: f64 = 0.1;
const C5_LIMIT: Duration = Duration::from_secs(30 * 60);
const C6_SIGMA: f64 = 1.0;
const C6_OUTLIERS: f64 = 0.1;
const C8_RAW_MIN: f64 = 0.2;
const C8_REFINED_MAX: f64 = 0.02;
const C8_IOU_MIN: f64 = 0.7;
const C8_MAP_THRESHOLD: f64 = 0.5;
const SEEDS: [u64; 3] = [0, 1, 2];

fn report(line: String) {
    writeln!(std::io::stderr(), "{line}").unwrap();
}

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    report(format!("ACCEPTANCE C{id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" }));
    if !pass && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        panic!("criterion {id} ({name}) failed: {detail}");
    }
}

fn artifact_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

// ---- 1. rasterizer oracle ------------------------------------------------

fn oracle_render(cloud: &GaussianCloud, cam: &PinholeCamera, bg: [f64; 3]) -> Vec<f64> {
    let r = Matrix3::from_fn(|i, j| cam.world_to_cam.rotation[i][j]);
    let t = Vector3::from(cam.world_to_cam.translation);
    let mut items = Vec::new();
    for g in &cloud.gaussians {
        let p = r * Vector3::from(g.center) + t;
        if p.z <= cam.near {
            continue;
        }
        let q = g.rotation.to_array();
        let rot = UnitQuaternion::from_quaternion(NQuat::new(q[0], q[1], q[2], q[3])).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::from(g.scale()));
        let m = rot.matrix() * s;
        let sigma = m * m.transpose();
        let j = nalgebra::Matrix2x3::new(
            cam.fx / p.z,
            0.0,
            -cam.fx * p.x / (p.z * p.z),
            0.0,
            cam.fy / p.z,
            -cam.fy * p.y / (p.z * p.z),
        );
        let cov = j * r * sigma * r.transpose() * j.transpose() + Matrix2::identity() * 0.3;
        let Some(inv) = cov.try_inverse() else { continue };
        let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
        let color = g.sh[0].map(|c| (c * SH_C0 + 0.5).clamp(0.0, 1.0));
        items.push((p.z, mean, inv, g.opacity(), color));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(cam.width * cam.height * 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut acc = [0.0; 3];
            for (_, mean, inv, o, c) in &items {
                let d = px - mean;
                let a = (o * (-0.5 * (d.transpose() * inv * d)[0]).exp()).min(0.99);
                for k in 0..3 {
                    acc[k] += c[k] * a * trans;
                }
                trans *= 1.0 - a;
            }
            for k in 0..3 {
                out.push(acc[k] + bg[k] * trans);
            }
        }
    }
    out
}

#[test]
fn c1_rasterizer_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let gs = (0..n)
            .map(|_| {
                let q = Quaternion::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .unwrap();
                Gaussian3D::new(
                    [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.8)],
                    q,
                    [rng.random_range(0.03..0.25), rng.random_range(0.03..0.25), rng.random_range(0.03..0.25)],
                    rng.random_range(0.05..1.0),
                    [rng.random(), rng.random(), rng.random()],
                )
                .unwrap()
            })
            .collect();
        let cloud = GaussianCloud::new(gs);
        let eye = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -2.5];
        let pose = RigidTransform::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0]).unwrap();
        let cam = PinholeCamera::centered(rng.random_range(25.0..45.0), 32, 32, pose).unwrap();
        let bg = [rng.random(), rng.random(), rng.random()];
        let got = render(&cloud, &cam, bg, &RasterConfig::default()).unwrap();
        let want = oracle_render(&cloud, &cam, bg);
        for (a, b) in got.color.data.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    let took = start.elapsed();
    verdict(
        1,
        "rasterizer oracle",
        worst <= C1_TOL && took < C1_LIMIT,
        format!("max |diff| {worst:.3e} (tol {C1_TOL:.0e}), {:.2}s (limit {}s)", took.as_secs_f64(), C1_LIMIT.as_secs()),
    );
}

// ---- 2. gradient suite ---------------------------------------------------

#[test]
fn c2_gradient_suite() {
    let start = Instant::now();
    let reports = flowsplat::gradsuite::run(0, 40).unwrap();
    let took = start.elapsed();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let detail: Vec<String> = reports.iter().map(|(n, r)| format!("{n}={:.1e}", r.max_rel_err)).collect();
    verdict(
        2,
        "gradient suite",
        worst <= C2_TOL && took < C2_LIMIT,
        format!("{} (tol {C2_TOL:.0e}), {:.1}s (limit {}s)", detail.join(" "), took.as_secs_f64(), C2_LIMIT.as_secs()),
    );
}

// ---- 3. correspondence exactness -----------------------------------------

fn candidate_flow_errors(gt: &GroundTruth, analytic: impl Fn(&PinholeCamera) -> [f64; 2]) -> (f64, usize) {
    let opts = SearchOptions::default();
    let (mut worst, mut count) = (0.0f64, 0usize);
    for t in 1..gt.frames() {
        let (prev, cam_prev, cam) = (&gt.states[t - 1], &gt.cameras[t - 1][0], &gt.cameras[t][0]);
        let out = render(prev, cam_prev, gt.spec.background, &synth::raster_config()).unwrap();
        let cands = foreground_search(&out.depth, &out.alpha, cam_prev, prev, &opts).unwrap();
        let preds = predicted_flows(&cands, &prev.centers(), &gt.states[t].centers(), cam_prev, cam, prev.generation()).unwrap();
        let want = analytic(cam_prev);
        for cf in preds.iter().flatten() {
            worst = worst.max((cf.flow[0] - want[0]).abs()).max((cf.flow[1] - want[1]).abs());
            count += 1;
        }
    }
    (worst, count)
}

#[test]
fn c3_correspondence_is_exact() {
    let step = [0.05, -0.03];
    let gt = synth::generate(&synth::rigid_translation_scene(step), 0).unwrap();
    // fronto-parallel sheet at depth z: every point moves by f·(R d)/z pixels
    let (moving, n) = candidate_flow_errors(&gt, |cam| {
        let r = cam.world_to_cam.rotation;
        let z = cam.world_to_cam.apply([0.0; 3])[2];
        let d = [0, 1].map(|k| r[k][0] * step[0] + r[k][1] * step[1]);
        [cam.fx * d[0] / z, cam.fy * d[1] / z]
    });
    let still = synth::generate(&synth::rigid_translation_scene([0.0, 0.0]), 0).unwrap();
    let (zero, m) = candidate_flow_errors(&still, |_| [0.0, 0.0]);
    verdict(
        3,
        "correspondence exactness",
        n > 0 && m > 0 && moving <= C3_TOL_PX && zero == 0.0,
        format!("translation max err {moving:.2e} px over {n} candidates (tol {C3_TOL_PX:.0e}); static max |F̂| {zero:e} over {m}"),
    );
}

// ---- 4. occluder study -----------------------------------------------------

#[test]
fn c4_rendered_flow_is_squeezed_but_correspondence_is_not() {
    let gt = synth::generate(&synth::occluder_scene(), 0).unwrap();
    let (cam0, cam1) = (&gt.cameras[0][0], &gt.cameras[1][0]);
    let cfg = synth::raster_config();
    let prev = &gt.states[0];
    let next = gt.states[1].centers();
    let moving: Vec<bool> = gt.dynamic.clone();
    let only = |keep: bool| {
        GaussianCloud::new(
            prev.gaussians
                .iter()
                .zip(&moving)
                .filter(|(_, &m)| m == keep)
                .map(|(g, _)| g.clone())
                .collect(),
        )
    };
    let occ_alpha = render(&only(false), cam0, [0.0; 3], &cfg).unwrap().alpha;
    let back_alpha = render(&only(true), cam0, [0.0; 3], &cfg).unwrap().alpha;
    let full = render(prev, cam0, [0.0; 3], &cfg).unwrap();
    let rendered = rendered_flow(prev, &next, cam0, cam1, &cfg).unwrap();
    let per = gaussian_flows(&prev.centers(), &next, cam0, cam1, &vec![true; prev.len()]).unwrap();
    // the translating sheet is fronto-parallel: one analytic flow for all of it
    let v = match gt.spec.blobs[0].motion {
        synth::Motion::Linear { velocity } => velocity,
        _ => unreachable!(),
    };
    let r = cam0.world_to_cam.rotation;
    let z = cam0.world_to_cam.apply([0.0, 0.0, gt.spec.blobs[0].center[2]])[2];
    let truth = [0, 1].map(|k| (r[k][0] * v[0] + r[k][1] * v[1] + r[k][2] * v[2]) * [cam0.fx, cam0.fy][k] / z);
    let tmag = truth[0].hypot(truth[1]);

    let (w, h) = (cam0.width, cam0.height);
    let mut fhat = FlowField2D::zeros(w, h);
    let mut csv = String::from("u,v,occluded,gt_u,gt_v,rendered_u,rendered_v,fhat_u,fhat_v,rendered_rel_err,fhat_rel_err\n");
    let (mut r_dev, mut f_dev, mut n) = (0.0, 0.0f64, 0usize);
    for i in 0..w * h {
        let back = full.contributors[i]
            .iter()
            .filter(|c| moving[c.index])
            .max_by(|a, b| a.weight.total_cmp(&b.weight));
        let f = back.and_then(|c| per[c.index]).unwrap_or([0.0; 2]);
        fhat.data[i] = f;
        let occluded = occ_alpha.data[i] >= 0.6 && back_alpha.data[i] >= 0.5;
        let rd = rendered.data[i];
        let re = (rd[0] - truth[0]).hypot(rd[1] - truth[1]) / tmag;
        let fe = (f[0] - truth[0]).hypot(f[1] - truth[1]) / tmag;
        if occluded {
            r_dev += re;
            f_dev = f_dev.max(fe);
            n += 1;
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{re:.6},{fe:.6}\n",
            i % w,
            i / w,
            occluded as u8,
            truth[0],
            truth[1],
            rd[0],
            rd[1],
            f[0],
            f[1]
        ));
    }
    let r_dev = r_dev / n.max(1) as f64;
    let dir = artifact_dir();
    let max_mag = Some(tmag * 1.5);
    let panel = flow_to_color(&rendered, max_mag).hconcat(&flow_to_color(&fhat, max_mag)).unwrap();
    write_png(&dir.join("occluder_flow.png"), &panel).unwrap();
    std::fs::write(dir.join("occluder_flow.csv"), csv).unwrap();
    verdict(
        4,
        "occluder flow study",
        n > 0 && r_dev > C4_RENDERED_MIN_DEV && f_dev <= C4_FHAT_MAX_DEV,
        format!(
            "{n} occluded px: rendered mean dev {:.1}% (need > {:.0}%), F̂ max dev {:.2e}% (need <= {:.0}%); artifacts in {}",
            100.0 * r_dev,
            100.0 * C4_RENDERED_MIN_DEV,
            100.0 * f_dev,
            100.0 * C4_FHAT_MAX_DEV,
            dir.display()
        ),
    );
}

// ---- 5-8. training studies -----------------------------------------------

struct Run {
    epe: f64,
    psnr: f64,
    count: usize,
    took: Duration,
    result: DeformResult,
}

static TRAINING: Mutex<()> = Mutex::new(());

fn train_variant(gt: &GroundTruth, ds: &Dataset, v: Variant, seed: u64) -> Run {
    let _turn = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut cfg = TrainConfig::default().with_variant(v);
    cfg.seed = seed;
    let gtt = gt.trajectories();
    let init = init_cloud(&gtt[0], ds, &cfg).unwrap();
    let result = train_deform(ds, init, &cfg).unwrap();
    let tr = result.state.trajectories(ds.frames()).unwrap();
    let op: Vec<f64> = result.state.canonical.gaussians.iter().map(|g| g.opacity()).collect();
    let epe = trajectory_epe(&tr, &op, &gtt).unwrap();
    let mut p = 0.0;
    for t in 0..ds.frames() {
        let (cam, img) = gt.held_out(t).unwrap();
        let out = render(&result.state.deformed(t).unwrap(), &cam, ds.background, &cfg.raster.config()).unwrap();
        p += psnr(&out.color, &img).unwrap() / ds.frames() as f64;
    }
    Run {
        epe,
        psnr: p,
        count: result.report.final_count(),
        took: start.elapsed(),
        result,
    }
}

struct Study {
    gts: Vec<GroundTruth>,
    runs: Vec<Vec<Run>>,
    took: Duration,
}

fn ablation() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let mut gts = Vec::new();
        let mut runs = Vec::new();
        for seed in SEEDS {
            let gt = synth::generate(&synth::moving_blob_scene(), seed).unwrap();
            let ds = gt.dataset();
            let row: Vec<Run> = Variant::ALL.iter().map(|&v| train_variant(&gt, &ds, v, seed)).collect();
            for (v, r) in Variant::ALL.iter().zip(&row) {
                report(format!(
                    "  seed {seed} {:<12} trajectory EPE {:.5}  held-out PSNR {:.3} dB  count {}",
                    v.name(),
                    r.epe,
                    r.psnr,
                    r.count
                ));
            }
            gts.push(gt);
            runs.push(row);
        }
        Study {
            took: runs.iter().flatten().map(|r: &Run| r.took).sum(),
            gts,
            runs,
        }
    })
}

fn idx(v: Variant) -> usize {
    Variant::ALL.iter().position(|&x| x == v).unwrap()
}

#[test]
fn c5_flow_supervision_improves_motion_without_hurting_quality() {
    let s = ablation();
    let (full, l1, noinj, base) = (idx(Variant::Full), idx(Variant::L1Flow), idx(Variant::NoInjector), idx(Variant::Baseline));
    let mut lines = Vec::new();
    let mut headline = true;
    for (k, row) in s.runs.iter().enumerate() {
        let ok = row[full].epe < row[base].epe && row[full].psnr >= row[base].psnr - C5_PSNR_SLACK;
        headline &= ok;
        lines.push(format!(
            "seed {}: EPE full {:.4} vs base {:.4}, PSNR full {:.2} vs base {:.2}",
            SEEDS[k], row[full].epe, row[base].epe, row[full].psnr, row[base].psnr
        ));
    }
    let wins = |a: usize, b: usize| s.runs.iter().filter(|r| r[a].epe <= r[b].epe).count();
    let pairs = [(full, l1), (full, noinj), (l1, base), (noinj, base)];
    let ordering: Vec<usize> = pairs.iter().map(|&(a, b)| wins(a, b)).collect();
    let ordered = ordering.iter().all(|&w| w >= 2);
    verdict(
        5,
        "ablation ordering on the moving blob",
        headline && ordered && s.took <= C5_LIMIT,
        format!(
            "{}; pair wins (full>l1, full>noinj, l1>base, noinj>base) {:?} of 3 (need >= 2); {:.0}s (limit {}s)",
            lines.join("; "),
            ordering,
            s.took.as_secs_f64(),
            C5_LIMIT.as_secs()
        ),
    );
}

#[test]
fn c7_flow_does_not_grow_the_cloud() {
    let s = ablation();
    let (full, base) = (idx(Variant::Full), idx(Variant::Baseline));
    let counts: Vec<(usize, usize)> = s.runs.iter().map(|r| (r[full].count, r[base].count)).collect();
    verdict(
        7,
        "Gaussian count",
        counts.iter().all(|(f, b)| f <= b),
        format!("(full, baseline) per seed {counts:?}"),
    );
}

#[test]
fn c6_kl_is_robust_to_corrupted_flow() {
    let mut lines = Vec::new();
    let mut kl_wins = 0;
    for seed in SEEDS {
        let gt = synth::generate(&synth::moving_blob_scene(), seed).unwrap();
        let mut ds = gt.dataset();
        for (t, row) in ds.flows.iter_mut().enumerate() {
            for (v, f) in row.iter_mut().enumerate() {
                let clean = f.take().unwrap();
                *f = Some(corrupt_flow(&clean, C6_SIGMA, C6_OUTLIERS, seed * 1000 + (t * 10 + v) as u64).unwrap());
            }
        }
        let kl = train_variant(&gt, &ds, Variant::Full, seed).epe;
        let l1 = train_variant(&gt, &ds, Variant::L1Flow, seed).epe;
        kl_wins += (kl <= l1) as usize;
        lines.push(format!("seed {seed}: KL {kl:.4} vs L1 {l1:.4}"));
    }
    verdict(
        6,
        "KL robustness to corrupted flow",
        2 * kl_wins > SEEDS.len(),
        format!("{} (σ={C6_SIGMA}, outliers {C6_OUTLIERS}); KL <= L1 on {kl_wins}/3", lines.join("; ")),
    );
}

#[test]
fn c8_refined_map_separates_camera_from_object_motion() {
    let gt = synth::generate(&synth::static_arc_scene(), 0).unwrap();
    let ds = gt.dataset();
    let run = train_variant(&gt, &ds, Variant::Full, 0);
    let cfg = TrainConfig::default();
    let raster = cfg.raster.config();
    let frames = ds.frames();
    let (mut raw, mut refined) = (0.0, 0.0);
    for t in 1..frames {
        raw += dynamic_map_from_flow(ds.flow_into(t, 0).unwrap()).mean() / (frames - 1) as f64;
        let m = run.result.state.refined_map(t, &ds.cameras[t][0], cfg.loss.refine_floor, &raster).unwrap();
        refined += m.mean() / (frames - 1) as f64;
    }
    let s = ablation();
    let (gt0, full) = (&s.gts[0], &s.runs[0][idx(Variant::Full)]);
    let mut overlap = 0.0;
    for t in 1..gt0.frames() {
        let m = full.result.state.refined_map(t, &gt0.cameras[t][0], cfg.loss.refine_floor, &raster).unwrap();
        let pred: Vec<bool> = m.data.iter().map(|&v| v >= C8_MAP_THRESHOLD).collect();
        overlap += iou(&pred, &gt0.motion_footprint(t, 0).unwrap()) / (gt0.frames() - 1) as f64;
    }
    verdict(
        8,
        "refined dynamic map",
        raw > C8_RAW_MIN && refined < C8_REFINED_MAX && overlap > C8_IOU_MIN,
        format!(
            "static arc raw mean {raw:.3} (need > {C8_RAW_MIN}), refined mean {refined:.4} (need < {C8_REFINED_MAX}); moving blob IoU {overlap:.3} (need > {C8_IOU_MIN})"
        ),
    );
}

// ---- 9. schedule and iterative invariants ----------------------------------

#[test]
fn c9_schedule_and_frozen_attributes() {
    let s = Schedule::spanning(1000, 0.2, 0.1, 0.001).unwrap();
    let mid = (s.warmup_end + s.decay_end) / 2;
    let sched_ok = s.lambda(0) == 0.0
        && s.lambda(s.warmup_end) == s.lambda_max
        && (s.lambda(mid) - 0.5 * (s.lambda_max + s.lambda_min)).abs() <= 1e-12;

    let gt = synth::generate(&synth::moving_blob_scene(), 5).unwrap();
    let ds = gt.dataset();
    let mut cfg = TrainConfig::default();
    cfg.budgets.static_iters = 40;
    cfg.budgets.per_frame = 10;
    let init = init_cloud(&gt.trajectories()[0], &ds, &cfg).unwrap();
    let r = train::train_iterative(&ds, init, &cfg).unwrap();
    let first = &r.states[0];
    let mut frozen = true;
    let mut counts = Vec::new();
    for st in &r.states {
        counts.push(st.len());
        frozen &= st.len() == first.len();
        for (a, b) in st.gaussians.iter().zip(&first.gaussians) {
            frozen &= a.opacity_logit.to_bits() == b.opacity_logit.to_bits()
                && a.log_scale.map(f64::to_bits) == b.log_scale.map(f64::to_bits)
                && a.sh.iter().flatten().map(|v| v.to_bits()).eq(b.sh.iter().flatten().map(|v| v.to_bits()));
        }
    }
    let moved = r.states.last().unwrap().centers() != first.centers();
    verdict(
        9,
        "schedule and iterative invariants",
        sched_ok && frozen && moved,
        format!(
            "λ(0)={} λ(warmup)={} λ(mid)={:.6} (want {:.6}); counts {counts:?}; opacity/scale/SH bitwise frozen: {frozen}; centers moved: {moved}",
            s.lambda(0),
            s.lambda(s.warmup_end),
            s.lambda(mid),
            0.5 * (s.lambda_max + s.lambda_min)
        ),
    );
}

// ---- 10. file roundtrips ---------------------------------------------------

#[test]
fn c10_roundtrips_are_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let flow = FlowField2D::from_vec(7, 5, (0..35).map(|_| [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)]).collect()).unwrap();
    let fb = encode_flo(&flow);
    let flo_ok = encode_flo(&decode_flo(&fb).unwrap()) == fb;

    let depth = ImageBuf::from_vec(6, 4, 1, (0..24).map(|_| rng.random_range(0.5..4.0)).collect()).unwrap();
    let db = encode_depth(&depth).unwrap();
    let depth_ok = encode_depth(&decode_depth(&db).unwrap()).unwrap() == db;

    let cloud = synth::generate(&synth::moving_blob_scene(), 0).unwrap().states[0].clone();
    let pb = encode_ply(&cloud).unwrap();
    let ply_ok = encode_ply(&decode_ply(&pb).unwrap()).unwrap() == pb;

    let model = DeformModel::new(5, [-1.0; 3], [1.0; 3]).unwrap();
    let mut ps = ParamSet::new();
    model.register(&mut ps, &mut rng);
    let ck = Checkpoint {
        config: TrainConfig::default(),
        clouds: vec![cloud],
        model: Some(model),
        params: Some(ps),
    };
    let cb = ck.encode().unwrap();
    let ck_ok = Checkpoint::decode(&cb).unwrap().encode().unwrap() == cb;

    let golden = read_flo(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_3_4.flo")).unwrap();
    let golden_ok = golden.width == 1 && golden.height == 1 && golden.at(0, 0) == Some([3.0, 4.0]);
    verdict(
        10,
        "file roundtrips",
        flo_ok && depth_ok && ply_ok && ck_ok && golden_ok,
        format!("flo {flo_ok}, depth {depth_ok}, ply {ply_ok}, checkpoint {ck_ok}, golden (3,4) {golden_ok}"),
    );
}
