//! Image quality metrics and flow visualization.

use crate::correspondence::FlowField2D;
use crate::error::{Error, Result};
use crate::image::ImageBuf;

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/MSE)`, capped at 100 dB.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    a.check_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid 11×11 windows, averaged over channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    a.check_shape(b)?;
    if a.width < SSIM_WIN || a.height < SSIM_WIN {
        return Err(Error::Domain(format!(
            "SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = ((K1 * 1.0).powi(2), (K2 * 1.0).powi(2));
    let (ow, oh) = (a.width - SSIM_WIN + 1, a.height - SSIM_WIN + 1);
    let mut total = 0.0;
    for ch in 0..a.channels {
        let mut sum = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..SSIM_WIN {
                    for i in 0..SSIM_WIN {
                        let w = g[i] * g[j];
                        let va = a.at(x + i, y + j, ch);
                        let vb = b.at(x + i, y + j, ch);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / a.channels as f64)
}

/// Mean end-point error over pixels valid in both fields.
pub fn flow_epe(a: &FlowField2D, b: &FlowField2D) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Domain("flow fields differ in size".into()));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if a.valid[i] && b.valid[i] {
            s += (a.data[i][0] - b.data[i][0]).hypot(a.data[i][1] - b.data[i][1]);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Intersection over union of two boolean masks.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub frame: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-frame, per-view image metrics plus optional flow EPE (px) and
/// motion-label IoU. LPIPS is not computed and is written as `n/a`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub flow_epe: Option<f64>,
    pub label_iou: Option<f64>,
}

impl MetricReport {
    /// Compares `pred[t][v]` against `gt[t][v]`.
    pub fn compare(pred: &[Vec<ImageBuf>], gt: &[Vec<ImageBuf>]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Domain(format!("{} predicted frames, {} ground-truth frames", pred.len(), gt.len())));
        }
        let mut rows = Vec::new();
        for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Domain(format!("frame {t}: {} predicted views, {} expected", p.len(), g.len())));
            }
            for (v, (a, b)) in p.iter().zip(g).enumerate() {
                rows.push(MetricRow {
                    frame: t,
                    view: v,
                    psnr: psnr(a, b)?,
                    ssim: ssim(a, b)?,
                });
            }
        }
        Ok(MetricReport {
            rows,
            flow_epe: None,
            label_iou: None,
        })
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Columns frame, view, psnr, ssim, lpips; a final `mean` row also
    /// carries flow_epe and label_iou (empty when absent).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["frame", "view", "psnr", "ssim", "lpips", "flow_epe", "label_iou"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.frame.to_string(),
                r.view.to_string(),
                format!("{:.6}", r.psnr),
                format!("{:.6}", r.ssim),
                "n/a".into(),
                String::new(),
                String::new(),
            ])
            .map_err(err)?;
        }
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        w.write_record([
            "mean".into(),
            "mean".into(),
            format!("{:.6}", self.mean_psnr()),
            format!("{:.6}", self.mean_ssim()),
            "n/a".into(),
            opt(self.flow_epe),
            opt(self.label_iou),
        ])
        .map_err(err)?;
        w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))
    }
}

/// The 55-entry Middlebury colour wheel (RY 15, YG 6, GC 4, CB 11, BM 13, MR 6).
pub fn color_wheel() -> Vec<[f64; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(55);
    for i in 0..ry {
        w.push([255.0, (255 * i / ry) as f64, 0.0]);
    }
    for i in 0..yg {
        w.push([(255 - 255 * i / yg) as f64, 255.0, 0.0]);
    }
    for i in 0..gc {
        w.push([0.0, 255.0, (255 * i / gc) as f64]);
    }
    for i in 0..cb {
        w.push([0.0, (255 - 255 * i / cb) as f64, 255.0]);
    }
    for i in 0..bm {
        w.push([(255 * i / bm) as f64, 0.0, 255.0]);
    }
    for i in 0..mr {
        w.push([255.0, 0.0, (255 - 255 * i / mr) as f64]);
    }
    w
}

/// Position on the wheel (in entries, `[0, 54]`) of a flow direction.
pub fn wheel_position(u: f64, v: f64) -> f64 {
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    (a + 1.0) / 2.0 * 54.0
}

/// Middlebury colouring. Magnitudes are divided by `max_mag` (the field
/// maximum when `None`) and saturate at 1; zero flow is white; invalid
/// pixels are black.
pub fn flow_to_color(flow: &FlowField2D, max_mag: Option<f64>) -> ImageBuf {
    let wheel = color_wheel();
    let max = max_mag.unwrap_or_else(|| flow.magnitude().into_iter().fold(0.0, f64::max));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut img = ImageBuf::new(flow.width, flow.height, 3);
    for i in 0..flow.data.len() {
        if !flow.valid[i] {
            continue;
        }
        let (u, v) = (flow.data[i][0] * scale, flow.data[i][1] * scale);
        let rad = u.hypot(v).min(1.0);
        let fk = wheel_position(u, v);
        let k0 = fk.floor() as usize % 55;
        let k1 = (k0 + 1) % 55;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            img.data[3 * i + c] = 1.0 - rad * (1.0 - col);
        }
    }
    img
}
