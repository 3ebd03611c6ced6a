use super::{psnr, rmse, roi_report, ssim, RoiReport};
use crate::error::{input_err, Error, Result};
use crate::image::{Image, Window};
use crate::networks::load_generator;
use crate::tomo_sim::container::{export_png16, write_atomic};
use crate::tomo_sim::Dataset;
use crate::training::infer;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Name of the identity row (the sparse-view input scored against `x_d`).
pub const SPARSE_ROW: &str = "x_s";

/// Mean held-out metrics of one model against `x_d`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub model: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub rmse: f64,
    pub slices: usize,
}

/// Rows sorted by SSIM descending; models that could not be loaded are listed
/// separately with the reason.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub absent: Vec<(String, String)>,
}

/// Per-slice metrics averaged over `outputs`; each output is scored against
/// the `dense` image at the same position.
pub fn metrics_row(model: &str, outputs: &[Image], dense: &[Image]) -> Result<MetricsRow> {
    if outputs.len() != dense.len() || outputs.is_empty() {
        return Err(input_err!(
            "{model}: {} outputs for {} reference slices",
            outputs.len(),
            dense.len()
        ));
    }
    let n = outputs.len() as f64;
    let (mut s, mut p, mut r) = (0.0, 0.0, 0.0);
    for (o, d) in outputs.iter().zip(dense) {
        s += ssim(o, d)?;
        p += psnr(o, d)?;
        r += rmse(o, d)?;
    }
    Ok(MetricsRow {
        model: model.to_string(),
        ssim: s / n,
        psnr_db: p / n,
        rmse: r / n,
        slices: outputs.len(),
    })
}

impl MetricsTable {
    pub fn new(mut rows: Vec<MetricsRow>, absent: Vec<(String, String)>) -> Self {
        rows.sort_by(|a, b| b.ssim.total_cmp(&a.ssim).then_with(|| a.model.cmp(&b.model)));
        MetricsTable { rows, absent }
    }

    pub fn row(&self, model: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned plain-text table; RMSE is shown in units of 10⁻².
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .chain(self.absent.iter().map(|(m, _)| m.len()))
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut out = format!("{:<width$}  {:>8}  {:>10}  {:>12}\n", "model", "SSIM", "PSNR (dB)", "RMSE (1e-2)");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>10.2}  {:>12.4}",
                r.model,
                r.ssim,
                r.psnr_db,
                r.rmse * 100.0
            );
        }
        for (m, why) in &self.absent {
            let _ = writeln!(out, "{m:<width$}  absent ({why})");
        }
        out
    }

    /// `model,ssim,psnr_db,rmse` with RMSE in plain units. Absent models have
    /// empty value fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,ssim,psnr_db,rmse\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.model, r.ssim, r.psnr_db, r.rmse);
        }
        for (m, _) in &self.absent {
            let _ = writeln!(out, "{m},,,");
        }
        out
    }

    /// Parses [`Self::to_csv`] output back into `(model, Some([ssim, psnr_db, rmse]))`,
    /// with `None` for absent rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(String, Option<[f64; 3]>)>> {
        let mut lines = text.lines();
        if lines.next() != Some("model,ssim,psnr_db,rmse") {
            return Err(input_err!("metrics CSV has an unexpected header"));
        }
        lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(input_err!("metrics CSV line `{line}` does not have 4 fields"));
                }
                if f[1..].iter().all(|v| v.is_empty()) {
                    return Ok((f[0].to_string(), None));
                }
                let mut v = [0.0; 3];
                for (slot, s) in v.iter_mut().zip(&f[1..]) {
                    *slot = s.parse().map_err(|_| input_err!("bad number `{s}` in metrics CSV"))?;
                }
                Ok((f[0].to_string(), Some(v)))
            })
            .collect()
    }
}

/// Held-out slices with every model's outputs, and the resulting table.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub indices: Vec<usize>,
    pub sparse: Vec<Image>,
    pub dense: Vec<Image>,
    /// Default ROI of each held-out slice from the dataset manifest.
    pub rois: Vec<Option<Window>>,
    pub outputs: Vec<(String, Vec<Image>)>,
    pub table: MetricsTable,
}

/// Scores `x_s` and each `(name, checkpoint)` generator on the samples at
/// `indices`. A checkpoint that cannot be read becomes an absent row.
pub fn evaluate_models(dataset: &Dataset, indices: &[usize], checkpoints: &[(String, PathBuf)]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(input_err!("no held-out slices to evaluate"));
    }
    let mut sparse = Vec::with_capacity(indices.len());
    let mut dense = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = dataset.load(i)?;
        sparse.push(p.sparse);
        dense.push(p.dense);
    }
    let rois = indices.iter().map(|&i| dataset.manifest.samples[i].roi).collect();
    let mut rows = vec![metrics_row(SPARSE_ROW, &sparse, &dense)?];
    let mut outputs = Vec::new();
    let mut absent = Vec::new();
    for (name, path) in checkpoints {
        let mut g = match load_generator::<f32>(path) {
            Ok((g, _)) => g,
            Err(e @ (Error::Io { .. } | Error::Format { .. })) => {
                absent.push((name.clone(), e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let out = infer(&mut g, &sparse)?;
        rows.push(metrics_row(name, &out, &dense)?);
        outputs.push((name.clone(), out));
    }
    Ok(Evaluation {
        indices: indices.to_vec(),
        sparse,
        dense,
        rois,
        outputs,
        table: MetricsTable::new(rows, absent),
    })
}

/// Files written by [`write_report`].
#[derive(Clone, Debug, Serialize)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub csv: PathBuf,
    pub roi: Option<PathBuf>,
    pub difference_maps: Vec<PathBuf>,
    pub bar_chart: Option<PathBuf>,
}

/// ROI statistics on the first held-out slice, using `window` or the slice's
/// default ROI.
pub fn first_slice_roi(eval: &Evaluation, window: Option<Window>) -> Result<Option<RoiReport>> {
    let Some(window) = window.or(eval.rois[0]) else {
        return Ok(None);
    };
    let models: Vec<(String, Image)> = eval.outputs.iter().map(|(n, o)| (n.clone(), o[0].clone())).collect();
    roi_report(&eval.dense[0], &eval.sparse[0], &models, window).map(Some)
}

/// Writes the metrics table (text and CSV), ROI statistics, difference-map
/// PNGs and the ROI bar chart into `dir`.
pub fn write_report(dir: &Path, eval: &Evaluation, window: Option<Window>) -> Result<ReportFiles> {
    let roi = first_slice_roi(eval, window)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join("metrics.txt");
    write_atomic(&table, eval.table.to_text().as_bytes())?;
    let csv = dir.join("metrics.csv");
    write_atomic(&csv, eval.table.to_csv().as_bytes())?;
    let mut files = ReportFiles {
        table,
        csv,
        roi: None,
        difference_maps: Vec::new(),
        bar_chart: None,
    };
    let Some(roi) = roi else {
        return Ok(files);
    };
    let path = dir.join("roi.json");
    let json = serde_json::to_string_pretty(&roi).expect("roi report serializes") + "\n";
    write_atomic(&path, json.as_bytes())?;
    files.roi = Some(path);

    // One symmetric gray scale for every difference map: mid-gray is zero.
    let scale = roi
        .entries
        .iter()
        .flat_map(|e| e.difference.data())
        .fold(0.0f32, |m, v| m.max(v.abs()))
        .max(1e-6);
    for e in &roi.entries {
        let d = &e.difference;
        let shown = Image::from_fn(d.width(), d.height(), |x, y| 0.5 + 0.5 * d.get(x, y) / scale);
        let path = dir.join(format!("diff_{}.png", file_stem(&e.name)));
        export_png16(&path, &shown)?;
        files.difference_maps.push(path);
    }
    let path = dir.join("roi_bars.png");
    write_bar_chart(&path, &roi)?;
    files.bar_chart = Some(path);
    Ok(files)
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

const BAR_COLORS: [[u8; 3]; 6] = [
    [60, 60, 60],
    [200, 80, 60],
    [70, 130, 180],
    [90, 170, 90],
    [220, 160, 50],
    [140, 90, 170],
];

/// ROI mean as bars with ±std whiskers, one bar per entry in report order,
/// on a white RGB canvas. The y axis spans `[0, max(mean + std)]`.
pub fn write_bar_chart(path: &Path, roi: &RoiReport) -> Result<()> {
    const BAR: usize = 40;
    const GAP: usize = 20;
    const H: usize = 240;
    const MARGIN: usize = 20;
    let n = roi.entries.len();
    let w = MARGIN * 2 + n * BAR + n.saturating_sub(1) * GAP;
    let ch = H + 2 * MARGIN;
    let mut px = vec![255u8; w * ch * 3];
    let mut fill = |x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]| {
        for y in y0.min(ch)..y1.min(ch) {
            for x in x0.min(w)..x1.min(w) {
                px[(y * w + x) * 3..][..3].copy_from_slice(&c);
            }
        }
    };
    let top = roi.entries.iter().map(|e| e.mean + e.std).fold(0.0f64, f64::max).max(1e-9);
    let to_y = |v: f64| MARGIN + H - ((v / top).clamp(0.0, 1.0) * H as f64).round() as usize;
    fill(MARGIN / 2, w - MARGIN / 2, MARGIN + H, MARGIN + H + 1, [0, 0, 0]);
    for (k, e) in roi.entries.iter().enumerate() {
        let x0 = MARGIN + k * (BAR + GAP);
        fill(x0, x0 + BAR, to_y(e.mean), MARGIN + H, BAR_COLORS[k % BAR_COLORS.len()]);
        let (lo, hi) = (to_y(e.mean + e.std), to_y(e.mean - e.std));
        let mid = x0 + BAR / 2;
        fill(mid, mid + 1, lo, hi + 1, [0, 0, 0]);
        fill(mid - 6, mid + 7, lo, lo + 1, [0, 0, 0]);
        fill(mid - 6, mid + 7, hi, hi + 1, [0, 0, 0]);
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, ch as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&px).map_err(|e| Error::format(path, e.to_string()))
}
