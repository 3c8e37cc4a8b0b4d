//! Folder-level scoring with per-image CSV output.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{PdmError, Result};
use crate::image::{list_images, load_image, ImagePlane};
use crate::metrics::{psnr, shifted_score, ssim};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub filename: String,
    pub psnr: f64,
    pub ssim: f64,
    pub shifted_psnr: f64,
    pub shifted_ssim: f64,
    /// Externally computed scores merged by filename.
    pub external: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    pub max_shift: usize,
    pub border_crop: usize,
}

/// Scores one SR image against its ground truth. Plain scores use the same
/// border crop as the shifted search.
pub fn score_pair(name: &str, sr: &ImagePlane, gt: &ImagePlane, max_shift: usize, border: usize) -> Result<EvalRow> {
    if sr.shape() != gt.shape() {
        return Err(PdmError::Shape(format!(
            "{name}: SR image {:?} and ground truth {:?} differ",
            sr.shape(),
            gt.shape()
        )));
    }
    let (_, h, w) = gt.shape();
    if 2 * border >= h || 2 * border >= w {
        return Err(PdmError::Shape(format!("{name}: border {border} leaves nothing of {h}x{w}")));
    }
    let a = sr.crop(border, border, h - 2 * border, w - 2 * border)?;
    let b = gt.crop(border, border, h - 2 * border, w - 2 * border)?;
    let shifted = shifted_score(sr, gt, max_shift, border)?;
    Ok(EvalRow {
        filename: name.to_string(),
        psnr: psnr(&a, &b, 1.0)?,
        ssim: ssim(&a, &b)?,
        shifted_psnr: shifted.psnr,
        shifted_ssim: shifted.ssim,
        external: BTreeMap::new(),
    })
}

/// Scores named SR images against same-named files in `gt_dir`.
pub fn evaluate_images(
    images: Vec<(String, ImagePlane)>,
    gt_dir: &Path,
    max_shift: usize,
    border: usize,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(PdmError::Empty("no SR images to evaluate".into()));
    }
    let rows = images
        .into_iter()
        .map(|(name, sr)| {
            let gt = load_image(&gt_dir.join(&name))?;
            score_pair(&name, &sr, &gt, max_shift, border)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean: mean_row(&rows),
        rows,
        max_shift,
        border_crop: border,
    })
}

/// Scores every PNG of `sr_dir` against `gt_dir`.
pub fn evaluate_folders(sr_dir: &Path, gt_dir: &Path, max_shift: usize, border: usize) -> Result<EvalReport> {
    let images = list_images(sr_dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().expect("listed file").to_string_lossy().into_owned();
            Ok((name, load_image(&p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_images(images, gt_dir, max_shift, border)
}

fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    let mut external = BTreeMap::new();
    for r in rows {
        for (k, v) in &r.external {
            *external.entry(k.clone()).or_insert(0.0) += v / n;
        }
    }
    EvalRow {
        filename: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        shifted_psnr: rows.iter().map(|r| r.shifted_psnr).sum::<f64>() / n,
        shifted_ssim: rows.iter().map(|r| r.shifted_ssim).sum::<f64>() / n,
        external,
    }
}

impl EvalReport {
    /// Merges a CSV of external scores (`filename,<metric>,...`) by filename.
    pub fn merge_external(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| PdmError::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| PdmError::format(path, "empty file"))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        if header.first().map(String::as_str) != Some("filename") || header.len() < 2 {
            return Err(PdmError::format(path, "header must be `filename,<metric>,...`"));
        }
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != header.len() {
                return Err(PdmError::format(path, format!("row {line:?} has {} fields", f.len())));
            }
            let row = self
                .rows
                .iter_mut()
                .find(|r| r.filename == f[0])
                .ok_or_else(|| PdmError::format(path, format!("unknown image {:?}", f[0])))?;
            for (k, v) in header[1..].iter().zip(&f[1..]) {
                let v: f64 = v
                    .parse()
                    .map_err(|_| PdmError::format(path, format!("bad number {v:?}")))?;
                row.external.insert(k.clone(), v);
            }
        }
        self.mean = mean_row(&self.rows);
        Ok(())
    }

    /// `filename,psnr,ssim,shifted_psnr,shifted_ssim[,external...]` with a
    /// final `mean` row.
    pub fn to_csv(&self) -> String {
        let ext: Vec<&String> = self.mean.external.keys().collect();
        let mut out = String::from("filename,psnr,ssim,shifted_psnr,shifted_ssim");
        for k in &ext {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.filename, r.psnr, r.ssim, r.shifted_psnr, r.shifted_ssim
            ));
            for k in &ext {
                match r.external.get(*k) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}
