//! Image-quality and quantification metrics.
//!
//! All voxel-wise metrics are evaluated on the mask of non-black reference
//! voxels. PSNR uses the masked reference maximum as its peak and is capped
//! at [`PSNR_CAP_DB`]; NRMSE is normalized by the masked reference L2 norm.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::volume::Volume3D;

pub const PSNR_CAP_DB: f64 = 300.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const METRICS_HEADER: &str = "volume_id,fraction,psnr_db,nrmse,ssim,z_tv,activity_ratio,mask_voxels";

/// Voxels kept for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    slices: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    fn check(&self, vol: &Volume3D, what: &str) -> Result<()> {
        ensure!(
            (vol.width(), vol.height(), vol.slices()) == (self.width, self.height, self.slices),
            Evaluation,
            "{what} is {}x{}x{} but the mask is {}x{}x{}",
            vol.width(),
            vol.height(),
            vol.slices(),
            self.width,
            self.height,
            self.slices
        );
        Ok(())
    }
}

/// Mask of reference voxels above zero.
pub fn mask_black(reference: &Volume3D) -> Result<Mask> {
    mask_above(reference, 0.0)
}

/// Mask of reference voxels strictly above `threshold`.
pub fn mask_above(reference: &Volume3D, threshold: f64) -> Result<Mask> {
    let keep: Vec<bool> = reference.data().iter().map(|&v| v as f64 > threshold).collect();
    ensure!(
        keep.iter().any(|k| *k),
        Evaluation,
        "reference has no voxels above {threshold}"
    );
    Ok(Mask {
        width: reference.width(),
        height: reference.height(),
        slices: reference.slices(),
        keep,
    })
}

fn masked_pairs<'a>(
    reference: &'a Volume3D,
    test: &'a Volume3D,
    mask: &'a Mask,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    mask.check(reference, "reference")?;
    mask.check(test, "test volume")?;
    ensure!(mask.count() > 0, Evaluation, "empty evaluation mask");
    Ok(reference
        .data()
        .iter()
        .zip(test.data())
        .zip(&mask.keep)
        .filter(|(_, k)| **k)
        .map(|((r, t), _)| (*r as f64, *t as f64)))
}

fn masked_peak(reference: &Volume3D, mask: &Mask) -> f64 {
    reference
        .data()
        .iter()
        .zip(&mask.keep)
        .filter(|(_, k)| **k)
        .fold(f64::NEG_INFINITY, |m, (v, _)| m.max(*v as f64))
}

pub fn psnr(reference: &Volume3D, test: &Volume3D, mask: &Mask) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, t) in masked_pairs(reference, test, mask)? {
        sum += (t - r) * (t - r);
        n += 1;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let peak = masked_peak(reference, mask);
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub fn nrmse(reference: &Volume3D, test: &Volume3D, mask: &Mask) -> Result<f64> {
    let (mut err, mut norm) = (0.0, 0.0);
    for (r, t) in masked_pairs(reference, test, mask)? {
        err += (t - r) * (t - r);
        norm += r * r;
    }
    ensure!(norm > 0.0, Evaluation, "reference is zero on the mask");
    Ok((err / norm).sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r)
        .map(|k| (-0.5 * (k as f64 / SSIM_SIGMA).powi(2)).exp())
        .collect()
}

/// Mean over slices of the 2D SSIM averaged over masked window centers.
///
/// Windows are clipped at the image border and their weights renormalized.
/// Slices without masked voxels are skipped.
pub fn ssim(reference: &Volume3D, test: &Volume3D, mask: &Mask) -> Result<f64> {
    mask.check(reference, "reference")?;
    mask.check(test, "test volume")?;
    ensure!(mask.count() > 0, Evaluation, "empty evaluation mask");
    let peak = masked_peak(reference, mask);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let g = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    let (w, h) = (reference.width(), reference.height());
    let plane = w * h;

    let per_slice: Vec<Option<f64>> = (0..reference.slices())
        .into_par_iter()
        .map(|z| {
            let x = reference.slice_data(z);
            let y = test.slice_data(z);
            let keep = &mask.keep[z * plane..(z + 1) * plane];
            let (mut total, mut count) = (0.0, 0usize);
            for row in 0..h {
                for col in 0..w {
                    if !keep[row * w + col] {
                        continue;
                    }
                    let (mut sw, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dr in -r..=r {
                        let rr = row as isize + dr;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for dc in -r..=r {
                            let cc = col as isize + dc;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            let wt = g[(dr + r) as usize] * g[(dc + r) as usize];
                            let i = rr as usize * w + cc as usize;
                            let (a, b) = (x[i] as f64, y[i] as f64);
                            sw += wt;
                            mx += wt * a;
                            my += wt * b;
                            sxx += wt * a * a;
                            syy += wt * b * b;
                            sxy += wt * a * b;
                        }
                    }
                    let (mx, my) = (mx / sw, my / sw);
                    let vx = sxx / sw - mx * mx;
                    let vy = syy / sw - my * my;
                    let cov = sxy / sw - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            (count > 0).then(|| total / count as f64)
        })
        .collect();
    let used: Vec<f64> = per_slice.into_iter().flatten().collect();
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// Mean absolute difference between adjacent slices.
pub fn z_consistency(vol: &Volume3D) -> Result<f64> {
    ensure!(
        vol.slices() >= 2,
        Evaluation,
        "slice consistency needs at least 2 slices"
    );
    let pairs = vol.slices() - 1;
    let per_pair: f64 = (0..pairs)
        .map(|z| {
            let a = vol.slice_data(z);
            let b = vol.slice_data(z + 1);
            a.iter().zip(b).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / a.len() as f64
        })
        .sum();
    Ok(per_pair / pairs as f64)
}

/// Relative change in total activity from `reference` to `test`.
pub fn activity_error(reference: &Volume3D, test: &Volume3D) -> Result<f64> {
    ensure!(
        reference.same_shape(test),
        Evaluation,
        "activity comparison needs equal shapes"
    );
    let total = reference.total_activity();
    if total == 0.0 {
        return Err(Error::Evaluation("reference total activity is zero".into()));
    }
    Ok((test.total_activity() - total) / total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub nrmse: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
    pub z_tv: f64,
    pub activity_ratio: f64,
}

/// All metrics of `test` against `reference` on the reference's non-black mask.
pub fn evaluate(reference: &Volume3D, test: &Volume3D) -> Result<MetricsReport> {
    ensure!(
        reference.same_shape(test),
        Evaluation,
        "reference and test shapes differ"
    );
    let mask = mask_black(reference)?;
    Ok(MetricsReport {
        psnr: psnr(reference, test, &mask)?,
        nrmse: nrmse(reference, test, &mask)?,
        ssim: ssim(reference, test, &mask)?,
        mask_voxels: mask.count(),
        z_tv: z_consistency(test)?,
        activity_ratio: 1.0 + activity_error(reference, test)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub volume_id: String,
    pub fraction: f64,
    pub report: MetricsReport,
}

/// Metric conventions, written as `#` lines ahead of every CSV.
pub fn convention_lines() -> Vec<String> {
    vec![
        "# mask: reference voxels > 0".into(),
        format!("# psnr: peak = masked reference maximum, capped at {PSNR_CAP_DB} dB"),
        "# nrmse: L2 error over mask / L2 norm of reference over mask".into(),
        format!(
            "# ssim: slice-wise 2D, {SSIM_WINDOW}x{SSIM_WINDOW} gaussian window sigma {SSIM_SIGMA}, K1 {SSIM_K1}, K2 {SSIM_K2}, L = masked peak"
        ),
        "# z_tv: mean absolute difference of adjacent slices".into(),
    ]
}

pub fn write_metrics_csv(out: &mut dyn Write, rows: &[MetricsRow]) -> Result<()> {
    for line in convention_lines() {
        writeln!(out, "{line}")?;
    }
    writeln!(out, "{METRICS_HEADER}")?;
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            row.volume_id, row.fraction, r.psnr, r.nrmse, r.ssim, r.z_tv, r.activity_ratio, r.mask_voxels
        )?;
    }
    Ok(())
}
