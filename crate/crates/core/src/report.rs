//! Plain-text artifacts: CSV tables, contour polylines and PGM heatmaps.
//!
//! All floating-point output uses 17 significant digits in scientific form so
//! values round-trip exactly.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::harness::{Polyline, SweepResult};
use crate::profiler::RatioProfile;

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `layer,step,ratio_k,ratio_v`, one row per cell, layer-major.
pub fn write_profile_csv<W: Write>(mut w: W, k: &RatioProfile, v: &RatioProfile) -> Result<()> {
    if k.ratios().shape() != v.ratios().shape() {
        return Err(Error::Shape {
            op: "write_profile_csv",
            left: k.ratios().shape().to_vec(),
            right: v.ratios().shape().to_vec(),
        });
    }
    let io = |e: io::Error| Error::Domain(format!("write failed: {e}"));
    writeln!(w, "layer,step,ratio_k,ratio_v").map_err(io)?;
    for l in 0..k.layer_count() {
        for t in 0..k.step_count() {
            writeln!(w, "{l},{t},{},{}", fmt_f64(k.at(l, t)), fmt_f64(v.at(l, t))).map_err(io)?;
        }
    }
    Ok(())
}

/// `delta_k,delta_v,mse,psnr,ssim` in grid order.
pub fn write_sweep_csv<W: Write>(mut w: W, result: &SweepResult) -> io::Result<()> {
    writeln!(w, "delta_k,delta_v,mse,psnr,ssim")?;
    for r in &result.records {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt_f64(r.delta_k),
            fmt_f64(r.delta_v),
            fmt_f64(r.mse),
            fmt_f64(r.psnr),
            fmt_f64(r.ssim)
        )?;
    }
    Ok(())
}

/// One `x,y` vertex per line, a blank line between polylines.
pub fn write_polylines<W: Write>(mut w: W, lines: &[Polyline]) -> io::Result<()> {
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for &(x, y) in line {
            writeln!(w, "{},{}", fmt_f64(x), fmt_f64(y))?;
        }
    }
    Ok(())
}

/// Binary PGM with layers along x and steps along y, min-max scaled to 0–255.
pub fn write_heatmap_pgm<W: Write>(mut w: W, profile: &RatioProfile) -> io::Result<()> {
    let (layers, steps) = (profile.layer_count(), profile.step_count());
    let data = profile.ratios().data();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let span = hi - lo;
    write!(w, "P5\n{layers} {steps}\n255\n")?;
    let mut bytes = Vec::with_capacity(layers * steps);
    for t in 0..steps {
        for l in 0..layers {
            let r = profile.at(l, t);
            let g = if span > 0.0 { ((r - lo) / span * 255.0).round() } else { 0.0 };
            bytes.push(g as u8);
        }
    }
    w.write_all(&bytes)
}
