use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Error above which a sample counts as a failure.
pub const DEFAULT_FAILURE_CUTOFF: f64 = 0.08;

/// Empirical cumulative error distribution on uniform thresholds from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    /// Share of samples with error at most the matching threshold.
    pub fractions: Vec<f64>,
    /// Trapezoid area under the curve divided by the largest threshold.
    pub auc: f64,
    pub failure_cutoff: f64,
    /// Share of samples with error above `failure_cutoff`.
    pub failure_rate: f64,
}

/// Builds the curve at thresholds `k * max_threshold / n_bins` for
/// `k = 0..=n_bins`.
pub fn ced(errors: &[f64], max_threshold: f64, n_bins: usize, failure_cutoff: f64) -> Result<CedCurve> {
    if !(max_threshold > 0.0 && max_threshold.is_finite()) || n_bins == 0 {
        return Err(Error::config("CED needs a positive max threshold and at least one bin"));
    }
    if errors.is_empty() {
        return Err(Error::config("CED of an empty error list"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::config("CED errors contain NaN"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let at_most = |t: f64| sorted.partition_point(|&e| e <= t) as f64 / n;
    let thresholds: Vec<f64> = (0..=n_bins).map(|k| max_threshold * k as f64 / n_bins as f64).collect();
    let fractions: Vec<f64> = thresholds.iter().map(|&t| at_most(t)).collect();
    Ok(CedCurve {
        auc: trapezoid(&thresholds, &fractions) / max_threshold,
        failure_rate: 1.0 - at_most(failure_cutoff),
        thresholds,
        fractions,
        failure_cutoff,
    })
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

impl CedCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            let _ = writeln!(s, "{t},{f}");
        }
        s
    }

    /// A plain SVG 1.1 line plot of the curve.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (480.0, 360.0, 48.0);
        let max_t = self.thresholds.last().copied().unwrap_or(1.0);
        let px = |t: f64| m + (w - 2.0 * m) * t / max_t;
        let py = |f: f64| h - m - (h - 2.0 * m) * f;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{x0} {y0} L{x1} {y0} M{x0} {y0} L{x0} {y1}" stroke="black" fill="none"/>"#,
            x0 = px(0.0),
            y0 = py(0.0),
            x1 = px(max_t),
            y1 = py(1.0)
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{f:.2}</text>"#,
                px(0.0) - 6.0,
                py(f) + 4.0
            );
            let t = max_t * f;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{t:.3}</text>"#,
                px(t),
                py(0.0) + 16.0
            );
        }
        let points: Vec<String> = self
            .thresholds
            .iter()
            .zip(&self.fractions)
            .map(|(&t, &f)| format!("{:.2},{:.2}", px(t), py(f)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">NME (AUC {:.4}, failure {:.2}%)</text>"#,
            w / 2.0,
            h - 8.0,
            self.auc,
            100.0 * self.failure_rate
        );
        s.push_str("</svg>\n");
        s
    }
}
