//! Manifold RMSE reports and experiment summary tables.
//!
//! Errors are measured with the manifold difference ⊖, so orientation
//! error lives in the Lie algebra. "Heading" is the yaw angle of the
//! error rotation, matching how tracking experiments report it;
//! "orient" is the full attitude error angle used by open-loop
//! prediction evaluation. The "overall" column is defined as
//! `√(pos² + heading²)` with heading weighted at 1 m/rad; it is a
//! derived convenience, and thresholds key on the per-block columns.

use crate::liegroup::{qinv, qmul};
use crate::state::{diff, State};
use std::io::Write;
use std::path::Path;

/// Per-block RMSE of a predicted trajectory against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseReport {
    /// Position RMSE [m].
    pub pos: f64,
    /// Full attitude-angle RMSE [rad].
    pub orient: f64,
    /// Yaw-of-error RMSE [rad].
    pub heading: f64,
    /// Linear velocity RMSE [m/s].
    pub lin_vel: f64,
    /// Angular velocity RMSE [rad/s].
    pub ang_vel: f64,
    /// `√(pos² + heading²)`, heading at 1 m/rad.
    pub overall: f64,
}

/// Yaw angle of the rotation taking `truth` attitude to `pred` attitude.
pub fn heading_error(pred: &State, truth: &State) -> f64 {
    let qe = qmul(&qinv(&truth.q), &pred.q);
    // Yaw of the error quaternion.
    let w = qe.w;
    let v = qe.v;
    (2.0 * (w * v.z + v.x * v.y)).atan2(1.0 - 2.0 * (v.y * v.y + v.z * v.z))
}

/// RMSE over paired state sequences of equal length.
pub fn rmse(pred: &[State], truth: &[State]) -> RmseReport {
    assert_eq!(pred.len(), truth.len(), "sequences must pair up");
    assert!(!pred.is_empty());
    let n = pred.len() as f64;
    let mut pos = 0.0;
    let mut orient = 0.0;
    let mut heading = 0.0;
    let mut lin_vel = 0.0;
    let mut ang_vel = 0.0;
    for (a, b) in pred.iter().zip(truth) {
        let e = diff(a, b);
        pos += e.fixed_rows::<3>(0).norm_squared();
        orient += e.fixed_rows::<3>(3).norm_squared();
        lin_vel += e.fixed_rows::<3>(6).norm_squared();
        ang_vel += e.fixed_rows::<3>(9).norm_squared();
        let h = heading_error(a, b);
        heading += h * h;
    }
    let pos = (pos / n).sqrt();
    let heading = (heading / n).sqrt();
    RmseReport {
        pos,
        orient: (orient / n).sqrt(),
        heading,
        lin_vel: (lin_vel / n).sqrt(),
        ang_vel: (ang_vel / n).sqrt(),
        overall: (pos * pos + heading * heading).sqrt(),
    }
}

/// One row of a tracking summary table.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub reference: String,
    pub mode: String,
    pub report: RmseReport,
}

/// Writes a tracking summary as CSV plus an aligned text table.
pub fn write_summary(
    csv_path: &Path,
    txt_path: &Path,
    rows: &[SummaryRow],
    config_hash: &str,
) -> std::io::Result<()> {
    let mut f = std::fs::File::create(csv_path)?;
    writeln!(f, "# format: tracking-summary-v1")?;
    writeln!(f, "# config: {config_hash}")?;
    writeln!(
        f,
        "reference,mode,pos_rmse_m,heading_rmse_rad,orient_rmse_rad,lin_vel_rmse_mps,ang_vel_rmse_radps,overall"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.reference,
            r.mode,
            r.report.pos,
            r.report.heading,
            r.report.orient,
            r.report.lin_vel,
            r.report.ang_vel,
            r.report.overall
        )?;
    }

    let mut t = std::fs::File::create(txt_path)?;
    writeln!(t, "Tracking performance (RMSE); overall = sqrt(pos^2 + heading^2)")?;
    writeln!(t, "config: {config_hash}")?;
    writeln!(
        t,
        "{:<12} {:<14} {:>12} {:>14} {:>10}",
        "Reference", "Method", "Position [m]", "Heading [rad]", "Overall"
    )?;
    for r in rows {
        writeln!(
            t,
            "{:<12} {:<14} {:>12.4} {:>14.4} {:>10.4}",
            r.reference, r.mode, r.report.pos, r.report.heading, r.report.overall
        )?;
    }
    Ok(())
}

impl std::fmt::Display for RmseReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "pos {:.4} m | orient {:.4} rad | heading {:.4} rad | lin vel {:.4} m/s | ang vel {:.4} rad/s | overall {:.4}",
            self.pos, self.orient, self.heading, self.lin_vel, self.ang_vel, self.overall
        )
    }
}
