//! Trajectory logs: one CSV per reconstruction run, `iter,loss,mean_l1`,
//! one row per completed iteration. Floats are written with 17 significant
//! digits so a parse gives back the exact f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::recon::ReconResult;

pub const TRAJECTORY_HEADER: &str = "iter,loss,mean_l1";

/// Writes the loss (and, when ground truth was supplied, matched-L1)
/// trajectory. A closed-form result has no iterations and produces a
/// header-only file.
pub fn write_trajectory_csv(result: &ReconResult, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(32 * (result.loss_trajectory.len() + 1));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for (i, loss) in result.loss_trajectory.iter().enumerate() {
        let l1 = match &result.l1_trajectory {
            Some(traj) => format!("{:e}", PreciseFloat(traj[i])),
            None => String::new(),
        };
        out.push_str(&format!("{i},{:e},{l1}\n", PreciseFloat(*loss)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Thin wrapper that renders with enough digits to round-trip exactly.
struct PreciseFloat(f64);

impl std::fmt::LowerExp for PreciseFloat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.16e}", self.0)
    }
}

/// Parsed trajectory: per-iteration losses, and matched L1 values when the
/// file recorded them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub losses: Vec<f64>,
    pub mean_l1: Option<Vec<f64>>,
}

/// Reads a file written by [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Config {
        path: path.display().to_string(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRAJECTORY_HEADER => {}
        Some((_, header)) => {
            return Err(err(1, format!("bad header {header:?}, expected {TRAJECTORY_HEADER:?}")))
        }
        None => return Err(err(1, "empty file".into())),
    }

    let mut losses = Vec::new();
    let mut l1s: Vec<f64> = Vec::new();
    let mut has_l1 = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let mut fields = line.split(',');
        let (iter_s, loss_s, l1_s) = match (fields.next(), fields.next(), fields.next(), fields.next())
        {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => return Err(err(lineno, "expected exactly three fields".into())),
        };
        let iter: usize = iter_s
            .parse()
            .map_err(|_| err(lineno, format!("bad iteration index {iter_s:?}")))?;
        if iter != losses.len() {
            return Err(err(
                lineno,
                format!("iteration {iter} out of order, expected {}", losses.len()),
            ));
        }
        losses.push(
            loss_s
                .parse()
                .map_err(|_| err(lineno, format!("bad loss value {loss_s:?}")))?,
        );
        let row_has_l1 = !l1_s.is_empty();
        match has_l1 {
            None => has_l1 = Some(row_has_l1),
            Some(expected) if expected != row_has_l1 => {
                return Err(err(lineno, "mean_l1 must be present in all rows or none".into()))
            }
            _ => {}
        }
        if row_has_l1 {
            l1s.push(
                l1_s.parse()
                    .map_err(|_| err(lineno, format!("bad mean_l1 value {l1_s:?}")))?,
            );
        }
    }
    Ok(Trajectory {
        losses,
        mean_l1: if has_l1 == Some(true) { Some(l1s) } else { None },
    })
}
