//! The per-run output directory.
//!
//! Layout: `OUT/config.snapshot`, then `OUT/round_###/worker_##/` holding
//! `recon_###.pgm` (plus `.ppm` composites for color), `trajectory.csv`,
//! and `report.txt`. Non-federated attacks use slot (0, 0). Nothing here
//! writes a timestamp, so a rerun with the same inputs produces the same
//! bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gradrecon::config::ConfigFile;
use gradrecon::error::Result;
use gradrecon::metrics::MatchReport;
use gradrecon::pgm::{save_pgm, save_ppm};
use gradrecon::recon::{ReconResult, TerminationReason};
use gradrecon::trajectory::write_trajectory_csv;
use gradrecon::Tensor;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes the resolved configuration to
    /// `config.snapshot` so the run can be reproduced from the artifact.
    pub fn create(root: &Path, snapshot: &ConfigFile) -> Result<RunDir> {
        fs::create_dir_all(root)?;
        snapshot.save(root.join("config.snapshot"))?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn slot(&self, round: usize, worker: usize) -> Result<PathBuf> {
        let dir = self
            .root
            .join(format!("round_{round:03}"))
            .join(format!("worker_{worker:02}"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Writes one reconstructed instance; grayscale planes go to `.pgm`,
/// three-channel images additionally get a composite `.ppm`.
fn write_instance(dir: &Path, index: usize, img: &Tensor) -> Result<()> {
    let stem = format!("recon_{index:03}");
    match img.shape() {
        [_, _] | [1, _, _] => save_pgm(img, dir.join(format!("{stem}.pgm"))),
        [3, d, _] => {
            save_ppm(img, dir.join(format!("{stem}.ppm")))?;
            let plane = d * d;
            for (ch, chunk) in img.data().chunks(plane).enumerate() {
                let t = Tensor::new(vec![*d, *d], chunk.to_vec())?;
                save_pgm(&t, dir.join(format!("{stem}_c{ch}.pgm")))?;
            }
            Ok(())
        }
        // Flat MLP outputs land here when the input is not a square image;
        // the values still live in the report and trajectory.
        _ => Ok(()),
    }
}

fn termination_name(t: TerminationReason) -> &'static str {
    match t {
        TerminationReason::ClosedForm => "closed-form",
        TerminationReason::Completed => "completed",
        TerminationReason::Diverged => "diverged",
    }
}

/// Writes reconstructions, the trajectory CSV, and `report.txt` into one
/// slot directory. `image_shape` reshapes flat instances for the image
/// files; `matching` is present whenever the truth was available.
pub fn write_slot(
    dir: &Path,
    result: &ReconResult,
    image_shape: Option<&[usize]>,
    matching: Option<&MatchReport>,
) -> Result<()> {
    for (i, x) in result.x_hat.iter().enumerate() {
        let img = match image_shape {
            Some(shape) if x.shape() != shape => x.reshape(shape)?,
            _ => x.clone(),
        };
        write_instance(dir, i, &img)?;
    }
    write_trajectory_csv(result, dir.join("trajectory.csv"))?;

    let mut report = String::new();
    let _ = writeln!(report, "instances = {}", result.x_hat.len());
    let _ = writeln!(report, "terminated = {}", termination_name(result.terminated));
    let _ = writeln!(report, "iterations = {}", result.iterations_run);
    if let Some(loss) = result.loss_trajectory.last() {
        let _ = writeln!(report, "final_loss = {loss:.12e}");
    }
    if let Some(m) = matching {
        let _ = writeln!(report, "mean_l1 = {:.12e}", m.mean_l1);
        for (i, (&j, &l1)) in m.assignment.iter().zip(&m.per_pair).enumerate() {
            let _ = writeln!(report, "pair_{i} = {l1:.12e}");
            let _ = writeln!(report, "assignment_{i} = {j}");
        }
    }
    for (i, w) in result.warnings.iter().enumerate() {
        let _ = writeln!(report, "warning_{i} = {w}");
    }
    fs::write(dir.join("report.txt"), report)?;
    Ok(())
}

/// Failed attacks still leave a record behind.
pub fn write_failure(dir: &Path, message: &str) -> Result<()> {
    fs::write(dir.join("report.txt"), format!("attack_failed = {message}\n"))?;
    Ok(())
}
