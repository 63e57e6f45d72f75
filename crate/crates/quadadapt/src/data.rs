//! Trajectory and dataset containers with their on-disk formats.
//!
//! A trajectory file is CSV with a `#`-comment header carrying the sample
//! period and the resolved-config hash, one column-name row, and one row
//! per sample: time, the 13 state numbers in `(p, q_wxyz, v, ω)` order,
//! and the 4 motor thrusts. The final row carries no control (a
//! trajectory has one more state than controls), so its thrust fields are
//! empty. Floats are printed in shortest round-trip form, making a
//! write → read cycle value-exact.

use crate::state::{Control, State};
use nalgebra::Vector4;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("trajectory io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("trajectory format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("trajectory has {states} states and {controls} controls; want states = controls + 1")]
    LengthMismatch { states: usize, controls: usize },
}

/// Time-indexed states and controls at a fixed sample period.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Sample period [s].
    pub dt: f64,
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<State>, controls: Vec<Control>) -> Result<Self, DataError> {
        if states.len() != controls.len() + 1 {
            return Err(DataError::LengthMismatch {
                states: states.len(),
                controls: controls.len(),
            });
        }
        Ok(Self { dt, states, controls })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.controls.len() as f64
    }
}

/// A collection of trajectories sharing one sample period.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

const COLUMNS: [&str; 18] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "u1",
    "u2", "u3", "u4",
];

/// Writes one trajectory file.
pub fn write_trajectory(path: &Path, traj: &Trajectory, config_hash: &str) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# format: trajectory-v1")?;
    writeln!(file, "# dt: {}", traj.dt)?;
    writeln!(file, "# config: {config_hash}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(COLUMNS)?;
    for (k, state) in traj.states.iter().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(18);
        rec.push((k as f64 * traj.dt).to_string());
        rec.extend(state.to_array().iter().map(|x| x.to_string()));
        if let Some(u) = traj.controls.get(k) {
            rec.extend(u.iter().map(|x| x.to_string()));
        } else {
            rec.extend(std::iter::repeat(String::new()).take(4));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one trajectory file.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut dt: Option<f64> = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(rest) = line.strip_prefix("# dt:") {
            dt = rest.trim().parse().ok();
        }
    }
    let dt = dt.ok_or_else(|| DataError::Format {
        path: path.to_path_buf(),
        msg: "missing '# dt:' header".into(),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() < 14 {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                msg: format!("row with {} fields", record.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, DataError> {
            s.parse().map_err(|_| DataError::Format {
                path: path.to_path_buf(),
                msg: format!("bad number {s:?}"),
            })
        };
        let mut nums = [0.0; 13];
        for (i, n) in nums.iter_mut().enumerate() {
            *n = parse(record.get(i + 1).unwrap_or(""))?;
        }
        states.push(State::from_array(&nums));
        let u_fields: Vec<&str> = (14..18).map(|i| record.get(i).unwrap_or("")).collect();
        if u_fields.iter().all(|s| !s.is_empty()) {
            controls.push(Vector4::new(
                parse(u_fields[0])?,
                parse(u_fields[1])?,
                parse(u_fields[2])?,
                parse(u_fields[3])?,
            ));
        }
    }
    Trajectory::new(dt, states, controls)
}

/// Writes a dataset as `prefix_0000.csv …` under a directory.
pub fn save_dataset(dir: &Path, prefix: &str, ds: &Dataset, config_hash: &str) -> Result<Vec<PathBuf>, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{i:04}.csv"));
        write_trajectory(&path, traj, config_hash)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads all `prefix_*.csv` files under a directory, sorted by name.
pub fn load_dataset(dir: &Path, prefix: &str) -> Result<Dataset, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "csv")
                && p.file_stem().and_then(|n| n.to_str()).is_some_and(|stem| {
                    stem.strip_prefix(&format!("{prefix}_"))
                        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                })
        })
        .collect();
    files.sort();
    let trajectories = files
        .iter()
        .map(|p| read_trajectory(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { trajectories })
}

/// Per-block value ranges over a dataset, for the dataset manifest.
#[derive(Debug, Clone, Copy)]
pub struct Ranges {
    pub pos: [(f64, f64); 3],
    pub vel: [(f64, f64); 3],
    pub omega: [(f64, f64); 3],
    pub thrust: (f64, f64),
}

pub fn dataset_ranges(ds: &Dataset) -> Ranges {
    let mut r = Ranges {
        pos: [(f64::INFINITY, f64::NEG_INFINITY); 3],
        vel: [(f64::INFINITY, f64::NEG_INFINITY); 3],
        omega: [(f64::INFINITY, f64::NEG_INFINITY); 3],
        thrust: (f64::INFINITY, f64::NEG_INFINITY),
    };
    let upd = |slot: &mut (f64, f64), x: f64| {
        slot.0 = slot.0.min(x);
        slot.1 = slot.1.max(x);
    };
    for traj in &ds.trajectories {
        for s in &traj.states {
            for i in 0..3 {
                upd(&mut r.pos[i], s.p[i]);
                upd(&mut r.vel[i], s.v[i]);
                upd(&mut r.omega[i], s.w[i]);
            }
        }
        for u in &traj.controls {
            for i in 0..4 {
                upd(&mut r.thrust, u[i]);
            }
        }
    }
    r
}

/// Writes the dataset manifest: trajectory inventory plus a value-range
/// summary table.
pub fn write_manifest(
    path: &Path,
    ds: &Dataset,
    split: &str,
    seed: u64,
    config_hash: &str,
) -> Result<(), DataError> {
    let r = dataset_ranges(ds);
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# format: dataset-manifest-v1")?;
    writeln!(file, "# split: {split}")?;
    writeln!(file, "# trajectories: {}", ds.trajectories.len())?;
    writeln!(file, "# samples: {}", ds.n_samples())?;
    writeln!(file, "# seed: {seed}")?;
    writeln!(file, "# config: {config_hash}")?;
    writeln!(file, "quantity,min,max")?;
    let axes = ["x", "y", "z"];
    for i in 0..3 {
        writeln!(file, "p{},{},{}", axes[i], r.pos[i].0, r.pos[i].1)?;
    }
    for i in 0..3 {
        writeln!(file, "v{},{},{}", axes[i], r.vel[i].0, r.vel[i].1)?;
    }
    for i in 0..3 {
        writeln!(file, "w{},{},{}", axes[i], r.omega[i].0, r.omega[i].1)?;
    }
    writeln!(file, "u,{},{}", r.thrust.0, r.thrust.1)?;
    Ok(())
}
