//! File formats: trajectory CSV, generic float CSV writing and the run
//! manifest written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Trajectory;

pub const TRAJECTORY_HEADER: [&str; 7] = ["t", "w", "y", "v", "a", "u", "event"];
pub const MANIFEST_FILE: &str = "manifest.json";

/// Floats are exported with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `header` followed by the rows, each already formatted.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let flags = traj.event_flags();
    let rows = (0..traj.len()).map(|k| {
        vec![
            fmt_f64(traj.t[k]),
            fmt_f64(traj.w[k]),
            fmt_f64(traj.y[k]),
            fmt_f64(traj.v[k]),
            fmt_f64(traj.a[k]),
            fmt_f64(traj.u[k]),
            u8::from(flags[k]).to_string(),
        ]
    });
    write_csv(path, &TRAJECTORY_HEADER, rows)
}

/// Reads a file written by [`write_trajectory_csv`]. Event times are
/// reconstructed from the flags on the sample grid.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let ingest = |row: Option<usize>, msg: String| Error::Ingest {
        path: path.display().to_string(),
        row,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| ingest(None, e.to_string()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRAJECTORY_HEADER {
        return Err(ingest(
            Some(1),
            format!("expected header {}", TRAJECTORY_HEADER.join(",")),
        ));
    }
    let mut traj = Trajectory::default();
    let mut flags = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ingest(Some(row), e.to_string()))?;
        let mut vals = [0.0; 7];
        for (j, v) in vals.iter_mut().enumerate() {
            let field = rec
                .get(j)
                .ok_or_else(|| ingest(Some(row), "missing field".into()))?;
            *v = field.trim().parse().map_err(|_| {
                ingest(
                    Some(row),
                    format!("cannot parse {field:?} in column {}", TRAJECTORY_HEADER[j]),
                )
            })?;
        }
        traj.t.push(vals[0]);
        traj.w.push(vals[1]);
        traj.y.push(vals[2]);
        traj.v.push(vals[3]);
        traj.a.push(vals[4]);
        traj.u.push(vals[5]);
        flags.push(vals[6] != 0.0);
    }
    if traj.t.len() < 2 {
        return Err(ingest(None, "trajectory needs at least two samples".into()));
    }
    traj.dt = (traj.t[traj.t.len() - 1] - traj.t[0]) / (traj.t.len() - 1) as f64;
    traj.events = flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(k, _)| traj.t[k])
        .collect();
    Ok(traj)
}

/// Everything needed to reproduce an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    /// Effective configuration after merging flags, file and defaults.
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: None,
            config_hash: None,
            config: serde_json::Value::Null,
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_text(&path, &serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(&dir.join(MANIFEST_FILE))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-17, 123456.789, f64::MIN_POSITIVE] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
            let mantissa = s.split('e').next().unwrap();
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17);
        }
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let traj = Trajectory {
            dt: 0.001,
            t: vec![0.0, 0.001, 0.002],
            w: vec![0.1, 0.1, -0.1],
            y: vec![1.0 / 3.0, 0.2, 0.3],
            v: vec![0.0, 1.0, 2.0],
            a: vec![0.0, 0.5, 0.25],
            u: vec![0.0, -1.0, 1e-300],
            events: vec![0.001],
            controllers: Vec::new(),
        };
        let path = dir.path().join("t.csv");
        write_trajectory_csv(&path, &traj).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,w,y,v,a,u,event\n"));
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.y, traj.y);
        assert_eq!(back.u, traj.u);
        assert_eq!(back.events, traj.events);
        assert!((back.dt - 0.001).abs() < 1e-15);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("simulate");
        m.seed = Some(11);
        m.files.push("run_000.csv".into());
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }
}
