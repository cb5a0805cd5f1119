use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mixtd_core::dse::STEP_HEADER;
use mixtd_core::{Error, Result};
use serde::Deserialize;

use crate::inputs;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub method: String,
    pub step: usize,
    pub evaluator: String,
    pub best_accuracy: f64,
    pub evaluated: usize,
    pub wall_seconds: f64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_error(path: &Path, line: u64, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        line: line as usize,
        message: format!("{}: {message}", path.display()),
    }
}

/// Reads a steps CSV. An empty file has no records; anything else must start
/// with the step header.
pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = (i + 1) as u64;
        let rec = rec.map_err(|e| {
            let at = e.position().map_or(line, |p| p.line());
            parse_error(path, at, e)
        })?;
        let line = rec.position().map_or(line, |p| p.line());
        if i == 0 {
            if !rec.iter().eq(STEP_HEADER) {
                return Err(parse_error(path, line, "not a steps log header"));
            }
            continue;
        }
        if rec.len() != STEP_HEADER.len() {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", STEP_HEADER.len(), rec.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|e| parse_error(path, line, format!("{}: {e}", STEP_HEADER[k])))
        };
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .parse::<usize>()
                .map_err(|e| parse_error(path, line, format!("{}: {e}", STEP_HEADER[k])))
        };
        rows.push(StepRecord {
            method: rec[0].to_string(),
            step: int(1)?,
            evaluator: rec[2].to_string(),
            best_accuracy: num(3)?,
            evaluated: int(5)?,
            wall_seconds: num(7)?,
        });
    }
    Ok(rows)
}

pub fn accuracy_vs_time(logs: &[Vec<StepRecord>]) -> String {
    let mut t = String::from("method,step,wall_seconds,best_accuracy\n");
    for r in logs.iter().flatten() {
        let _ = writeln!(
            t,
            "{},{},{:.6},{:.9}",
            r.method, r.step, r.wall_seconds, r.best_accuracy
        );
    }
    t
}

/// Candidates evaluated per hour, split by the evaluator active in each step.
/// A step's duration is its wall time minus the previous step's.
pub fn designs_per_hour(logs: &[Vec<StepRecord>]) -> String {
    let mut groups: Vec<(String, String, usize, f64)> = Vec::new();
    for log in logs {
        let mut prev = 0.0;
        for r in log {
            let dt = (r.wall_seconds - prev).max(0.0);
            prev = r.wall_seconds;
            match groups
                .iter_mut()
                .find(|g| g.0 == r.method && g.1 == r.evaluator)
            {
                Some(g) => {
                    g.2 += r.evaluated;
                    g.3 += dt;
                }
                None => groups.push((r.method.clone(), r.evaluator.clone(), r.evaluated, dt)),
            }
        }
    }
    let mut t = String::from("method,evaluator,designs,seconds,designs_per_hour\n");
    for (method, evaluator, n, secs) in groups {
        let rate = if secs > 0.0 {
            format!("{:.1}", n as f64 / secs * 3600.0)
        } else {
            String::new()
        };
        let _ = writeln!(t, "{method},{evaluator},{n},{secs:.6},{rate}");
    }
    t
}

#[derive(Deserialize)]
struct PopulationEntry {
    rank: usize,
    hash: String,
    #[serde(default)]
    params: Option<u64>,
    #[serde(default)]
    accuracy: Option<f64>,
    #[serde(default)]
    fps: Option<f64>,
}

/// Best design of each population file.
fn compression(populations: &[&Path], dense: Option<u64>) -> Result<String> {
    let mut t = String::from("population,rank,hash,params,dense_params,compression,accuracy,fps\n");
    for &path in populations {
        let text = fs::read_to_string(path).map_err(io(path))?;
        let entries: Vec<PopulationEntry> =
            serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e))?;
        let Some(best) = entries.iter().min_by_key(|e| e.rank) else {
            continue;
        };
        let opt = |v: Option<String>| v.unwrap_or_default();
        let ratio = match (dense, best.params) {
            (Some(d), Some(p)) if p > 0 => format!("{:.4}", d as f64 / p as f64),
            _ => String::new(),
        };
        let _ = writeln!(
            t,
            "{},{},{},{},{},{ratio},{},{}",
            path.display(),
            best.rank,
            best.hash,
            opt(best.params.map(|p| p.to_string())),
            opt(dense.map(|d| d.to_string())),
            opt(best.accuracy.map(|a| format!("{a:.9}"))),
            opt(best.fps.map(|f| format!("{f:.3}"))),
        );
    }
    Ok(t)
}

pub fn run(
    logs: &[impl AsRef<Path>],
    populations: &[impl AsRef<Path>],
    model: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let parsed = logs
        .iter()
        .map(|p| read_steps(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let dense = model
        .map(|m| inputs::model(m).map(|n| n.count_params(None)))
        .transpose()?;
    let pops: Vec<&Path> = populations.iter().map(AsRef::as_ref).collect();
    let tables = [
        ("accuracy_vs_time.csv", accuracy_vs_time(&parsed)),
        ("designs_per_hour.csv", designs_per_hour(&parsed)),
        ("compression.csv", compression(&pops, dense)?),
    ];
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io(dir))?;
            for (name, table) in &tables {
                let path = dir.join(name);
                fs::write(&path, table).map_err(io(&path))?;
                println!("wrote {}", path.display());
            }
        }
        None => {
            for (i, (name, table)) in tables.iter().enumerate() {
                if i > 0 {
                    println!();
                }
                println!("# {name}");
                print!("{table}");
            }
        }
    }
    Ok(())
}
