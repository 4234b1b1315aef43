use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentResult, GridPoint};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const CSV_FILE: &str = "result.csv";
const META_FILE: &str = "meta.json";
const LOGLOG_FILE: &str = "loglog.dat";
const TIMING_FILE: &str = "timing.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config_hash: String,
    /// File name to SHA-256 digest of its bytes.
    files: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Timing {
    runtime_s: f64,
}

fn csv_text(grid: &[GridPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for g in grid {
        w.serialize(g).expect("serializing to memory");
    }
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

fn csv_rows(text: &str) -> Result<Vec<GridPoint>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Invalid(format!("result.csv: {e}")))
}

fn loglog_text(grid: &[GridPoint]) -> String {
    let mut s = String::from("# log10(param) log10(error) log10(stderr)\n");
    for g in grid.iter().filter(|g| g.param > 0.0 && g.error > 0.0) {
        let se = if g.stderr > 0.0 { g.stderr.log10() } else { f64::NEG_INFINITY };
        writeln!(s, "{:.12e} {:.12e} {:.12e}", g.param.log10(), g.error.log10(), se)
            .expect("writing to a String");
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_error(path: &Path, source: serde_json::Error) -> Error {
    Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `result.csv`, `meta.json`, `loglog.dat`, `timing.json` and a
/// digest manifest under `out_dir/<kind>/<hash prefix>/` and returns the
/// manifest path.
///
/// Everything but `timing.json` is a deterministic function of the result,
/// so reruns of the same configuration produce byte-identical files.
pub fn persist(result: &ExperimentResult, out_dir: &Path) -> Result<PathBuf> {
    if result.grid.is_empty() {
        return Err(Error::Invalid("refusing to persist a result with an empty grid".into()));
    }
    if result.kind.is_empty() || result.kind.contains(['/', '\\']) {
        return Err(Error::Invalid(format!("unusable study kind {:?}", result.kind)));
    }
    let dir = out_dir.join(&result.kind).join(&result.config_hash[..16.min(result.config_hash.len())]);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let meta = serde_json::to_string_pretty(result).expect("results serialize") + "\n";
    let files = [
        (CSV_FILE, csv_text(&result.grid)),
        (META_FILE, meta),
        (LOGLOG_FILE, loglog_text(&result.grid)),
    ];
    let mut digests = BTreeMap::new();
    for (name, text) in &files {
        write(&dir.join(name), text.as_bytes())?;
        digests.insert(name.to_string(), hex::encode(Sha256::digest(text.as_bytes())));
    }
    let timing = serde_json::to_string_pretty(&Timing { runtime_s: result.runtime_s }).expect("serializes");
    write(&dir.join(TIMING_FILE), timing.as_bytes())?;

    let manifest = Manifest {
        kind: result.kind.clone(),
        config_hash: result.config_hash.clone(),
        files: digests,
    };
    let path = dir.join(MANIFEST_FILE);
    write(&path, (serde_json::to_string_pretty(&manifest).expect("serializes") + "\n").as_bytes())?;
    Ok(path)
}

/// Reads back a directory written by [`persist`], verifying the digests and
/// that the CSV agrees with the metadata.
pub fn load(dir: &Path) -> Result<ExperimentResult> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_str(&read(&manifest_path)?).map_err(|e| json_error(&manifest_path, e))?;
    for (name, digest) in &manifest.files {
        let text = read(&dir.join(name))?;
        if hex::encode(Sha256::digest(text.as_bytes())) != *digest {
            return Err(Error::Invalid(format!("{name} does not match its manifest digest")));
        }
    }
    let meta_path = dir.join(META_FILE);
    let mut result: ExperimentResult =
        serde_json::from_str(&read(&meta_path)?).map_err(|e| json_error(&meta_path, e))?;
    if csv_rows(&read(&dir.join(CSV_FILE))?)? != result.grid {
        return Err(Error::Invalid("result.csv disagrees with meta.json".into()));
    }
    let timing_path = dir.join(TIMING_FILE);
    if timing_path.exists() {
        let t: Timing = serde_json::from_str(&read(&timing_path)?).map_err(|e| json_error(&timing_path, e))?;
        result.runtime_s = t.runtime_s;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentResult {
        let mut r = ExperimentResult::new("rate").with_config(serde_json::json!({"eps": [0.5, 0.25]}));
        r.grid = vec![
            GridPoint { param: 0.5, error: 0.1 + 1e-17, stderr: 0.003 },
            GridPoint { param: 0.25, error: 1.0 / 3.0, stderr: 0.0 },
        ];
        r.fitted_slope = Some(0.28571428571428575);
        r.series.insert("delta".into(), vec![0.1, std::f64::consts::PI]);
        r.seeds = vec![u64::MAX, 7];
        r.flags.push("note".into());
        r.runtime_s = 1.25;
        r
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        let manifest = persist(&r, dir.path()).unwrap();
        let back = load(manifest.parent().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = fs::read_to_string(manifest.parent().unwrap().join(CSV_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), "param,error,stderr");
    }

    #[test]
    fn rerun_is_byte_identical_except_timing() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let r = sample();
        let mut r2 = sample();
        r2.runtime_s = 99.0;
        let ma = persist(&r, a.path()).unwrap();
        let mb = persist(&r2, b.path()).unwrap();
        for name in [CSV_FILE, META_FILE, LOGLOG_FILE, MANIFEST_FILE] {
            let x = fs::read(ma.parent().unwrap().join(name)).unwrap();
            let y = fs::read(mb.parent().unwrap().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn empty_grid_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = sample();
        r.grid.clear();
        assert!(persist(&r, dir.path()).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = persist(&sample(), dir.path()).unwrap();
        let csv = manifest.parent().unwrap().join(CSV_FILE);
        fs::write(&csv, "param,error,stderr\n1,1,1\n").unwrap();
        assert!(load(manifest.parent().unwrap()).is_err());
    }
}
