//! Dataset files: one CSV per cycle plus a JSON manifest.
//!
//! CSV header is `t,emg_0..emg_{B-1},force_0..force_{N-1},theta`; every
//! float is written with 17 significant digits so values round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynsim::{Dataset, ExcitationFamily, MotionSample, Pattern, SimConfig, Split};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Real;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleEntry {
    pub file: String,
    pub split: Split,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sim_config: SimConfig,
    pub family: ExcitationFamily,
    pub seed: u64,
    pub n_cycles: usize,
    pub emg_channels: usize,
    pub muscles: usize,
    pub frames: usize,
    pub dt: f64,
    pub dataset_sha256: String,
    pub cycles: Vec<CycleEntry>,
}

/// SHA-256 over every sample's values, split tag and pattern, hex encoded.
pub fn dataset_hash<T: Real>(dataset: &Dataset<T>) -> String {
    let mut h = Sha256::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        h.update(s.dt.as_f64().to_le_bytes());
        for v in s.emg.data().iter().chain(s.force.data()).chain(&s.theta) {
            h.update(v.as_f64().to_le_bytes());
        }
        h.update([dataset.splits[i] as u8, dataset.patterns[i].index() as u8]);
    }
    h.finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

pub fn csv_header(b: usize, n: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..b).map(|i| format!("emg_{i}")));
    cols.extend((0..n).map(|i| format!("force_{i}")));
    cols.push("theta".into());
    cols.join(",")
}

pub fn sample_to_csv(s: &MotionSample<f64>) -> String {
    let (b, n, l) = (s.emg.rows(), s.force.rows(), s.frames());
    let mut out = csv_header(b, n);
    out.push('\n');
    for k in 0..l {
        let _ = write!(out, "{:.16e}", k as f64 * s.dt);
        for c in 0..b {
            let _ = write!(out, ",{:.16e}", s.emg.at2(c, k));
        }
        for m in 0..n {
            let _ = write!(out, ",{:.16e}", s.force.at2(m, k));
        }
        let _ = writeln!(out, ",{:.16e}", s.theta[k]);
    }
    out
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn sample_from_csv(
    text: &str,
    b: usize,
    n: usize,
    dt: f64,
    path: &Path,
) -> Result<MotionSample<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| data_err(path, "empty file"))?;
    let want = csv_header(b, n);
    if header.trim() != want {
        return Err(data_err(
            path,
            format!(
                "header `{}` does not match expected `{want}`",
                header.trim()
            ),
        ));
    }
    let width = b + n + 2;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); width];
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != width {
            return Err(data_err(
                path,
                format!(
                    "line {}: expected {width} columns, found {}",
                    ln + 2,
                    vals.len()
                ),
            ));
        }
        for (c, v) in vals.iter().enumerate() {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| data_err(path, format!("line {}: `{v}` is not a number", ln + 2)))?;
            cols[c].push(x);
        }
    }
    let l = cols[0].len();
    let emg = Tensor::from_vec(&[b, l], cols[1..=b].concat())?;
    let force = Tensor::from_vec(&[n, l], cols[b + 1..=b + n].concat())?;
    let sample = MotionSample {
        dt,
        emg,
        force,
        theta: cols[width - 1].clone(),
    };
    sample
        .validate()
        .map_err(|e| data_err(path, e.to_string()))?;
    Ok(sample)
}

/// Writes every cycle and the manifest into `dir` (created if missing).
pub fn write_dataset(dataset: &Dataset<f64>, dir: &Path) -> Result<Manifest> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = &dataset.samples[0];
    let mut cycles = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let file = format!("cycle_{i:05}.csv");
        let path = dir.join(&file);
        fs::write(&path, sample_to_csv(s)).map_err(|e| Error::io(&path, e))?;
        cycles.push(CycleEntry {
            file,
            split: dataset.splits[i],
            pattern: dataset.patterns[i],
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        sim_config: dataset.config.clone(),
        family: dataset.family,
        seed: dataset.seed,
        n_cycles: dataset.len(),
        emg_channels: first.emg.rows(),
        muscles: first.force.rows(),
        frames: first.frames(),
        dt: first.dt,
        dataset_sha256: dataset_hash(dataset),
        cycles,
    };
    let path = dir.join(MANIFEST);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| data_err(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| data_err(&path, format!("cannot read manifest: {e}")))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| data_err(&path, e.to_string()))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(data_err(
            &path,
            format!("unsupported manifest version {}", m.format_version),
        ));
    }
    if m.cycles.len() != m.n_cycles {
        return Err(data_err(
            &path,
            format!("lists {} files for {} cycles", m.cycles.len(), m.n_cycles),
        ));
    }
    Ok(m)
}

/// Loads a dataset written by [`write_dataset`] and checks its hash.
pub fn read_dataset(dir: &Path) -> Result<Dataset<f64>> {
    let m = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(m.n_cycles);
    for c in &m.cycles {
        let path = dir.join(&c.file);
        let text = fs::read_to_string(&path).map_err(|e| data_err(&path, e.to_string()))?;
        let s = sample_from_csv(&text, m.emg_channels, m.muscles, m.dt, &path)?;
        if s.frames() != m.frames {
            return Err(data_err(
                &path,
                format!("expected {} frames, found {}", m.frames, s.frames()),
            ));
        }
        samples.push(s);
    }
    let dataset = Dataset {
        samples,
        config: m.sim_config,
        family: m.family,
        seed: m.seed,
        splits: m.cycles.iter().map(|c| c.split).collect(),
        patterns: m.cycles.iter().map(|c| c.pattern).collect(),
    };
    let hash = dataset_hash(&dataset);
    if hash != m.dataset_sha256 {
        return Err(data_err(
            &dir.join(MANIFEST),
            "dataset hash does not match the manifest",
        ));
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsim::make_dataset;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = SimConfig {
            frames: 20,
            ..SimConfig::knee()
        };
        let d = make_dataset::<f64>(3, &cfg, ExcitationFamily::Mixed, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn bad_header_is_a_data_error() {
        let err = sample_from_csv("t,x\n0,1\n", 1, 1, 0.01, Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
    }
}
