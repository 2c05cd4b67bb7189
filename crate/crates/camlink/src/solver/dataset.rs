//! Dataset files: one labeled instance per line, plus a JSON manifest
//! sidecar.
//!
//! Record line layout (single spaces, no escaping):
//!
//! ```text
//! index n k d x0 y0 ... x{n-1} y{n-1} bits [source horizon seed]
//! ```
//!
//! where `bits` is the upper-triangle adjacency as '0'/'1' characters and the
//! trailing triple is present only in prediction files. Floats are written
//! with 17 significant digits so parsing recovers them bit-exactly.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_exact, sample_coords, Instance};
use crate::error::{Error, Result};
use crate::graph::AdjMatrix;

pub const FORMAT_VERSION: u32 = 1;

/// Provenance of a prediction record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionMeta {
    /// Sampling path: "oneshot", "vae", or "ddpm".
    pub source: String,
    /// Diffusion horizon T; 0 for non-diffusion sources.
    pub horizon: u64,
    pub seed: u64,
}

/// One dataset or prediction line.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub index: u64,
    pub instance: Instance,
    pub meta: Option<PredictionMeta>,
}

/// Dataset sidecar with the generation parameters and summary statistics.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub n: usize,
    pub k: usize,
    pub d: f64,
    pub seed: u64,
    /// Mean edge density over all stored labels; this is the diffusion
    /// kernel's stationary marginal m.
    pub edge_marginal: f64,
    pub mean_components: f64,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn format_record(record: &Record) -> String {
    let inst = &record.instance;
    let mut line = String::new();
    write!(
        line,
        "{} {} {} {}",
        record.index,
        inst.n(),
        inst.k,
        fmt_f64(inst.d)
    )
    .unwrap();
    for c in &inst.coords {
        write!(line, " {} {}", fmt_f64(c[0]), fmt_f64(c[1])).unwrap();
    }
    write!(line, " {}", inst.label.to_bitstring()).unwrap();
    if let Some(meta) = &record.meta {
        write!(line, " {} {} {}", meta.source, meta.horizon, meta.seed).unwrap();
    }
    line
}

pub fn parse_record(line: &str) -> Result<Record> {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() < 5 {
        return Err(Error::Parse(format!(
            "record line has only {} fields",
            fields.len()
        )));
    }
    let index: u64 = fields[0]
        .parse()
        .map_err(|e| Error::Parse(format!("bad record index: {e}")))?;
    let n: usize = fields[1]
        .parse()
        .map_err(|e| Error::Parse(format!("bad node count: {e}")))?;
    let k: usize = fields[2]
        .parse()
        .map_err(|e| Error::Parse(format!("bad degree cap: {e}")))?;
    let d: f64 = fields[3]
        .parse()
        .map_err(|e| Error::Parse(format!("bad range constraint: {e}")))?;
    let coord_fields = 2 * n;
    let base = 4 + coord_fields;
    if fields.len() != base + 1 && fields.len() != base + 4 {
        return Err(Error::Parse(format!(
            "record for n={n} expects {} or {} fields, got {}",
            base + 1,
            base + 4,
            fields.len()
        )));
    }
    let mut coords = Vec::with_capacity(n);
    for pair in fields[4..base].chunks(2) {
        let x: f64 = pair[0]
            .parse()
            .map_err(|e| Error::Parse(format!("bad coordinate: {e}")))?;
        let y: f64 = pair[1]
            .parse()
            .map_err(|e| Error::Parse(format!("bad coordinate: {e}")))?;
        coords.push([x, y]);
    }
    let label = AdjMatrix::from_bitstring(n, fields[base])?;
    let meta = if fields.len() == base + 4 {
        Some(PredictionMeta {
            source: fields[base + 1].to_string(),
            horizon: fields[base + 2]
                .parse()
                .map_err(|e| Error::Parse(format!("bad horizon: {e}")))?,
            seed: fields[base + 3]
                .parse()
                .map_err(|e| Error::Parse(format!("bad seed: {e}")))?,
        })
    } else {
        None
    };
    Ok(Record {
        index,
        instance: Instance { coords, k, d, label },
        meta,
    })
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        writeln!(w, "{}", format_record(record))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line)?);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Parse(format!("manifest serialization: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest parse: {e}")))
}

/// splitmix64: decorrelates per-instance seeds derived from (seed, index).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E3779B97F4A7C15)
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Samples and exactly solves `count` instances, writing the records file and
/// its manifest. Instances are solved in parallel and written in index order,
/// so output bytes depend only on the parameters and seed.
pub fn generate_dataset(
    count: usize,
    n: usize,
    k: usize,
    d: f64,
    seed: u64,
    records_path: &Path,
    manifest_path: &Path,
) -> Result<Manifest> {
    let records: Vec<Record> = (0..count)
        .into_par_iter()
        .map(|idx| -> Result<Record> {
            let coords = sample_coords(n, derive_seed(seed, idx as u64))?;
            let solved = solve_exact(&coords, k, d)?;
            let instance = Instance {
                coords,
                k,
                d,
                label: solved.adjacency,
            };
            instance.check_invariants()?;
            Ok(Record {
                index: idx as u64,
                instance,
                meta: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pairs = (n * (n - 1) / 2).max(1) as f64;
    let edge_marginal = records
        .iter()
        .map(|r| r.instance.label.edge_count() as f64 / pairs)
        .sum::<f64>()
        / count.max(1) as f64;
    let mean_components = records
        .iter()
        .map(|r| {
            let (c, _) = crate::graph::connected_components(&r.instance.label)
                .expect("labels validated above");
            c as f64
        })
        .sum::<f64>()
        / count.max(1) as f64;

    write_records(records_path, &records)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count,
        n,
        k,
        d,
        seed,
        edge_marginal,
        mean_components,
    };
    write_manifest(manifest_path, &manifest)?;
    Ok(manifest)
}
