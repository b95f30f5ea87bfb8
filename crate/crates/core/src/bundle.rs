//! Problem bundles on disk.
//!
//! A bundle is a directory holding `H.csv` or `H.bin`, `G.csv` or `G.bin`,
//! `partition.json` and an optional `meta.json`:
//!
//! ```text
//! partition.json  {"d1": 8, "kind": "dense|conv|attention", "group_size": 2}
//!                 or {"groups": [[0, 1], [2, 3], ...]}
//! meta.json       {"const_term": 0.0, "damping": 1e-4, "samples": 100}
//! ```
//!
//! `H` is damped on load by `λ·mean(diag H)`; `λ` comes from the caller if
//! given, else from `meta.json`, else `DEFAULT_DAMPING`.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::builders::DEFAULT_DAMPING;
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix_binary, write_matrix_csv};
use crate::matrix::{damp, SymMatrix};
use crate::problem::{GroupPartition, PartitionKind, QuadraticProblem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PartitionFile {
    Explicit {
        groups: Vec<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        d1: Option<usize>,
    },
    Uniform {
        d1: usize,
        kind: PartitionKind,
        #[serde(default = "one")]
        group_size: usize,
    },
}

fn one() -> usize {
    1
}

impl PartitionFile {
    pub fn to_partition(&self) -> Result<GroupPartition> {
        match self {
            PartitionFile::Explicit { groups, d1 } => {
                let d1 = d1.unwrap_or_else(|| groups.iter().map(Vec::len).sum());
                GroupPartition::custom(d1, groups.clone())
            }
            PartitionFile::Uniform { d1, kind, group_size } => GroupPartition::contiguous(*d1, *group_size, *kind),
        }
    }

    pub fn from_partition(partition: &GroupPartition) -> PartitionFile {
        match (partition.kind(), partition.uniform_group_size()) {
            (PartitionKind::Custom, _) | (_, None) => PartitionFile::Explicit {
                groups: partition.groups().iter().map(|g| g.as_slice().to_vec()).collect(),
                d1: Some(partition.d1()),
            },
            (kind, Some(size)) => PartitionFile::Uniform { d1: partition.d1(), kind, group_size: size },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaFile {
    #[serde(default)]
    pub const_term: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub problem: QuadraticProblem,
    /// Relative damping that was applied to `H`.
    pub damping: f64,
}

fn find_matrix(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["bin", "csv"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(format!("{stem}.csv")),
        std::io::Error::new(ErrorKind::NotFound, format!("neither {stem}.csv nor {stem}.bin exists")),
    ))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_bundle(dir: impl AsRef<Path>, damping: Option<f64>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let h_path = find_matrix(dir, "H")?;
    let g_path = find_matrix(dir, "G")?;
    let h = read_matrix(&h_path)?;
    let g = read_matrix(&g_path)?;
    let partition: PartitionFile = read_json(&dir.join("partition.json"))?;
    let meta_path = dir.join("meta.json");
    let meta: MetaFile = if meta_path.exists() { read_json(&meta_path)? } else { MetaFile::default() };
    let lambda = damping.or(meta.damping).unwrap_or(DEFAULT_DAMPING);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::format(dir, format!("damping must be a nonnegative number, got {lambda}")));
    }
    let h = damp(&SymMatrix::new(h).map_err(|e| Error::format(&h_path, e.to_string()))?, lambda);
    let partition = partition.to_partition()?;
    let mut problem = QuadraticProblem::new(h, g, partition, meta.const_term)?;
    if let Some(n) = meta.samples {
        problem = problem.with_samples(n);
    }
    Ok(Bundle { problem, damping: lambda })
}

/// Writes `problem` as a bundle. `H` is stored as given, so loading it back
/// with damping 0 reproduces the problem.
pub fn write_bundle(dir: impl AsRef<Path>, problem: &QuadraticProblem, binary: bool, damping: Option<f64>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let h = problem.h().to_matrix();
    if binary {
        write_matrix_binary(dir.join("H.bin"), &h)?;
        write_matrix_binary(dir.join("G.bin"), problem.g())?;
    } else {
        write_matrix_csv(dir.join("H.csv"), &h)?;
        write_matrix_csv(dir.join("G.csv"), problem.g())?;
    }
    let partition = serde_json::to_string_pretty(&PartitionFile::from_partition(problem.partition()))?;
    let meta = serde_json::to_string_pretty(&MetaFile {
        const_term: problem.const_term(),
        damping,
        samples: problem.samples(),
    })?;
    for (name, text) in [("partition.json", partition), ("meta.json", meta)] {
        let p = dir.join(name);
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
