//! Text vector files: `<count> <d>` header, then one `<id> <v1> ... <vd>`
//! line per vector. Shared by word, entity and relation embeddings.
//!
//! Values are written with Rust's shortest-round-trip float formatting, so
//! a write/read cycle reproduces every f64 bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::KbError;

#[derive(Clone, Debug, Default)]
pub struct VectorTable {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl VectorTable {
    pub fn new(dim: usize) -> Self {
        VectorTable { dim, vectors: BTreeMap::new() }
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: impl Into<String>, v: Vec<f64>) {
        debug_assert_eq!(v.len(), self.dim);
        self.vectors.insert(id.into(), v);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn read_vectors(path: &Path) -> Result<VectorTable, KbError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(KbError::MalformedVector {
                path: display,
                line: 1,
                msg: "missing `<count> <dim>` header".to_string(),
            })
        }
    };
    let mut parts = header.split_whitespace();
    let (count, dim) = match (
        parts.next().and_then(|s| s.parse::<usize>().ok()),
        parts.next().and_then(|s| s.parse::<usize>().ok()),
    ) {
        (Some(c), Some(d)) if parts.next().is_none() => (c, d),
        _ => {
            return Err(KbError::MalformedVector {
                path: display,
                line: 1,
                msg: format!("bad header '{header}'"),
            })
        }
    };

    let mut table = VectorTable::new(dim);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-empty line").to_string();
        let values: Result<Vec<f64>, _> = fields.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| KbError::MalformedVector {
            path: display.clone(),
            line: line_no,
            msg: e.to_string(),
        })?;
        if values.len() != dim {
            return Err(KbError::MalformedVector {
                path: display.clone(),
                line: line_no,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        table.vectors.insert(id, values);
    }
    if table.vectors.len() != count {
        return Err(KbError::MalformedVector {
            path: display,
            line: 1,
            msg: format!("header says {count} vectors, file holds {}", table.vectors.len()),
        });
    }
    Ok(table)
}

/// Writes vectors sorted by id for reproducible bytes.
pub fn write_vectors(path: &Path, table: &VectorTable) -> Result<(), KbError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{} {}", table.vectors.len(), table.dim)?;
    for (id, v) in &table.vectors {
        let joined: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{} {}", id, joined.join(" "))?;
    }
    Ok(())
}
