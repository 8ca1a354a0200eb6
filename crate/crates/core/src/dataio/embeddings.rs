use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Label → word vector. Labels are kept sorted so that every scan over the
/// table visits them in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, label: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let label = label.into();
        if vector.len() != self.dim {
            return Err(Error::Embedding(format!(
                "label {label:?} has {} values, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding(format!("label {label:?} has non-finite values")));
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(Error::Embedding(format!("label {label:?} is a zero vector")));
        }
        if self.entries.contains_key(&label) {
            return Err(Error::Embedding(format!("duplicate label {label:?}")));
        }
        self.entries.insert(label, vector);
        Ok(())
    }

    pub fn get(&self, label: &str) -> Result<&[f64]> {
        self.entries.get(label).map(Vec::as_slice).ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }

    /// Entries in lexicographic label order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Unit-norm Gaussian direction seeded by the SHA-256 of the label, so the
    /// same label always maps to the same vector for a given `dim`.
    pub fn hashed_unit_vector(label: &str, dim: usize) -> Vec<f64> {
        let digest = Sha256::digest(label.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::tensor::l2_norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    pub fn synthetic<'a>(labels: impl IntoIterator<Item = &'a str>, dim: usize) -> Self {
        let mut t = Self::new(dim);
        for l in labels {
            if !t.contains(l) {
                t.insert(l, Self::hashed_unit_vector(l, dim)).expect("hashed vectors are valid");
            }
        }
        t
    }
}

/// Reads `label<TAB>v1<TAB>...<TAB>vD` rows. The first row fixes `D`.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let mut fields = line.split('\t');
        let label = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(format!("bad float {f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(parse_err(format!("label {label:?} has no values")));
        }
        let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.len() != t.dim() {
            return Err(parse_err(format!("ragged row: {} values, expected {}", values.len(), t.dim())));
        }
        t.insert(label, values).map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(table.unwrap_or_else(|| EmbeddingTable::new(0)))
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (label, v) in table.iter() {
        let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{label}\t{}", row.join("\t")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(rows: &[(&str, usize)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for (label, n) in rows {
            let vals: Vec<String> = (0..*n).map(|i| format!("{}", 0.1 + i as f64)).collect();
            writeln!(f, "{label}\t{}", vals.join("\t")).unwrap();
        }
        f
    }

    #[test]
    fn loads_three_rows_of_fifty() {
        let f = tsv(&[("man", 50), ("shirt", 50), ("horse", 50)]);
        let t = load_embeddings(f.path()).unwrap();
        assert_eq!(t.dim(), 50);
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn ragged_row_is_rejected() {
        let f = tsv(&[("man", 50), ("shirt", 49)]);
        let err = load_embeddings(f.path()).unwrap_err().to_string();
        assert!(err.contains("ragged"), "{err}");
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let f = tsv(&[("man", 50), ("man", 50)]);
        let err = load_embeddings(f.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn zero_vector_is_rejected() {
        let mut t = EmbeddingTable::new(3);
        assert!(t.insert("z", vec![0.0; 3]).is_err());
    }

    #[test]
    fn hashed_vectors_are_unit_and_stable() {
        let a = EmbeddingTable::hashed_unit_vector("red-circle", 50);
        let b = EmbeddingTable::hashed_unit_vector("red-circle", 50);
        let c = EmbeddingTable::hashed_unit_vector("blue-square", 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((crate::tensor::l2_norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn write_then_load_is_exact() {
        let t = EmbeddingTable::synthetic(["a", "b", "c"], 7);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_embeddings(f.path(), &t).unwrap();
        assert_eq!(load_embeddings(f.path()).unwrap(), t);
    }
}
