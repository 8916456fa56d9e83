//! Flat tabular datasets: a `label,feat_0,...,feat_{d-1}` header, then one
//! row per example.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn read_csv(path: impl AsRef<Path>, num_classes: usize, train_len: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Data("empty csv file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Data(format!("csv header must be `label,feat_0,...`, got `{header}`")));
    }
    for (i, c) in cols[1..].iter().enumerate() {
        if *c != format!("feat_{i}") {
            return Err(Error::Data(format!("csv column {} should be `feat_{i}`, got `{c}`", i + 1)));
        }
    }
    let d = cols.len() - 1;
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Data(format!("line {}: expected {} fields, got {}", no + 1, d + 1, fields.len())));
        }
        let label = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("line {}: bad label `{}`", no + 1, fields[0])))?;
        targets.push(label);
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|_| Error::Data(format!("line {}: bad value `{f}`", no + 1)))?);
        }
    }
    let n = targets.len();
    Dataset::new(Tensor::new(vec![n, d], data)?, targets, num_classes, train_len)
}

/// Writes every example, flattening non-flat inputs.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let d: usize = ds.sample_shape().iter().product();
    let mut s = String::from("label");
    for i in 0..d {
        write!(s, ",feat_{i}").unwrap();
    }
    s.push('\n');
    for (r, row) in ds.inputs.data().chunks(d).enumerate() {
        write!(s, "{}", ds.targets[r]).unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
