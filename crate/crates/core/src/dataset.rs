use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::Architecture;

/// Observations `(Z_t, Y_t)`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(input_dim: usize, output_dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidInput("dataset dimensions must be positive".into()));
        }
        if !inputs.len().is_multiple_of(input_dim) || !targets.len().is_multiple_of(output_dim) {
            return Err(Error::DimensionMismatch("ragged dataset".into()));
        }
        let n = inputs.len() / input_dim;
        if targets.len() / output_dim != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} inputs but {} targets",
                targets.len() / output_dim
            )));
        }
        if n < output_dim + 1 {
            return Err(Error::InvalidInput(format!(
                "need at least d+1 = {} observations, got {n}",
                output_dim + 1
            )));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        Ok(Self {
            input_dim,
            output_dim,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    pub fn target(&self, t: usize) -> &[f64] {
        &self.targets[t * self.output_dim..(t + 1) * self.output_dim]
    }

    /// Returns a copy with rows reordered as `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(self.inputs.len());
        let mut targets = Vec::with_capacity(self.targets.len());
        for &t in order {
            inputs.extend_from_slice(self.input(t));
            targets.extend_from_slice(self.target(t));
        }
        Self {
            inputs,
            targets,
            ..*self
        }
    }

    pub fn check_architecture(&self, arch: &Architecture) -> Result<()> {
        if arch.input_dim != self.input_dim || arch.output_dim != self.output_dim {
            return Err(Error::DimensionMismatch(format!(
                "architecture maps {} -> {} but dataset has {} inputs and {} outputs",
                arch.input_dim, arch.output_dim, self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }

    /// Reads CSV with header `z_1..z_{d'}, y_1..y_d`.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut input_cols = Vec::new();
        let mut output_cols = Vec::new();
        for (c, name) in headers.iter().enumerate() {
            let name = name.trim();
            let (kind, idx) = name
                .split_once('_')
                .and_then(|(k, i)| i.parse::<usize>().ok().map(|i| (k, i)))
                .ok_or_else(|| Error::InvalidInput(format!("unexpected CSV column '{name}'")))?;
            match kind {
                "z" => input_cols.push((idx, c)),
                "y" => output_cols.push((idx, c)),
                _ => return Err(Error::InvalidInput(format!("unexpected CSV column '{name}'"))),
            }
        }
        for (cols, label) in [(&mut input_cols, "z"), (&mut output_cols, "y")] {
            cols.sort();
            if cols.is_empty() || cols.iter().enumerate().any(|(i, &(idx, _))| idx != i + 1) {
                return Err(Error::InvalidInput(format!("{label} columns must be numbered 1..k")));
            }
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |c: usize| -> Result<f64> {
                record.get(c).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| {
                    Error::InvalidInput(format!("bad number in data row {}, column {}", line + 1, c + 1))
                })
            };
            for &(_, c) in &input_cols {
                inputs.push(parse(c)?);
            }
            for &(_, c) in &output_cols {
                targets.push(parse(c)?);
            }
        }
        Self::new(input_cols.len(), output_cols.len(), inputs, targets)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.input_dim)
            .map(|i| format!("z_{i}"))
            .chain((1..=self.output_dim).map(|i| format!("y_{i}")))
            .collect();
        w.write_record(&header)?;
        for t in 0..self.len() {
            let row: Vec<String> = self
                .input(t)
                .iter()
                .chain(self.target(t))
                .map(|v| format!("{v:.16e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
