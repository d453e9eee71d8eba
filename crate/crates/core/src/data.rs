//! Transition records, the append-only real-data store, the bounded ring for
//! model-generated rollouts, and JSON-lines persistence.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::TransitionBatch;
use crate::error::check_dim;
use crate::{Error, Matrix, Result, Vector};

/// One environment transition. Field names are the on-disk schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_next: Vec<f64>,
    pub r: f64,
    /// Whether the certifier found a feasible plan at `x`.
    pub feasible: bool,
    /// Episode ended by a constraint violation.
    pub done: bool,
    pub t: usize,
    pub episode: usize,
}

impl Transition {
    pub fn new(x: &Vector, u: &Vector, x_next: &Vector, r: f64) -> Self {
        Self {
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            x_next: x_next.as_slice().to_vec(),
            r,
            feasible: true,
            done: false,
            t: 0,
            episode: 0,
        }
    }

    pub fn state(&self) -> Vector {
        Vector::from_column_slice(&self.x)
    }

    pub fn action(&self) -> Vector {
        Vector::from_column_slice(&self.u)
    }

    pub fn next_state(&self) -> Vector {
        Vector::from_column_slice(&self.x_next)
    }

    fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        check_dim("transition state", n_x, self.x.len())?;
        check_dim("transition action", n_u, self.u.len())?;
        check_dim("transition next state", n_x, self.x_next.len())?;
        let finite = self
            .x
            .iter()
            .chain(&self.u)
            .chain(&self.x_next)
            .chain(std::iter::once(&self.r))
            .all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("transition"))
        }
    }
}

fn stack(rows: &[&[f64]], dim: usize) -> Matrix {
    let mut m = Matrix::zeros(dim, rows.len());
    for (j, r) in rows.iter().enumerate() {
        m.column_mut(j).copy_from_slice(r);
    }
    m
}

fn batch_of<'a>(records: impl Iterator<Item = &'a Transition>, n_x: usize, n_u: usize) -> TransitionBatch {
    let recs: Vec<&Transition> = records.collect();
    let x = stack(&recs.iter().map(|t| t.x.as_slice()).collect::<Vec<_>>(), n_x);
    let u = stack(&recs.iter().map(|t| t.u.as_slice()).collect::<Vec<_>>(), n_u);
    let xn = stack(&recs.iter().map(|t| t.x_next.as_slice()).collect::<Vec<_>>(), n_x);
    TransitionBatch::new(x, u, xn).expect("dataset rows are validated on insertion")
}

/// Append-only store of real transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    n_x: usize,
    n_u: usize,
    records: Vec<Transition>,
}

impl TransitionDataset {
    pub fn new(n_x: usize, n_u: usize) -> Self {
        Self {
            n_x,
            n_u,
            records: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n_x
    }

    pub fn action_dim(&self) -> usize {
        self.n_u
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate(self.n_x, self.n_u)?;
        self.records.push(t);
        Ok(())
    }

    pub fn extend(&mut self, other: &TransitionDataset) -> Result<()> {
        check_dim("dataset state", self.n_x, other.n_x)?;
        check_dim("dataset action", self.n_u, other.n_u)?;
        self.records.extend_from_slice(&other.records);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Transition] {
        &self.records
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.records[i]
    }

    /// States of all records flagged feasible.
    pub fn feasible_states(&self) -> impl Iterator<Item = &[f64]> {
        self.records.iter().filter(|t| t.feasible).map(|t| t.x.as_slice())
    }

    /// First state of every episode.
    pub fn initial_states(&self) -> impl Iterator<Item = &[f64]> {
        self.records.iter().filter(|t| t.t == 0).map(|t| t.x.as_slice())
    }

    pub fn violations(&self) -> usize {
        self.records.iter().filter(|t| t.done).count()
    }

    pub fn to_batch(&self) -> Result<TransitionBatch> {
        if self.records.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(batch_of(self.records.iter(), self.n_x, self.n_u))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.records {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a JSON-lines file; dimensions are taken from the first record.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut ds: Option<Self> = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Transition = serde_json::from_str(&line)?;
            let d = ds.get_or_insert_with(|| Self::new(t.x.len(), t.u.len()));
            d.push(t)?;
        }
        ds.ok_or(Error::EmptyInput)
    }
}

/// Bounded FIFO store for model-generated transitions.
#[derive(Debug, Clone)]
pub struct ReplayRing {
    n_x: usize,
    n_u: usize,
    capacity: usize,
    records: VecDeque<Transition>,
}

impl ReplayRing {
    pub fn new(n_x: usize, n_u: usize, capacity: usize) -> Self {
        Self {
            n_x,
            n_u,
            capacity: capacity.max(1),
            records: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate(self.n_x, self.n_u)?;
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.records[i]
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}
