//! Performance matrix and the continual-learning summaries computed from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p[i][j]`: normalized return on task `j+1` evaluated after training task
/// `i` (row 0 is the evaluation before any training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfMatrix {
    pub n: usize,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl PerfMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, rows: vec![vec![None; n]; n + 1] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.len() != n + 1 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("performance matrix must have N+1 rows of length N".into()));
        }
        let mut m = Self::new(n);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                m.set(i, j + 1, v)?;
            }
        }
        Ok(m)
    }

    /// Stores `p_{i,j}` with `j` 1-based.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i > self.n || j == 0 || j > self.n {
            return Err(Error::Shape(format!("entry ({i},{j}) outside a {}-task matrix", self.n)));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Data(format!("p_({i},{j}) = {value} outside [0, 1]")));
        }
        self.rows[i][j - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        self.rows
            .get(i)
            .and_then(|r| r.get(j.wrapping_sub(1)))
            .copied()
            .flatten()
            .ok_or_else(|| Error::Data(format!("missing entry p_({i},{j})")))
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }
}

/// `R_i = (1/i) Σ_{j≤i} p_{i,j}`.
pub fn continual_return(p: &PerfMatrix, i: usize) -> Result<f64> {
    if i == 0 || i > p.n {
        return Err(Error::Data(format!("continual return needs 1 <= i <= {}, got {i}", p.n)));
    }
    let mut sum = 0.0;
    for j in 1..=i {
        sum += p.get(i, j)?;
    }
    Ok(sum / i as f64)
}

/// Per-task values keyed by task index plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTask {
    pub per_task: Vec<(usize, f64)>,
    pub mean: Option<f64>,
}

impl PerTask {
    fn from(values: Vec<(usize, f64)>) -> Self {
        let mean = (!values.is_empty()).then(|| values.iter().map(|v| v.1).sum::<f64>() / values.len() as f64);
        Self { per_task: values, mean }
    }
}

/// `F_i = (1/(i−1)) Σ_{j<i} (p_{i−1,j} − p_{i,j})` for `i = 2..N`.
pub fn forgetting(p: &PerfMatrix) -> Result<PerTask> {
    let mut out = Vec::new();
    for i in 2..=p.n {
        let mut sum = 0.0;
        for j in 1..i {
            sum += p.get(i - 1, j)? - p.get(i, j)?;
        }
        out.push((i, sum / (i - 1) as f64));
    }
    Ok(PerTask::from(out))
}

/// `T_i = (1/(N−i)) Σ_{j>i} (p_{i,j} − p_{i−1,j})` for `i = 1..N−1`.
pub fn forward_transfer(p: &PerfMatrix) -> Result<PerTask> {
    let mut out = Vec::new();
    for i in 1..p.n {
        let mut sum = 0.0;
        for j in i + 1..=p.n {
            sum += p.get(i, j)? - p.get(i - 1, j)?;
        }
        out.push((i, sum / (p.n - i) as f64));
    }
    Ok(PerTask::from(out))
}

/// Summaries of one seed's matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// `R_1..R_N`; the last one is the headline continual return.
    pub continual_returns: Vec<f64>,
    pub forgetting: PerTask,
    /// Absent when the method trains every task from scratch.
    pub forward_transfer: Option<PerTask>,
}

impl SeedMetrics {
    pub fn compute(seed: u64, p: &PerfMatrix, with_transfer: bool) -> Result<Self> {
        let continual_returns = (1..=p.n).map(|i| continual_return(p, i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            continual_returns,
            forgetting: forgetting(p)?,
            forward_transfer: if with_transfer { Some(forward_transfer(p)?) } else { None },
        })
    }

    pub fn final_return(&self) -> f64 {
        *self.continual_returns.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub sem: f64,
    pub ci95: f64,
    pub n: usize,
    /// Set when only one value was available, so `sem` is 0 by convention.
    pub single: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Data("aggregate needs at least one value".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let sem = sd / (n as f64).sqrt();
    Ok(Summary { mean, sd, sem, ci95: 1.96 * sem, n, single: n == 1 })
}

/// Cross-seed report for one method on one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub note: String,
    pub method: String,
    pub sequence: String,
    pub per_seed: Vec<SeedMetrics>,
    pub continual_return: Summary,
    pub forgetting: Option<Summary>,
    pub forward_transfer: Option<Summary>,
}

pub const REPORT_NOTE: &str = "row 0 of each matrix is the evaluation before any training, used as p_(0,j) for T_1; \
continual_return is R_N (per-seed R_1..R_N are listed); intervals are 1.96*SEM";

impl MetricReport {
    pub fn build(method: &str, sequence: &str, per_seed: Vec<SeedMetrics>) -> Result<Self> {
        let returns: Vec<f64> = per_seed.iter().map(SeedMetrics::final_return).collect();
        let forget: Vec<f64> = per_seed.iter().filter_map(|s| s.forgetting.mean).collect();
        let transfer: Vec<f64> =
            per_seed.iter().filter_map(|s| s.forward_transfer.as_ref().and_then(|t| t.mean)).collect();
        Ok(Self {
            note: REPORT_NOTE.into(),
            method: method.into(),
            sequence: sequence.into(),
            continual_return: aggregate(&returns)?,
            forgetting: if forget.is_empty() { None } else { Some(aggregate(&forget)?) },
            forward_transfer: if transfer.is_empty() { None } else { Some(aggregate(&transfer)?) },
            per_seed,
        })
    }
}
