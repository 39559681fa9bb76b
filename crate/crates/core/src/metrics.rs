//! Accuracy matrix, final average accuracy, backward transfer and forgetting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy matrix: `rows[j][i]` is the accuracy (percent) on
/// task `i` after training task `j`, for `i <= j`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { rows };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Contract("accuracy matrix has no rows".into()));
        }
        for (j, row) in self.rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::Contract(format!(
                    "accuracy row {j} has {} entries, expected {}",
                    row.len(),
                    j + 1
                )));
            }
            if row.iter().any(|v| !(0.0..=100.0).contains(v)) {
                return Err(Error::Contract(format!("accuracy row {j} leaves [0, 100]")));
            }
        }
        Ok(())
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Contract(format!(
                "row after task {} must have {} entries",
                self.rows.len(),
                self.rows.len() + 1
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy trajectory of task `i` over rows `j >= i`.
    pub fn trajectory(&self, i: usize) -> Vec<f64> {
        self.rows.iter().skip(i).map(|r| r[i]).collect()
    }
}

/// `ACC = mean_i R[T][i]`, `BWT = mean_{i<T} (R[T][i] - R[i][i])`; BWT is 0 for
/// a single task.
pub fn acc_bwt(r: &AccuracyMatrix) -> Result<(f64, f64)> {
    r.check()?;
    let t = r.n_tasks();
    let last = &r.rows[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = if t == 1 {
        0.0
    } else {
        (0..t - 1).map(|i| last[i] - r.rows[i][i]).sum::<f64>() / (t - 1) as f64
    };
    Ok((acc, bwt))
}

/// `F_i = max_{j >= i} R[j][i] - R[T][i]` for every task (zero for the last).
pub fn forgetting(r: &AccuracyMatrix) -> Result<Vec<f64>> {
    r.check()?;
    let t = r.n_tasks();
    Ok((0..t)
        .map(|i| {
            let best = r
                .trajectory(i)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            best - r.rows[t - 1][i]
        })
        .collect())
}
