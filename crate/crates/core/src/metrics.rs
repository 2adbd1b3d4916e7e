//! Training loss, error measures, and continual-learning metrics over an
//! accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{tape::grid_gradient, GridField, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub alpha: f64,
    pub l_max: f64,
    pub sobolev_lambda: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            l_max: 5.0,
            sobolev_lambda: 1e-3,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.l_max > 0.0 && self.sobolev_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "metric config needs alpha > 0, l_max > 0, lambda >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sobolev loss of one prediction recorded on the tape: grid mean of the
/// squared error plus `lambda` times the grid mean of the squared error
/// gradient.
pub fn sobolev_loss(tape: &mut Tape, pred: Var, target: &Tensor, lambda: f64) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(shape_err(format!(
            "prediction {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let n = target.len() as f64;
    let y = tape.constant(target.clone());
    let e = tape.sub(pred, y)?;
    let sq = tape.sum_squares(e);
    let mut loss = tape.scale(sq, 1.0 / n);
    if lambda > 0.0 {
        let g = tape.grid_grad(e)?;
        let gs = tape.sum_squares(g);
        let gs = tape.scale(gs, lambda / n);
        loss = tape.add(loss, gs)?;
    }
    Ok(loss)
}

/// Value of [`sobolev_loss`] averaged over a batch, without a tape.
pub fn sobolev_value(preds: &[GridField], targets: &[GridField], lambda: f64) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(shape_err(
            "sobolev_value needs equally many, non-zero predictions and targets",
        ));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if !p.same_shape(t) {
            return Err(shape_err("prediction and target grids differ"));
        }
        let e: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
        let n = e.len() as f64;
        let mut v = e.iter().map(|x| x * x).sum::<f64>() / n;
        if lambda > 0.0 {
            let g = grid_gradient(&e, p.channels(), p.height(), p.width());
            v += lambda * g.iter().map(|x| x * x).sum::<f64>() / n;
        }
        total += v;
    }
    Ok(total / preds.len() as f64)
}

/// `‖pred − target‖₂ / ‖target‖₂` over the vectorized field.
pub fn rel_l2(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err(format!(
            "{} vs {} values",
            pred.len(),
            target.len()
        )));
    }
    let denom: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroNorm("target"));
    }
    let num: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Mean of per-sample relative errors.
pub fn mean_rel_l2(preds: &[GridField], targets: &[GridField]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(shape_err("prediction and target counts differ"));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        s += rel_l2(p.data(), t.data())?;
    }
    Ok(s / preds.len() as f64)
}

/// Accuracy `exp(−α·rel / L_max)`.
pub fn accuracy_r(rel: f64, cfg: &MetricConfig) -> f64 {
    (-cfg.alpha * rel / cfg.l_max).exp()
}

/// Lower-triangular matrix of accuracies: row `i` holds the accuracy on each
/// task `j ≤ i` after training stage `i` (both zero-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    labels: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let rows = (0..labels.len()).map(|i| vec![None; i + 1]).collect();
        Self { labels, rows }
    }

    /// Build from fully populated rows (row `i` of length `i + 1`).
    pub fn from_rows(labels: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(labels);
        if rows.len() > m.tasks() {
            return Err(shape_err("more rows than tasks"));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(shape_err(format!("row {i} must have {} entries", i + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn set(&mut self, stage: usize, task: usize, value: f64) -> Result<()> {
        if task > stage || stage >= self.tasks() {
            return Err(Error::InvalidArgument(format!(
                "cell ({stage}, {task}) is outside the lower triangle of {} tasks",
                self.tasks()
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {value} is outside [0, 1]"
            )));
        }
        self.rows[stage][task] = Some(value);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows
            .get(stage)
            .and_then(|r| r.get(task))
            .copied()
            .flatten()
    }

    fn require(&self, stage: usize, task: usize) -> Result<f64> {
        self.get(stage, task)
            .ok_or_else(|| Error::MissingEntries(format!("stage {stage}, task {task}")))
    }

    /// Number of leading stages whose rows are complete.
    pub fn completed_stages(&self) -> usize {
        self.rows
            .iter()
            .take_while(|r| r.iter().all(Option::is_some))
            .count()
    }

    pub fn populated(&self) -> usize {
        self.rows.iter().flatten().filter(|v| v.is_some()).count()
    }

    pub fn avg_accuracy(&self, stage: usize) -> Result<f64> {
        if stage >= self.tasks() {
            return Err(Error::InvalidArgument(format!("no stage {stage}")));
        }
        let mut s = 0.0;
        for j in 0..=stage {
            s += self.require(stage, j)?;
        }
        Ok(s / (stage + 1) as f64)
    }

    /// Per-task forgetting for every earlier task, and their mean.
    pub fn forgetting(&self, stage: usize) -> Result<(Vec<f64>, f64)> {
        if stage == 0 {
            return Err(Error::InvalidArgument(
                "forgetting needs at least two stages".into(),
            ));
        }
        if stage >= self.tasks() {
            return Err(Error::InvalidArgument(format!("no stage {stage}")));
        }
        let mut per_task = Vec::with_capacity(stage);
        for j in 0..stage {
            let mut best = f64::NEG_INFINITY;
            for k in j..=stage {
                best = best.max(self.require(k, j)?);
            }
            per_task.push(best - self.require(stage, j)?);
        }
        let mean = per_task.iter().sum::<f64>() / stage as f64;
        Ok((per_task, mean))
    }

    /// CSV with one row per stage and one column per task; cells above the
    /// diagonal are empty. Values use the shortest exact decimal form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&self.labels[i]);
            for j in 0..self.tasks() {
                out.push(',');
                if let Some(Some(v)) = row.get(j) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))?;
        let labels: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        if labels.is_empty() {
            return Err(Error::Format("CSV has no task columns".into()));
        }
        let mut m = Self::new(labels);
        for (i, line) in lines.enumerate() {
            for (j, cell) in line.split(',').skip(1).enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Format(format!("bad cell `{cell}` at row {i}")))?;
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }
}
