use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// How token-level hidden states of a span are reduced to one vector.
/// The declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    Min,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Mean, Pooling::Max, Pooling::Min];
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::Min => "min",
        })
    }
}

impl std::str::FromStr for Pooling {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "min" => Ok(Pooling::Min),
            other => Err(CoreError::Invalid(format!("unknown pooling {other:?} (mean|max|min)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub layer: usize,
    pub pooling: Pooling,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub layer: usize,
    pub pooling: Pooling,
    pub score: f64,
    pub grid: Vec<GridCell>,
}

/// Scores every `(layer, pooling)` candidate on dev data and keeps the best;
/// exact ties go to the lower layer, then to mean < max < min.
pub fn select_layer_pooling(
    candidates: &[(usize, Pooling)],
    mut dev_score: impl FnMut(usize, Pooling) -> Result<f64>,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(CoreError::Empty("layer/pooling grid".into()));
    }
    let mut order = candidates.to_vec();
    order.sort();
    order.dedup();
    let mut grid = Vec::with_capacity(order.len());
    for (layer, pooling) in order {
        let score = dev_score(layer, pooling)?;
        if !score.is_finite() {
            return Err(CoreError::NonFinite(format!("dev score for layer {layer}, {pooling} pooling")));
        }
        grid.push(GridCell { layer, pooling, score });
    }
    let best = grid.iter().fold(&grid[0], |b, c| if c.score > b.score { c } else { b });
    Ok(Selection { layer: best.layer, pooling: best.pooling, score: best.score, grid: grid.clone() })
}
