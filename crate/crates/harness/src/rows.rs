//! Result rows and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub seed: usize,
    pub t: f64,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn new(experiment: &str, j: usize, seed: usize, t: f64, metric: impl Into<String>, value: f64) -> Self {
        Self {
            experiment: experiment.to_string(),
            j,
            seed,
            t,
            metric: metric.into(),
            value,
        }
    }
}

/// Sorts rows into their canonical emission order.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.experiment
            .cmp(&b.experiment)
            .then(a.j.cmp(&b.j))
            .then(a.seed.cmp(&b.seed))
            .then(a.metric.cmp(&b.metric))
            .then(a.t.total_cmp(&b.t))
    });
}

pub fn write_rows<W: Write>(out: W, rows: &[ResultRow]) -> Result<(), HarnessError> {
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(HarnessError::Config(format!(
            "non-finite value for {} at J={} seed={}",
            r.metric, r.j, r.seed
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["experiment", "J", "seed", "t", "metric", "value"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}
