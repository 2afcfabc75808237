use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::experiments::{CheckOutcome, ExperimentOutput};
use crate::fit::PerJ;
use crate::rows::write_rows;
use crate::HarnessError;

#[derive(Serialize)]
struct FitSummary<'a> {
    experiment: &'a str,
    slope: Option<f64>,
    intercept: Option<f64>,
    stderr: Option<f64>,
    per_j: &'a [PerJ],
    report: &'a serde_json::Value,
    checks: &'a [CheckOutcome],
    passed: bool,
}

/// Writes `results.csv`, `fit.json`, `plot.dat` and any extra files into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_rows(fs::File::create(dir.join("results.csv"))?, &out.rows)?;

    let per_j = out.fit.as_ref().map_or(&[][..], |f| f.per_j.as_slice());
    let summary = FitSummary {
        experiment: out.experiment,
        slope: out.fit.as_ref().map(|f| f.slope),
        intercept: out.fit.as_ref().map(|f| f.intercept),
        stderr: out.fit.as_ref().map(|f| f.stderr),
        per_j,
        report: &out.report,
        checks: &out.checks,
        passed: out.passed(),
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(dir.join("fit.json"), json)?;

    let mut plot = fs::File::create(dir.join("plot.dat"))?;
    writeln!(plot, "# {}", out.plot_labels)?;
    for (x, y) in &out.plot {
        writeln!(plot, "{x} {y}")?;
    }
    for (name, contents) in &out.extra_files {
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}
