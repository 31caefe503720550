use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::metrics::Comparison;
use super::synthetic::Dataset;
use crate::error::{Error, Result};
use crate::result::InferenceResult;

/// Name of the marker left behind by a failed run.
pub const FAILURE_MARKER: &str = "FAILED";

/// Half-width of the plotted band in standard deviations.
pub const BAND_Z: f64 = 1.96;

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

fn write_csv_rows<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// `grid, reference, mean, lower95, upper95` with the band at mean ± 1.96 sd.
pub fn write_y_estimate(path: &Path, data: &Dataset, result: &InferenceResult<f64>) -> Result<()> {
    let rows = (0..data.grid.len()).map(|i| {
        let (m, s) = (result.mean[i], result.stddev[i]);
        (data.grid[i], data.y_ref[i], m, m - BAND_Z * s, m + BAND_Z * s)
    });
    write_csv_rows(path, &["grid", "reference", "mean", "lower95", "upper95"], rows)
}

/// `kind, index, coordinate, value`; `kind` is `u` or `y`.
pub fn write_observations(path: &Path, data: &Dataset) -> Result<()> {
    let o = &data.observations;
    let us = o
        .u_indices
        .iter()
        .zip(&o.u_values)
        .map(|(&i, &v)| ("u", i, data.state_grid[i], v));
    let ys = o
        .y_indices
        .iter()
        .zip(&o.y_values)
        .map(|(&i, &v)| ("y", i, data.grid[i], v));
    write_csv_rows(path, &["kind", "index", "coordinate", "value"], us.chain(ys))
}

/// One row per result that carries an ELBO estimate.
pub fn write_elbo_table(path: &Path, results: &[InferenceResult<f64>]) -> Result<()> {
    let rows = results.iter().filter_map(|r| {
        r.elbo.map(|e| {
            (
                r.method.tag(),
                r.variant.clone().unwrap_or_default(),
                e.value,
                e.stderr,
                r.theta_hat.sigma,
                r.theta_hat.lambda,
            )
        })
    });
    write_csv_rows(
        path,
        &["method", "variant", "elbo", "stderr", "sigma_hat", "lambda_hat"],
        rows,
    )
}

/// `label, index, reference, candidate` for one statistic.
pub fn write_scatter(path: &Path, comparisons: &[(String, Comparison)], stddev: bool) -> Result<()> {
    let rows = comparisons.iter().flat_map(|(label, c)| {
        let pairs = if stddev { &c.scatter_stddev } else { &c.scatter_mean };
        pairs.iter().enumerate().map(move |(i, &(a, b))| (label.as_str(), i, a, b))
    });
    write_csv_rows(path, &["label", "index", "reference", "candidate"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::ObservationSet;
    use crate::gp_prior::GpHyperparams;
    use crate::instrument::Counts;
    use crate::result::Method;

    fn dataset() -> Dataset {
        Dataset {
            grid: vec![0.0, 0.5, 1.0],
            y_ref: vec![0.1, 0.2, 0.3],
            state_grid: vec![0.25, 0.75],
            u_ref: vec![0.9, 0.4],
            observations: ObservationSet {
                u_indices: vec![1],
                u_values: vec![0.41],
                y_indices: vec![0, 2],
                y_values: vec![0.1, 0.3],
                sigma_us: 0.01,
                sigma_ys: 0.01,
            },
            redraws: 0,
            seed: 0,
        }
    }

    #[test]
    fn band_is_mean_plus_minus_196_sd() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        let r = InferenceResult {
            method: Method::LaplaceEm,
            variant: None,
            theta_hat: GpHyperparams::new(1.0, 0.2, 0.01).unwrap(),
            mean: vec![1.0, 2.0, 3.0],
            stddev: vec![0.5, 0.0, 1.0],
            factor: None,
            n_samples: None,
            elbo: None,
            iterations: 1,
            converged: true,
            seed: None,
            trace: vec![],
            counts: Counts::default(),
            wall_time_s: 0.0,
        };
        write_y_estimate(&path, &dataset(), &r).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "grid,reference,mean,lower95,upper95");
        assert_eq!(lines.len(), 4);
        let cells: Vec<f64> = lines[1].split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells, vec![0.0, 0.1, 1.0, 1.0 - 0.98, 1.0 + 0.98]);
        assert!(!dir.path().join(".y.csv.tmp").exists());
    }

    #[test]
    fn observations_list_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        write_observations(&path, &dataset()).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "kind,index,coordinate,value\nu,1,0.75,0.41\ny,0,0.0,0.1\ny,2,1.0,0.3\n"
        );
    }

    #[test]
    fn scatter_has_one_row_per_coefficient() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let c = Comparison {
            mean_rel_l2: 0.0,
            stddev_rel_l2: 0.0,
            mean_max_abs: 0.0,
            stddev_max_abs: 0.0,
            scatter_mean: vec![(1.0, 1.1), (2.0, 2.1), (3.0, 2.9)],
            scatter_stddev: vec![(0.1, 0.1), (0.2, 0.2), (0.3, 0.3)],
        };
        write_scatter(&path, &[("a".into(), c)], true).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().starts_with("a,2,0.3,"));
    }
}
