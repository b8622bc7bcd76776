//! On-disk artifact formats: trajectory CSV, metrics JSONL, λ checkpoints
//! and the run summary CSV.
//!
//! Numbers are written with Rust's shortest round-trip float formatting, so
//! re-running an experiment with the same seeds reproduces the files byte
//! for byte (wall-clock fields, which live only in the JSONL rows, excepted).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Trajectory;
use crate::optim::Driver;
use crate::varfamily::{Layout, SchemeSpec, VariationalParams};

/// One line of `metrics.jsonl`. Field order is part of the format.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    /// Step index for streaming runs; epoch index for epoch-based training.
    pub t: u64,
    pub elbo: f64,
    pub grad_norm: f64,
    pub ess_min: Option<f64>,
    pub acc_rate: Option<f64>,
    /// The only wall-clock (hence non-reproducible) field in any artifact.
    pub wall_ms: f64,
}

/// Append-only JSONL sink for [`MetricsRow`]s.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Opens for appending — used when resuming a run.
    pub fn append(path: &Path) -> Result<MetricsWriter> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::options().create(true).append(true).open(path)?),
        })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// Writes a simulated trajectory as `t, x_0.., y_0..` CSV.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let d_x = traj.states.first().map_or(0, |x| x.len());
    let d_y = traj.observations.first().map_or(0, |y| y.len());
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("t");
    for k in 0..d_x {
        header.push_str(&format!(",x_{k}"));
    }
    for k in 0..d_y {
        header.push_str(&format!(",y_{k}"));
    }
    writeln!(out, "{header}")?;
    for (t, (x, y)) in traj.states.iter().zip(&traj.observations).enumerate() {
        let mut line = t.to_string();
        for v in x.iter().chain(y.iter()) {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trajectory CSV produced by [`write_trajectory_csv`]; dimensions
/// come from the header columns.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty trajectory file", path.display())))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let d_x = cols.iter().filter(|c| c.starts_with("x_")).count();
    let d_y = cols.iter().filter(|c| c.starts_with("y_")).count();
    if cols.first() != Some(&"t") || d_x == 0 || d_y == 0 || cols.len() != 1 + d_x + d_y {
        return Err(Error::Config(format!(
            "{}: expected header t,x_0..,y_0.., got `{header}`",
            path.display()
        )));
    }

    let mut states = Vec::new();
    let mut observations = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Config(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: bad number `{s}`", path.display())))
        };
        let mut x = DVector::zeros(d_x);
        for k in 0..d_x {
            x[k] = parse(fields[1 + k])?;
        }
        let mut y = DVector::zeros(d_y);
        for k in 0..d_y {
            y[k] = parse(fields[1 + d_x + k])?;
        }
        states.push(x);
        observations.push(y);
    }
    if states.is_empty() {
        return Err(Error::Config(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    Ok(Trajectory {
        states,
        observations,
        seed: 0,
    })
}

/// Serialized λ snapshot: a JSON header describing the scheme and layout
/// plus the parameter vector as base64-coded little-endian doubles. Carries
/// the optimizer alongside so training resumes with the exact schedule
/// state.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub scheme: SchemeSpec,
    pub layout: Layout,
    pub delta: usize,
    pub init_seed: u64,
    /// Last fully processed step (online) or epoch (epoch-based training).
    pub t_done: u64,
    pub driver: Driver,
    pub lambda_len: usize,
    pub lambda: String,
}

pub fn save_checkpoint(
    path: &Path,
    params: &VariationalParams,
    driver: &Driver,
    t_done: u64,
) -> Result<()> {
    let ckpt = Checkpoint {
        schema: 1,
        scheme: params.scheme.clone(),
        layout: params.layout.clone(),
        delta: params.delta,
        init_seed: params.init_seed,
        t_done,
        driver: driver.clone(),
        lambda_len: params.lambda.len(),
        lambda: encode_f64s(params.lambda.as_slice()),
    };
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut out, &ckpt)?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VariationalParams, Driver, u64)> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ckpt.schema != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {}",
            ckpt.schema
        )));
    }
    let values = decode_f64s(&ckpt.lambda, ckpt.lambda_len)?;
    let params = VariationalParams {
        scheme: ckpt.scheme,
        lambda: DVector::from_vec(values),
        layout: ckpt.layout,
        delta: ckpt.delta,
        init_seed: ckpt.init_seed,
    };
    params
        .layout
        .check_partitions(params.lambda.len())
        .map_err(|e| Error::Checkpoint(format!("inconsistent λ layout: {e}")))?;
    Ok((params, ckpt.driver, ckpt.t_done))
}

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_f64s(payload: &str, expect: usize) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(payload)
        .map_err(|e| Error::Checkpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header promises {} doubles",
            bytes.len(),
            expect
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// One `summary.csv` row; wall-clock data is deliberately absent so the file
/// is byte-reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub replicate: u64,
    pub mode: String,
    pub scheme: String,
    pub t_len: usize,
    pub n: usize,
    pub m: usize,
    pub delta: usize,
    /// Optimizer steps taken (epochs or stream steps, mode-dependent).
    pub steps: u64,
    pub final_elbo: f64,
    pub grad_norm: f64,
    pub ess_min: Option<f64>,
    pub acc_rate: Option<f64>,
    pub rmse_smooth: Option<f64>,
    pub rmse_filt: Option<f64>,
    pub kappa1: Option<f64>,
    pub eval_rmse: Option<f64>,
    pub note: String,
}

pub const SUMMARY_HEADER: &str = "replicate,mode,scheme,t_len,n,m,delta,steps,final_elbo,\
grad_norm,ess_min,acc_rate,rmse_smooth,rmse_filt,kappa1,eval_rmse,note";

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{SUMMARY_HEADER}")?;
    let opt = |v: &Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.replicate,
            r.mode,
            r.scheme,
            r.t_len,
            r.n,
            r.m,
            r.delta,
            r.steps,
            r.final_elbo,
            r.grad_norm,
            opt(&r.ess_min),
            opt(&r.acc_rate),
            opt(&r.rmse_smooth),
            opt(&r.rmse_filt),
            opt(&r.kappa1),
            opt(&r.eval_rmse),
            r.note,
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate, LgssmParams};
    use crate::optim::StepSchedule;

    #[test]
    fn trajectory_csv_round_trips() {
        let model = LgssmParams::random_stable(3, 2, 8);
        let traj = simulate(&model, 25, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        write_trajectory_csv(&path, &traj).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.states.len(), traj.states.len());
        for t in 0..traj.states.len() {
            assert_eq!(back.states[t], traj.states[t]);
            assert_eq!(back.observations[t], traj.observations[t]);
        }
    }

    #[test]
    fn metrics_rows_round_trip_and_keep_field_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let rows = vec![
            MetricsRow {
                t: 0,
                elbo: -12.5,
                grad_norm: 3.25,
                ess_min: Some(48.0),
                acc_rate: None,
                wall_ms: 0.7,
            },
            MetricsRow {
                t: 1,
                elbo: -11.0,
                grad_norm: 2.5,
                ess_min: None,
                acc_rate: Some(0.9),
                wall_ms: 0.6,
            },
        ];
        let mut w = MetricsWriter::create(&path).unwrap();
        for r in &rows {
            w.write_row(r).unwrap();
        }
        w.flush().unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"t\":0,\"elbo\":-12.5,\"grad_norm\":3.25"));
        assert_eq!(read_metrics_jsonl(&path).unwrap(), rows);
    }

    #[test]
    fn checkpoints_restore_lambda_and_driver_exactly() {
        let model = LgssmParams::random_stable(2, 2, 3);
        let mut params = VariationalParams::from_lgssm(&model, 2).unwrap();
        for k in 0..params.lambda.len() {
            params.lambda[k] += 1e-3 * (k as f64).sin();
        }
        let driver = Driver::new(StepSchedule::adam(0.01), Some(10.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lambda.ckpt");
        save_checkpoint(&path, &params, &driver, 42).unwrap();
        let (restored, rdriver, t_done) = load_checkpoint(&path).unwrap();
        assert_eq!(restored.lambda, params.lambda);
        assert_eq!(restored.scheme, params.scheme);
        assert_eq!(restored.layout, params.layout);
        assert_eq!(restored.delta, params.delta);
        assert_eq!(rdriver, driver);
        assert_eq!(t_done, 42);
    }

    #[test]
    fn corrupt_checkpoint_payloads_are_rejected() {
        let model = LgssmParams::random_stable(2, 2, 3);
        let params = VariationalParams::from_lgssm(&model, 2).unwrap();
        let driver = Driver::new(StepSchedule::constant(0.1), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lambda.ckpt");
        save_checkpoint(&path, &params, &driver, 0).unwrap();

        let mut ckpt: Checkpoint =
            serde_json::from_reader(File::open(&path).unwrap()).unwrap();
        ckpt.lambda_len += 1;
        serde_json::to_writer(File::create(&path).unwrap(), &ckpt).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn summary_rows_format_missing_fields_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        write_summary_csv(
            &path,
            &[SummaryRow {
                replicate: 0,
                mode: "online".into(),
                scheme: "lgssm_closed_form".into(),
                t_len: 10,
                n: 4,
                m: 2,
                delta: 2,
                steps: 10,
                final_elbo: -3.5,
                grad_norm: 0.25,
                ess_min: None,
                acc_rate: Some(0.75),
                rmse_smooth: None,
                rmse_filt: None,
                kappa1: None,
                eval_rmse: None,
                note: String::new(),
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SUMMARY_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "0,online,lgssm_closed_form,10,4,2,2,10,-3.5,0.25,,0.75,,,,,"
        );
    }
}
