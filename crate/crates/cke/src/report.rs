//! Serializable run artifacts: the manifest, trace CSV, and JSON reports.

use crate::continuation::ContinuationTrace;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Echo of the configuration plus environment notes, written next to every
/// run output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub decomposition: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub grid_m: usize,
    pub stretch: f64,
    pub tol_newton: f64,
    pub tol_quadrature: f64,
    pub kernel_gap: f64,
    pub seed: u64,
    pub crate_version: String,
    /// deformation norms use the explicit Σθ_i metric in place of ω₀;
    /// this rescales the t parametrization only
    pub norm_convention: String,
}

impl Manifest {
    pub fn new(model: &str, decomposition: Vec<Vec<f64>>, labels: Vec<String>, grid_m: usize, stretch: f64) -> Self {
        Manifest {
            model: model.into(),
            decomposition,
            labels,
            grid_m,
            stretch,
            tol_newton: 1e-9,
            tol_quadrature: 1e-10,
            kernel_gap: 1e3,
            seed: 0,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            norm_convention: "deformation norm uses the explicit sum-metric Σθ_i; dV0 is the normalized anticanonical density of the start tuple".into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Writes the per-t table of a continuation trace.
pub fn write_trace_csv(trace: &ContinuationTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let n = trace
        .points
        .iter()
        .find(|p| !p.phi_sobolev.is_empty())
        .map(|p| p.phi_sobolev.len())
        .unwrap_or(0);
    let mut header = vec![
        "t".to_string(),
        "converged".into(),
        "iterations".into(),
        "residual".into(),
        "curly_f".into(),
        "c_norm".into(),
        "closure".into(),
        "h_comparison".into(),
        "cke_residual".into(),
        "residual_c2".into(),
    ];
    for i in 0..n {
        header.push(format!("phi_sobolev_{}", i + 1));
    }
    for i in 0..n {
        header.push(format!("residual_sup_{}", i + 1));
    }
    header.push("failure".into());
    w.write_record(&header).map_err(csv_err)?;
    for p in &trace.points {
        let mut rec = vec![
            format!("{:.17e}", p.t),
            format!("{}", p.converged),
            format!("{}", p.iterations),
            format!("{:.17e}", p.residual),
            format!("{:.17e}", p.curly_f),
            format!("{:.17e}", p.c_norm),
            format!("{:.17e}", p.closure),
            format!("{:.17e}", p.h_comparison),
            format!("{:.17e}", p.cke_residual),
            format!("{:.17e}", p.residual_c2),
        ];
        for i in 0..n {
            rec.push(
                p.phi_sobolev
                    .get(i)
                    .map(|v| format!("{v:.17e}"))
                    .unwrap_or_default(),
            );
        }
        for i in 0..n {
            rec.push(
                p.residual_sup
                    .get(i)
                    .map(|v| format!("{v:.17e}"))
                    .unwrap_or_default(),
            );
        }
        rec.push(p.failure.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back the (t, curly_f, residual_c2) columns of a trace CSV, e.g.
/// for the expand command.
pub fn read_trace_csv(path: &Path) -> Result<ContinuationTrace> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ct, cf, cc, cn) = (
        col("t"),
        col("curly_f"),
        col("converged"),
        col("residual_c2"),
    );
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let get = |ix: Option<usize>| ix.and_then(|i| rec.get(i)).unwrap_or("");
        let conv = get(cc) != "false";
        if !conv {
            continue;
        }
        let t: f64 = get(ct).parse().unwrap_or(f64::NAN);
        let f: f64 = get(cf).parse().unwrap_or(f64::NAN);
        let nrm: f64 = get(cn).parse().unwrap_or(0.0);
        if t.is_finite() && f.is_finite() {
            samples.push((t, f, nrm));
        }
    }
    Ok(crate::analysis::synthetic_trace(&samples))
}

fn csv_err(e: csv::Error) -> crate::error::CkeError {
    crate::error::CkeError::Invalid(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::synthetic_trace;

    #[test]
    fn trace_csv_round_trip() {
        let dir = std::env::temp_dir().join("cke-report-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        let trace = synthetic_trace(&[(0.01, 3e-4, 1e-2), (0.02, 1.2e-3, 2e-2)]);
        write_trace_csv(&trace, &path).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back.points.len(), 2);
        assert!((back.points[1].curly_f - 1.2e-3).abs() < 1e-18);
        assert!((back.points[1].residual_c2 - 2e-2).abs() < 1e-18);
    }
}
