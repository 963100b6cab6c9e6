use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ddcl::head_stats;
use crate::dynamics::RunTrace;
use crate::error::{Error, Result};

use super::ExperimentOutput;

/// Shortest round-trip form; non-finite values spelled out.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn events_csv(trace: &RunTrace) -> String {
    let mut out = String::from("step,kind,head_id,lambda,W_before,W_after,coverage\n");
    for e in &trace.events {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.step,
            e.kind.as_str(),
            e.head_id,
            format_real(e.lambda_at_event),
            format_real(e.free_energy_before),
            format_real(e.free_energy_after),
            format_real(e.coverage_after)
        );
    }
    out
}

fn temps_csv(trace: &RunTrace) -> String {
    let mut out = String::from("step,head_id,T,sigma\n");
    for r in &trace.steps {
        for h in &r.heads {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.step,
                h.head_id,
                format_real(h.temperature),
                format_real(h.sigma)
            );
        }
    }
    out
}

fn forces_csv(trace: &RunTrace) -> Result<String> {
    let mut heads: Vec<_> = trace.final_heads.iter().collect();
    heads.sort_by_key(|h| (h.birth_step, h.id));
    let forces = heads
        .iter()
        .map(|h| Ok(head_stats(h.view(), &h.bank)?.f_sep))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = forces.iter().sum();
    let mut out = String::from("head_id,birth_lambda,T_final,F_sep,frac_F\n");
    for (h, f) in heads.iter().zip(&forces) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            h.id,
            format_real(h.birth_lambda),
            format_real(h.bank.temperature),
            format_real(*f),
            format_real(f / total)
        );
    }
    Ok(out)
}

/// Writes the CSV series (when a run is attached) and `report.json`.
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    if let Some(trace) = &output.trace {
        written.push(write_file(dir, "events.csv", &events_csv(trace))?);
        written.push(write_file(dir, "temps.csv", &temps_csv(trace))?);
        written.push(write_file(dir, "forces.csv", &forces_csv(trace)?)?);
    }
    let mut json = serde_json::to_string_pretty(&output.report)
        .map_err(|e| Error::Numeric(format!("report serialisation failed: {e}")))?;
    json.push('\n');
    written.push(write_file(dir, "report.json", &json)?);
    Ok(written)
}
