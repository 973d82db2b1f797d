//! Trace CSV layout and atomic file writes.
//!
//! Trace columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `iteration` | iteration index, 0 is the initial approximation |
//! | `elbo`, `elbo_se` | Monte-Carlo ELBO estimate and its standard error |
//! | `stepsize` | base step size used at this iteration |
//! | `param_norm_mu`, `param_norm_c` | Euclidean norms of the mean and of vech C (summed over components for mixtures) |
//! | `weight_c`, `norm_mu_c`, `norm_c_c` | per component `c = 1..K`, mixtures only |
//! | `wall_time_ms` | elapsed time, empty unless `output.timing` is set |
//!
//! Numbers use `.` as the decimal separator and the shortest representation
//! that round-trips; lines end in `\n`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use cholvi::optim::TraceRecord;

/// Column names for a single Gaussian (`components = None`) or a
/// `K`-component mixture.
pub fn trace_header(components: Option<usize>) -> Vec<String> {
    let mut cols: Vec<String> = [
        "iteration",
        "elbo",
        "elbo_se",
        "stepsize",
        "param_norm_mu",
        "param_norm_c",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for c in 1..=components.unwrap_or(0) {
        cols.push(format!("weight_{c}"));
        cols.push(format!("norm_mu_{c}"));
        cols.push(format!("norm_c_{c}"));
    }
    cols.push("wall_time_ms".into());
    cols
}

pub fn trace_csv(trace: &[TraceRecord], components: Option<usize>) -> String {
    let mut out = trace_header(components).join(",");
    out.push('\n');
    let k = components.unwrap_or(0);
    for r in trace {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.elbo, r.elbo_se, r.stepsize, r.param_norm_mu, r.param_norm_c
        );
        for c in 0..k {
            match r.components.get(c) {
                Some(ct) => {
                    let _ = write!(out, ",{},{},{}", ct.weight, ct.norm_mu, ct.norm_c);
                }
                None => out.push_str(",,,"),
            }
        }
        out.push(',');
        if let Some(ms) = r.wall_time_ms {
            let _ = write!(out, "{ms}");
        }
        out.push('\n');
    }
    out
}

/// Writes to a temporary file in the target directory, then renames it over
/// `path`, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cholvi::optim::ComponentTrace;

    #[test]
    fn gaussian_header_is_fixed() {
        assert_eq!(
            trace_header(None).join(","),
            "iteration,elbo,elbo_se,stepsize,param_norm_mu,param_norm_c,wall_time_ms"
        );
    }

    #[test]
    fn mixture_header_has_per_component_columns() {
        assert_eq!(
            trace_header(Some(2)).join(","),
            "iteration,elbo,elbo_se,stepsize,param_norm_mu,param_norm_c,\
             weight_1,norm_mu_1,norm_c_1,weight_2,norm_mu_2,norm_c_2,wall_time_ms"
        );
    }

    #[test]
    fn rows_match_header_width() {
        let mut r = TraceRecord::from_elbo(3, -1.5);
        r.components = vec![
            ComponentTrace {
                weight: 0.25,
                norm_mu: 1.0,
                norm_c: 0.5,
            };
            2
        ];
        let csv = trace_csv(&[r.clone()], Some(2));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "3,-1.5,0,0,0,0,0.25,1,0.5,0.25,1,0.5,");
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        r.wall_time_ms = Some(12.5);
        assert!(trace_csv(&[r], Some(2)).ends_with(",12.5\n"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
