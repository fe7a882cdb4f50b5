//! Aggregation helpers and the JSON run report.

use serde::Serialize;

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Serialize)]
struct RunReport<'a, T: Serialize> {
    run_id: &'a str,
    config_hash: String,
    rows: &'a T,
}

/// A single JSON document: `{ "run_id", "config_hash", "rows" }`.
pub fn json_report<T: Serialize>(run_id: &str, config_hash: u64, rows: &T) -> String {
    let doc = RunReport {
        run_id,
        config_hash: format!("{config_hash:016x}"),
        rows,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_schema() {
        let doc = json_report("eval-1", 255, &vec![1, 2]);
        let v: serde_json::Value = serde_json::from_str(&doc).unwrap();
        assert_eq!(v["run_id"], "eval-1");
        assert_eq!(v["config_hash"], "00000000000000ff");
        assert_eq!(v["rows"][1], 2);
    }
}
