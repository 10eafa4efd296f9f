//! Text output helpers. Every float is written with 17 significant digits so
//! that files round-trip exactly and compare byte for byte across runs.

use std::fmt::Write;

/// Formats `v` in scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        }
    } else {
        format!("{v:.16e}")
    }
}

/// CSV with the given header; each row is a list of already formatted cells.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `t,<columns...>` table of floats.
pub fn float_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }
}
