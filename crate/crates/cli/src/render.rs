//! Plain-text tables and CSV for command reports.

use std::fmt::Write as _;

/// One report line: quantity, notation/units, value.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub quantity: String,
    pub units: String,
    pub value: String,
}

impl Row {
    pub fn new(
        quantity: impl Into<String>,
        units: impl Into<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            quantity: quantity.into(),
            units: units.into(),
            value: value.into(),
        }
    }
}

/// Three significant figures, scientific outside [1e-2, 1e4).
pub fn sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-2..1e4).contains(&a) {
        let decimals = (2 - a.log10().floor() as i32).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.2e}")
    }
}

pub fn table(title: &str, rows: &[Row]) -> String {
    let w0 = rows
        .iter()
        .map(|r| r.quantity.chars().count())
        .max()
        .unwrap_or(0)
        .max(8);
    let w1 = rows
        .iter()
        .map(|r| r.units.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<w0$}  {:<w1$}  Value", "Quantity", "Units");
    let _ = writeln!(s, "{}", "-".repeat(w0 + w1 + 16));
    for r in rows {
        let _ = writeln!(s, "{:<w0$}  {:<w1$}  {}", r.quantity, r.units, r.value);
    }
    s
}

fn csv_field(f: &str) -> String {
    if f.contains([',', '"', '\n']) {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_owned()
    }
}

pub fn csv(rows: &[Row]) -> String {
    let mut s = String::from("quantity,units,value\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{}",
            csv_field(&r.quantity),
            csv_field(&r.units),
            csv_field(&r.value)
        );
    }
    s
}
