use std::path::Path;

use crate::error::{Error, Result};

/// Scalar training curves, written as `step,name,value` CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    rows: Vec<(usize, String, f64)>,
}

impl Curves {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: usize, name: &str, value: f64) {
        self.rows.push((step, name.to_string(), value));
    }

    pub fn rows(&self) -> &[(usize, String, f64)] {
        &self.rows
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, n, _) in &self.rows {
            if !out.contains(n) {
                out.push(n.clone());
            }
        }
        out
    }

    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == name).map(|r| (r.0, r.2)).collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.1 == name).map(|r| r.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,name,value\n");
        for (step, name, v) in &self.rows {
            s.push_str(&format!("{step},{name},{v:.6}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Curves::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            let parsed = match parts.as_slice() {
                [s, n, v] => s.parse().ok().zip(v.parse().ok()).map(|(s, v)| (s, n.to_string(), v)),
                _ => None,
            };
            let (s, n, v) = parsed.ok_or_else(|| Error::file(path, format!("line {}: malformed row", i + 1)))?;
            c.rows.push((s, n, v));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let mut c = Curves::new();
        c.push(0, "loss", 1.25);
        c.push(10, "loss", 0.5);
        c.push(10, "adv", -0.125);
        c.write_csv(&p).unwrap();
        let back = Curves::read_csv(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.series("loss"), vec![(0, 1.25), (10, 0.5)]);
        assert_eq!(back.names(), vec!["loss", "adv"]);
    }
}
