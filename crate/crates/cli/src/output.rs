//! Files written by the commands: CSV tables, gnuplot scripts, JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Twelve significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.11e}")
}

/// Collects the names of written files for the manifest.
pub struct OutDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e))?;
        w.write_record(header).map_err(|e| CliError::io(&path, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| CliError::io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Numerical(format!("{name}: {e}")))?;
        self.text(name, &(body + "\n"))
    }
}

/// Gnuplot script preamble for comma-separated files with a header row.
pub fn gnuplot_header(title: &str, png: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set terminal pngcairo size 900,600\n\
         set output '{png}'\n\
         set title '{title}'\n\
         set grid\n"
    )
}

/// Prints to stdout; a closed pipe is not an error.
pub fn say(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

#[cfg(test)]
mod tests {
    use super::num;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(num(1.875104068711961), "1.87510406871e0");
        assert_eq!(num(-0.000123), "-1.23000000000e-4");
        let back: f64 = num(std::f64::consts::PI).parse().unwrap();
        assert!((back - std::f64::consts::PI).abs() < 5e-12 * std::f64::consts::PI);
    }
}
