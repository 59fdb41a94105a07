use std::fmt::Write as _;

use afree_core::approximation::fmt10;
use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// `key = value` lines
    Text,
    /// `key,value` rows
    Csv,
}

/// Ordered key/value report; numbers are rounded to 10 significant digits.
#[derive(Debug, Default)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.entries.push((key.to_string(), value.into()));
        self
    }

    pub fn num(&mut self, key: &str, value: f64) -> &mut Self {
        self.text(key, fmt10(value))
    }

    pub fn int(&mut self, key: &str, value: usize) -> &mut Self {
        self.text(key, value.to_string())
    }

    pub fn flag(&mut self, key: &str, value: bool) -> &mut Self {
        self.text(key, value.to_string())
    }

    pub fn vector(&mut self, key: &str, values: &[f64]) -> &mut Self {
        let inner: Vec<String> = values.iter().map(|v| fmt10(*v)).collect();
        self.text(key, format!("[{}]", inner.join(", ")))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self, format: Format) -> String {
        let mut out = String::new();
        match format {
            Format::Text => {
                for (k, v) in &self.entries {
                    let _ = writeln!(out, "{k} = {v}");
                }
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let _ = w.write_record(["key", "value"]);
                for (k, v) in &self.entries {
                    let _ = w.write_record([k, v]);
                }
                out = String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_both_formats() {
        let mut r = Report::new();
        r.num("value", 1.0 / 3.0)
            .vector("v", &[1.0, -0.5])
            .flag("ok", true);
        assert_eq!(
            r.render(Format::Text),
            "value = 0.3333333333\nv = [1, -0.5]\nok = true\n"
        );
        assert_eq!(
            r.render(Format::Csv),
            "key,value\nvalue,0.3333333333\nv,\"[1, -0.5]\"\nok,true\n"
        );
        assert_eq!(r.get("ok"), Some("true"));
    }
}
