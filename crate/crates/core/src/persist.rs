//! Line-oriented plain-text persistence shared by the model formats.
//!
//! Every format is a sequence of lines `key value value ...`. Floats are
//! written in shortest round-trip scientific notation, so save/load is exact.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

pub(crate) fn push_line<I, T>(out: &mut String, key: &str, values: I)
where
    I: IntoIterator<Item = T>,
    T: std::fmt::Display,
{
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

pub(crate) fn push_floats(out: &mut String, key: &str, values: &[f64]) {
    push_line(out, key, values.iter().map(|&x| fmt_f64(x)));
}

pub(crate) struct LineReader<'a> {
    source: String,
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line: u64,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str, source: impl Into<String>) -> Self {
        LineReader {
            source: source.into(),
            lines: text.lines().enumerate().peekable(),
            line: 0,
        }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(Path::new(&self.source), self.line, message)
    }

    fn next_nonempty(&mut self) -> Result<&'a str> {
        for (i, line) in self.lines.by_ref() {
            self.line = i as u64 + 1;
            if !line.trim().is_empty() {
                return Ok(line.trim());
            }
        }
        Err(self.error("unexpected end of input"))
    }

    /// Reads the next line, checks that it starts with `key` and returns the
    /// remaining whitespace-separated tokens.
    pub(crate) fn expect(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_nonempty()?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some(k) if k == key => Ok(tokens.collect()),
            Some(k) => Err(self.error(format!("expected `{key}`, found `{k}`"))),
            None => Err(self.error(format!("expected `{key}`"))),
        }
    }

    /// Reads the next line as a key and its tokens.
    pub(crate) fn next_record(&mut self) -> Result<(&'a str, Vec<&'a str>)> {
        let line = self.next_nonempty()?;
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap_or_default();
        Ok((key, tokens.collect()))
    }

    pub(crate) fn parse<T: FromStr>(&self, token: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        token
            .parse::<T>()
            .map_err(|e| self.error(format!("`{token}`: {e}")))
    }

    pub(crate) fn expect_one<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let tokens = self.expect(key)?;
        if tokens.len() != 1 {
            return Err(self.error(format!("`{key}` takes exactly one value")));
        }
        self.parse(tokens[0])
    }

    pub(crate) fn expect_floats(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let tokens = self.expect(key)?;
        if tokens.len() != len {
            return Err(self.error(format!(
                "`{key}` needs {len} values, found {}",
                tokens.len()
            )));
        }
        let values = tokens
            .iter()
            .map(|t| self.parse::<f64>(t))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.error(format!("`{key}` contains a non-finite value")));
        }
        Ok(values)
    }

    pub(crate) fn finish(&mut self) -> Result<()> {
        match self.next_nonempty() {
            Ok(extra) => Err(self.error(format!("trailing content `{extra}`"))),
            Err(_) => Ok(()),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
