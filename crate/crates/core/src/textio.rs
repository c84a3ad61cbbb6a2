//! Whitespace-separated row-major text used for QP dumps and learner
//! snapshots. Floats are written with Rust's shortest round-trip formatting.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn write_row<'a, W, I>(w: &mut W, values: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a f64>,
{
    let mut first = true;
    for v in values {
        if !first {
            w.write_all(b" ")?;
        }
        write!(w, "{v}")?;
        first = false;
    }
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for row in m.row_iter() {
        write_row(w, row.iter())?;
    }
    Ok(())
}

pub struct RowReader<R> {
    inner: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> RowReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            line: 0,
            buf: String::new(),
        }
    }

    pub fn error(&self, message: &str) -> Error {
        Error::Parse {
            line: self.line,
            message: message.to_string(),
        }
    }

    /// Next line split into numbers, or `None` at end of input.
    pub fn next_row_opt(&mut self) -> Result<Option<Vec<f64>>> {
        self.buf.clear();
        if self.inner.read_line(&mut self.buf)? == 0 {
            return Ok(None);
        }
        self.line += 1;
        self.buf
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| self.error(&format!("not a number: `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn next_row(&mut self) -> Result<Vec<f64>> {
        self.next_row_opt()?
            .ok_or_else(|| self.error("unexpected end of input"))
    }

    pub fn read_fixed(&mut self, n: usize) -> Result<Vec<f64>> {
        let row = self.next_row()?;
        if row.len() != n {
            return Err(self.error(&format!("expected {n} values, found {}", row.len())));
        }
        Ok(row)
    }

    pub fn read_matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.read_fixed(cols)?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
}
