use num_complex::Complex64;
use std::io::Write;

use crate::error::{Result, SenseError};

/// Row-major `width x height` grid of complex samples. Column index runs
/// along x, row index along y.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    width: usize,
    height: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Complex64::new(0.0, 0.0); width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(SenseError::domain(format!(
                "{} samples cannot fill a {width}x{height} grid",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(SenseError::domain("grid samples must be finite"));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scale(&mut self, factor: Complex64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Elementwise sum; both grids must share dimensions.
    pub fn add(&self, other: &ComplexGrid) -> Result<ComplexGrid> {
        if self.dims() != other.dims() {
            return Err(SenseError::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(ComplexGrid {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Writes `col,row,re,im` rows in row-major order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["col", "row", "re", "im"]).map_err(csv_err)?;
        for row in 0..self.height {
            for col in 0..self.width {
                let v = self.get(col, row);
                w.write_record(&[
                    col.to_string(),
                    row.to_string(),
                    format!("{:e}", v.re),
                    format!("{:e}", v.im),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`ComplexGrid::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<ComplexGrid> {
        let mut r = csv::Reader::from_reader(input);
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).ok_or_else(|| SenseError::Parse("short CSV record".into()));
            let col: usize = field(0)?.parse().map_err(|e| SenseError::Parse(format!("{e}")))?;
            let row: usize = field(1)?.parse().map_err(|e| SenseError::Parse(format!("{e}")))?;
            let re: f64 = field(2)?.parse().map_err(|e| SenseError::Parse(format!("{e}")))?;
            let im: f64 = field(3)?.parse().map_err(|e| SenseError::Parse(format!("{e}")))?;
            cells.push((col, row, Complex64::new(re, im)));
        }
        let width = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let height = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != width * height {
            return Err(SenseError::Parse("CSV does not describe a full grid".into()));
        }
        let mut grid = ComplexGrid::zeros(width, height);
        for (col, row, v) in cells {
            grid.set(col, row, v);
        }
        Ok(grid)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> SenseError {
    SenseError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(ComplexGrid::from_vec(2, 2, vec![Complex64::new(0.0, 0.0); 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut v = vec![Complex64::new(0.0, 0.0); 4];
        v[2].im = f64::INFINITY;
        assert!(ComplexGrid::from_vec(2, 2, v).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = ComplexGrid::from_fn(3, 2, |c, r| Complex64::new(c as f64 / 3.0, -(r as f64) * 1e-17 + 0.1));
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = ComplexGrid::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, g);
    }
}
