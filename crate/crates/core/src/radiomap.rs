//! Near-field matched filtering of the received grid into a radio map.
//!
//! The kernel samples the spherical wavefront `(1/d_i) e^{-j 2 pi d_i / lambda}`
//! of a point source at depth `d` below the kernel center. Sliding its
//! conjugate over the received grid ("same" correlation, zero padded) focuses
//! every lattice point at that depth; sources, real or virtual, light up.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Result, SenseError};
use crate::grid::{csv_err, ComplexGrid};
use crate::pgm::GrayImage;
use crate::scene::{subpixel_to_world, LisArrayConfig, SPEED_OF_LIGHT};

/// Sampled spherical-wave pattern. `grid` holds the pattern itself; the
/// filter conjugates it when applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub grid: ComplexGrid,
    pub design_frequency: f64,
    pub design_depth: f64,
    pub spacing: f64,
}

impl FilterKernel {
    /// Side length in elements.
    pub fn size(&self) -> usize {
        self.grid.width()
    }

    /// Index of the focal sample along each axis.
    pub fn center(&self) -> usize {
        self.size() / 2
    }

    pub fn norm(&self) -> f64 {
        self.grid.energy().sqrt()
    }
}

/// Samples `(1/d_i) e^{-j 2 pi d_i / lambda}` on an `n x n` lattice, where
/// `d_i = sqrt(d^2 + (p ds)^2 + (q ds)^2)` and `(p, q)` is the offset from
/// sample `(n/2, n/2)`.
pub fn design_filter(frequency: f64, depth: f64, n: usize, spacing: f64) -> Result<FilterKernel> {
    if !(frequency > 0.0 && depth > 0.0 && spacing > 0.0) || n < 1 {
        return Err(SenseError::domain("filter needs f, d, spacing > 0 and n >= 1"));
    }
    let wavelength = SPEED_OF_LIGHT / frequency;
    let c = (n / 2) as f64;
    let grid = ComplexGrid::from_fn(n, n, |col, row| {
        let p = (col as f64 - c) * spacing;
        let q = (row as f64 - c) * spacing;
        let d_i = (depth * depth + (p * p + q * q)).sqrt();
        Complex64::from_polar(1.0 / d_i, -2.0 * PI * d_i / wavelength)
    });
    Ok(FilterKernel {
        grid,
        design_frequency: frequency,
        design_depth: depth,
        spacing,
    })
}

/// Default kernel side: 100 elements for a 259-wide array, scaled with the
/// smaller array dimension and rounded to an odd count.
pub fn default_kernel_size(lis: &LisArrayConfig) -> usize {
    let m = lis.elements_x.min(lis.elements_y) as f64;
    let half = (m * 100.0 / 259.0 / 2.0).round() as usize;
    (2 * half + 1).min(lis.elements_x.min(lis.elements_y).max(1))
}

/// Kernel matched to `lis` at `depth`, using [`default_kernel_size`] unless
/// `size` is given.
pub fn kernel_for(lis: &LisArrayConfig, depth: f64, size: Option<usize>) -> Result<FilterKernel> {
    design_filter(
        lis.carrier_frequency,
        depth,
        size.unwrap_or_else(|| default_kernel_size(lis)),
        lis.spacing,
    )
}

/// Magnitude radio map over the array lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioMap {
    width: usize,
    height: usize,
    magnitudes: Vec<f64>,
    complex_map: Option<ComplexGrid>,
    lis: LisArrayConfig,
}

impl RadioMap {
    pub fn from_complex(complex_map: ComplexGrid, lis: LisArrayConfig) -> Self {
        let magnitudes = complex_map.as_slice().iter().map(|c| c.norm()).collect();
        Self {
            width: complex_map.width(),
            height: complex_map.height(),
            magnitudes,
            complex_map: Some(complex_map),
            lis,
        }
    }

    /// Magnitude-only map, e.g. one read back from disk.
    pub fn from_magnitudes(width: usize, height: usize, magnitudes: Vec<f64>, lis: LisArrayConfig) -> Result<Self> {
        if magnitudes.len() != width * height {
            return Err(SenseError::domain("magnitude buffer does not match map size"));
        }
        if magnitudes.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(SenseError::domain("magnitudes must be finite and non-negative"));
        }
        Ok(Self {
            width,
            height,
            magnitudes,
            complex_map: None,
            lis,
        })
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

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    #[inline]
    pub fn magnitude(&self, col: usize, row: usize) -> f64 {
        self.magnitudes[row * self.width + col]
    }

    pub fn complex_map(&self) -> Option<&ComplexGrid> {
        self.complex_map.as_ref()
    }

    pub fn lis(&self) -> &LisArrayConfig {
        &self.lis
    }

    /// Replaces the lattice metadata (origin, spacing) of the map.
    pub fn with_lis(mut self, lis: LisArrayConfig) -> Self {
        self.lis = lis;
        self
    }

    /// First pixel in row-major order holding the largest magnitude.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &m) in self.magnitudes.iter().enumerate() {
            if m > self.magnitudes[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Scaled copy; used to check ratio-only consumers.
    pub fn scaled(&self, factor: f64) -> RadioMap {
        let mut out = self.clone();
        for m in &mut out.magnitudes {
            *m *= factor;
        }
        if let Some(c) = &mut out.complex_map {
            c.scale(Complex64::new(factor, 0.0));
        }
        out
    }

    /// Writes `pixel_x,pixel_y,x_m,y_m,magnitude` rows in row-major order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["pixel_x", "pixel_y", "x_m", "y_m", "magnitude"])
            .map_err(csv_err)?;
        for row in 0..self.height {
            for col in 0..self.width {
                let (x, y) = subpixel_to_world((col as f64, row as f64), &self.lis);
                w.write_record(&[
                    col.to_string(),
                    row.to_string(),
                    format!("{x:e}"),
                    format!("{y:e}"),
                    format!("{:e}", self.magnitude(col, row)),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`RadioMap::write_csv`]. The lattice
    /// origin and pitch are recovered from the world columns; the carrier is
    /// assumed to put the pitch at half a wavelength.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<RadioMap> {
        let mut r = csv::Reader::from_reader(input);
        let mut cells: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let get = |i: usize| rec.get(i).ok_or_else(|| SenseError::Parse("short map record".into()));
            let pf = |s: &str| s.parse::<f64>().map_err(|e| SenseError::Parse(format!("{e}")));
            let pu = |s: &str| s.parse::<usize>().map_err(|e| SenseError::Parse(format!("{e}")));
            cells.push((pu(get(0)?)?, pu(get(1)?)?, pf(get(2)?)?, pf(get(3)?)?, pf(get(4)?)?));
        }
        let width = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let height = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if width == 0 || cells.len() != width * height {
            return Err(SenseError::Parse("map CSV does not describe a full grid".into()));
        }
        let mut mags = vec![0.0; width * height];
        let mut origin = [0.0, 0.0];
        let mut spacing = None;
        for &(c, r, x, y, m) in &cells {
            mags[r * width + c] = m;
            if c == 0 && r == 0 {
                origin = [x, y];
            }
        }
        for &(c, r, x, y, _) in &cells {
            if c == 1 && r == 0 {
                spacing = Some(x);
            } else if c == 0 && r == 1 && spacing.is_none() {
                spacing = Some(y);
            }
        }
        let spacing = match spacing {
            Some(v) if width > 1 => v - origin[0],
            Some(v) => v - origin[1],
            None => 1.0,
        };
        if !(spacing > 0.0) {
            return Err(SenseError::Parse("map CSV lattice pitch must be positive".into()));
        }
        let lis = LisArrayConfig {
            elements_x: width,
            elements_y: height,
            spacing,
            carrier_frequency: SPEED_OF_LIGHT / (2.0 * spacing),
            origin,
        };
        RadioMap::from_magnitudes(width, height, mags, lis)
    }
}

fn lattice_for(grid: &ComplexGrid, kernel: &FilterKernel) -> LisArrayConfig {
    LisArrayConfig {
        elements_x: grid.width(),
        elements_y: grid.height(),
        spacing: kernel.spacing,
        carrier_frequency: kernel.design_frequency,
        origin: [0.0, 0.0],
    }
}

fn check_fits(received: &ComplexGrid, kernel: &FilterKernel) -> Result<()> {
    let n = kernel.size();
    if n > received.width() || n > received.height() {
        return Err(SenseError::domain(format!(
            "{n}x{n} kernel does not fit a {}x{} grid",
            received.width(),
            received.height()
        )));
    }
    Ok(())
}

/// Matched filter via frequency-domain correlation. The returned map's
/// lattice has origin (0, 0); use [`RadioMap::with_lis`] to attach the real one.
pub fn apply_filter(received: &ComplexGrid, kernel: &FilterKernel) -> Result<RadioMap> {
    MatchedFilter::new(kernel, received.width(), received.height())?.apply(received)
}

/// Spatial-domain reference: `y_f[r][c] = sum conj(h[q][p]) y[r + q - n/2][c + p - n/2]`
/// with zeros outside the grid.
pub fn apply_filter_direct(received: &ComplexGrid, kernel: &FilterKernel) -> Result<RadioMap> {
    check_fits(received, kernel)?;
    let (w, h) = received.dims();
    let n = kernel.size();
    let c = kernel.center() as isize;
    let conj: Vec<Complex64> = kernel.grid.as_slice().iter().map(|v| v.conj()).collect();
    let out = ComplexGrid::from_fn(w, h, |col, row| {
        let mut acc = Complex64::new(0.0, 0.0);
        for q in 0..n {
            let r = row as isize + q as isize - c;
            if r < 0 || r >= h as isize {
                continue;
            }
            for p in 0..n {
                let x = col as isize + p as isize - c;
                if x < 0 || x >= w as isize {
                    continue;
                }
                acc += conj[q * n + p] * received.get(x as usize, r as usize);
            }
        }
        acc
    });
    Ok(RadioMap::from_complex(out, lattice_for(received, kernel)))
}

/// Smallest integer >= `n` with no prime factor above 7.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

struct Fft2d {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2d {
    fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            col_fwd: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn run(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        row.process(buf);
        let mut t = transpose(buf, self.width, self.height);
        col.process(&mut t);
        let back = transpose(&t, self.height, self.width);
        buf.copy_from_slice(&back);
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }
}

fn transpose(src: &[Complex64], width: usize, height: usize) -> Vec<Complex64> {
    let mut dst = vec![Complex64::new(0.0, 0.0); src.len()];
    for r in 0..height {
        for c in 0..width {
            dst[c * height + r] = src[r * width + c];
        }
    }
    dst
}

/// Matched filter with the kernel spectrum precomputed for one grid size.
pub struct MatchedFilter {
    kernel: FilterKernel,
    grid_dims: (usize, usize),
    padded: (usize, usize),
    fft: Fft2d,
    kernel_spectrum_conj: Vec<Complex64>,
}

impl MatchedFilter {
    pub fn new(kernel: &FilterKernel, width: usize, height: usize) -> Result<Self> {
        check_fits(&ComplexGrid::zeros(width, height), kernel)?;
        let n = kernel.size();
        let pw = fast_len(width + n - 1);
        let ph = fast_len(height + n - 1);
        let fft = Fft2d::new(pw, ph);
        // kernel offset (p - c, q - c) lands at that index modulo the padded size
        let c = kernel.center();
        let mut spec = vec![Complex64::new(0.0, 0.0); pw * ph];
        for q in 0..n {
            let r = (q + ph - c) % ph;
            for p in 0..n {
                let x = (p + pw - c) % pw;
                spec[r * pw + x] = kernel.grid.get(p, q);
            }
        }
        fft.forward(&mut spec);
        for v in &mut spec {
            *v = v.conj();
        }
        Ok(Self {
            kernel: kernel.clone(),
            grid_dims: (width, height),
            padded: (pw, ph),
            fft,
            kernel_spectrum_conj: spec,
        })
    }

    pub fn kernel(&self) -> &FilterKernel {
        &self.kernel
    }

    pub fn apply(&self, received: &ComplexGrid) -> Result<RadioMap> {
        if received.dims() != self.grid_dims {
            return Err(SenseError::DimensionMismatch {
                expected: self.grid_dims,
                actual: received.dims(),
            });
        }
        let (w, h) = self.grid_dims;
        let (pw, ph) = self.padded;
        let mut buf = vec![Complex64::new(0.0, 0.0); pw * ph];
        for r in 0..h {
            for c in 0..w {
                buf[r * pw + c] = received.get(c, r);
            }
        }
        self.fft.forward(&mut buf);
        for (v, k) in buf.iter_mut().zip(&self.kernel_spectrum_conj) {
            *v *= k;
        }
        self.fft.inverse(&mut buf);
        let norm = 1.0 / (pw * ph) as f64;
        let out = ComplexGrid::from_fn(w, h, |c, r| buf[r * pw + c] * norm);
        Ok(RadioMap::from_complex(out, lattice_for(received, &self.kernel)))
    }
}

/// Min-max normalization to 0..=255; a constant map renders black.
pub fn map_to_image(map: &RadioMap) -> GrayImage {
    let mags = map.magnitudes();
    let min = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels = mags
        .iter()
        .map(|&m| {
            if range > 0.0 {
                (255.0 * (m - min) / range).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    GrayImage {
        width: map.width(),
        height: map.height(),
        pixels,
    }
}
