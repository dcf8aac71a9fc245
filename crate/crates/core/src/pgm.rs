//! Binary portable graymap (P5) images.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Result, SenseError};

/// 8-bit grayscale raster, row-major, row 0 first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(SenseError::domain("pixel buffer does not match image size"));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut tokens = Vec::with_capacity(4);
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(SenseError::Parse("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" {
            return Err(SenseError::Parse(format!("unsupported magic {:?}", tokens[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| SenseError::Parse(format!("PGM header: {e}")));
        let width = parse(&tokens[1])?;
        let height = parse(&tokens[2])?;
        if parse(&tokens[3])? != 255 {
            return Err(SenseError::Parse("only maxval 255 is supported".into()));
        }
        let mut pixels = vec![0u8; width * height];
        reader
            .read_exact(&mut pixels)
            .map_err(|_| SenseError::Parse("truncated PGM raster".into()))?;
        Self::new(width, height, pixels)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_pgm(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_pgm(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::read_pgm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        buf.extend([7, 9]);
        let img = GrayImage::read_pgm(buf.as_slice()).unwrap();
        assert_eq!(img.pixels, vec![7, 9]);
    }

    #[test]
    fn rejects_ascii_variant() {
        assert!(GrayImage::read_pgm(&b"P2\n1 1\n255\n0\n"[..]).is_err());
    }
}
