//! Binary PGM (P5, maxval 255) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height);
        Self { width, height, pixels }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("bad PGM: {msg}"),
        };
        // Header: magic, width, height, maxval separated by whitespace, with
        // optional `#` comments, then exactly one whitespace byte.
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
                if bytes[i] == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                } else {
                    i += 1;
                }
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("magic is not P5"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        i += 1;
        let body = bytes.get(i..).ok_or_else(|| bad("missing pixel data"))?;
        if body.len() != width * height {
            return Err(bad(&format!("expected {} pixel bytes, found {}", width * height, body.len())));
        }
        Ok(Self::new(width, height, body.to_vec()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]);
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::decode(&bytes, Path::new("x.pgm")).unwrap(), img);
    }

    #[test]
    fn rejects_short_body() {
        let mut bytes = GrayImage::new(2, 2, vec![1, 2, 3, 4]).encode();
        bytes.pop();
        assert!(GrayImage::decode(&bytes, Path::new("x.pgm")).is_err());
    }

    #[test]
    fn accepts_comments() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x08";
        let img = GrayImage::decode(bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(img.pixels, vec![7, 8]);
    }
}
