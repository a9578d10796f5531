//! Binary portable pixmap (P6, maxval 255) encoding.

use crate::error::{Error, Result};
use crate::raster::Raster;

pub fn encode(r: &Raster) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", r.width(), r.height());
    let mut out = Vec::with_capacity(header.len() + r.bytes().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(r.bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("PPM", "truncated header"));
        }
        std::str::from_utf8(&self.buf[start..self.pos]).map_err(|_| Error::format("PPM", "non-ASCII header"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        t.parse()
            .map_err(|_| Error::format("PPM", format!("bad {what} {t:?}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.token()? != "P6" {
        return Err(Error::format("PPM", "missing P6 magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format("PPM", format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("PPM", "zero dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(Error::format("PPM", "truncated header")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format("PPM", "dimensions overflow"))?;
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        return Err(Error::format(
            "PPM",
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format("PPM", "trailing bytes after payload"));
    }
    Raster::from_bytes(width, height, payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rgb;
    use proptest::prelude::*;

    #[test]
    fn white_2x2_layout() {
        let r = Raster::filled(2, 2, Rgb::WHITE);
        let bytes = encode(&r);
        let mut expected = b"P6\n2 2\n255\n".to_vec();
        expected.extend_from_slice(&[0xFF; 12]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_malformed() {
        let r = Raster::filled(3, 2, Rgb::RED);
        let bytes = encode(&r);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"P5\n2 2\n255\n").is_err());
        assert!(decode(b"P6\n2 2\n65535\n").is_err());
        assert!(decode(b"P6\n2").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode(&bytes).unwrap().get(0, 0), Rgb(1, 2, 3));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (crate::rng::mix(seed ^ i as u64) & 0xFF) as u8).collect();
            let r = Raster::from_bytes(w, h, data).unwrap();
            let enc = encode(&r);
            let back = decode(&enc).unwrap();
            prop_assert_eq!(encode(&back), enc);
            prop_assert_eq!(back, r);
        }
    }
}
