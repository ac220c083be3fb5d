//! Binary PGM (`P5`, maxval ≤ 255) masks; any nonzero sample is foreground.

use std::io::{Read, Write};

use crate::error::{CenError, Result};
use crate::geometry::BinaryMask;

pub fn write_pgm<W: Write>(mut w: W, mask: &BinaryMask) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm<R: Read>(mut r: R) -> Result<BinaryMask> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(CenError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(CenError::Format(format!("expected P5 magic, got {:?}", fields[0])));
    }
    let num =
        |s: &str| -> Result<usize> { s.parse().map_err(|_| CenError::Format(format!("bad PGM header value {s:?}"))) };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(CenError::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let raster =
        bytes.get(pos..pos + n).ok_or_else(|| CenError::Format(format!("PGM raster truncated: need {n} bytes")))?;
    BinaryMask::new(width, height, raster.iter().map(|&b| b != 0).collect())
}
