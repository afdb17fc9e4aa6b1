//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::{Read, Write};

pub(crate) fn write_ppm<W: Write>(w: &mut W, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)
}

pub(crate) fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, gray: &[u8]) -> std::io::Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)
}

/// Parsed image: width, height, channels and raw bytes.
#[derive(Debug)]
pub(crate) struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub(crate) fn read_netpbm<R: Read>(r: &mut R) -> Result<Netpbm, String> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let mut num = |name: &str| -> Result<usize, String> {
        let t = next_token(&bytes, &mut pos)?;
        t.parse::<usize>().map_err(|_| format!("bad {name} {t:?}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    // single whitespace byte separates header and raster
    pos += 1;
    let need = width * height * channels;
    let have = bytes.len().saturating_sub(pos);
    if have < need {
        return Err(format!("truncated raster: expected {need} bytes, found {have}"));
    }
    if have > need {
        return Err(format!("trailing data: expected {need} bytes, found {have}"));
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        data: bytes[pos..].to_vec(),
    })
}
