//! Binary data formats: Middlebury `.flo` for flow, PFM for float maps and
//! binary PGM for masks and images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{DynamicMask, FlowField};
use crate::grid::{Grid, Image};

/// `.flo` magic number, the bytes "PIEH".
pub const FLO_MAGIC: f32 = 202021.25;
/// Flow components above this magnitude mark a pixel as unknown.
pub const FLO_UNKNOWN_THRESH: f32 = 1e9;
const FLO_UNKNOWN: f32 = 1e10;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.shape();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for v in 0..h {
        for u in 0..w {
            let (a, b) = if flow.is_valid(u, v) {
                let f = flow.at(u, v);
                (f.x as f32, f.y as f32)
            } else {
                (FLO_UNKNOWN, FLO_UNKNOWN)
            };
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn le_i32(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// `path` only labels errors.
pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 || le_f32(bytes, 0) != FLO_MAGIC {
        return Err(Error::parse(path, 0, "missing .flo magic"));
    }
    let (w, h) = (le_i32(bytes, 4), le_i32(bytes, 8));
    if w <= 0 || h <= 0 {
        return Err(Error::parse(path, 0, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::parse(path, 0, format!("expected {} bytes, found {}", 12 + 8 * w * h, bytes.len())));
    }
    Ok(FlowField::from_fn(w, h, |u, v| {
        let at = 12 + 8 * (v * w + u);
        let (a, b) = (le_f32(bytes, at), le_f32(bytes, at + 4));
        (a.abs() < FLO_UNKNOWN_THRESH && b.abs() < FLO_UNKNOWN_THRESH && a.is_finite() && b.is_finite())
            .then_some((f64::from(a), f64::from(b)))
    }))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write(path.as_ref(), &encode_flo(flow))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flo(&read(path)?, path)
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn encode_pfm(map: &Grid<f64>) -> Vec<u8> {
    let (w, h) = map.shape();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend_from_slice(&(map[(u, v)] as f32).to_le_bytes());
        }
    }
    out
}

/// Splits `n` whitespace-separated header tokens off the front of `bytes`,
/// skipping `#` comments. Returns the tokens and the offset of the payload,
/// which starts after exactly one whitespace byte.
fn header_tokens<'a>(bytes: &'a [u8], n: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, 0, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::parse(path, 0, "non-ASCII header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::parse(path, 0, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn dims(w: &str, h: &str, path: &Path) -> Result<(usize, usize)> {
    let p = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&x| x > 0)
            .ok_or_else(|| Error::parse(path, 0, format!("invalid dimension {s:?}")))
    };
    Ok((p(w)?, p(h)?))
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Grid<f64>> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "Pf" {
        return Err(Error::parse(path, 0, format!("expected single-channel PFM, found {:?}", tok[0])));
    }
    let (w, h) = dims(tok[1], tok[2], path)?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::parse(path, 0, format!("invalid scale {:?}", tok[3])))?;
    if scale == 0.0 {
        return Err(Error::parse(path, 0, "scale must be non-zero"));
    }
    let payload = &bytes[off..];
    if payload.len() != 4 * w * h {
        return Err(Error::parse(path, 0, format!("expected {} payload bytes, found {}", 4 * w * h, payload.len())));
    }
    let little = scale < 0.0;
    Ok(Grid::from_fn(w, h, |u, v| {
        let at = 4 * ((h - 1 - v) * w + u);
        let b = [payload[at], payload[at + 1], payload[at + 2], payload[at + 3]];
        f64::from(if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) })
    }))
}

pub fn write_pfm(path: impl AsRef<Path>, map: &Grid<f64>) -> Result<()> {
    write(path.as_ref(), &encode_pfm(map))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Grid<f64>> {
    let path = path.as_ref();
    decode_pfm(&read(path)?, path)
}

/// Binary PGM. `maxval ≤ 255` writes one byte per sample, otherwise two
/// big-endian bytes.
pub fn encode_pgm(samples: &Grid<u16>, maxval: u16) -> Vec<u8> {
    let (w, h) = samples.shape();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &s in samples.iter() {
        let s = s.min(maxval);
        if maxval <= 255 {
            out.push(s as u8);
        } else {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

/// Samples and `maxval`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(Grid<u16>, u16)> {
    let (tok, off) = header_tokens(bytes, 4, path)?;
    if tok[0] != "P5" {
        return Err(Error::parse(path, 0, format!("expected binary PGM, found {:?}", tok[0])));
    }
    let (w, h) = dims(tok[1], tok[2], path)?;
    let maxval: u16 = tok[3]
        .parse()
        .ok()
        .filter(|&m| m > 0)
        .ok_or_else(|| Error::parse(path, 0, format!("invalid maxval {:?}", tok[3])))?;
    let bpp = if maxval <= 255 { 1 } else { 2 };
    let payload = &bytes[off..];
    if payload.len() != bpp * w * h {
        return Err(Error::parse(path, 0, format!("expected {} payload bytes, found {}", bpp * w * h, payload.len())));
    }
    let data = if bpp == 1 {
        payload.iter().map(|&b| u16::from(b)).collect()
    } else {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok((Grid::from_vec(w, h, data)?, maxval))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Grid<u16>, u16)> {
    let path = path.as_ref();
    decode_pgm(&read(path)?, path)
}

/// 8-bit mask: 255 static, 0 dynamic.
pub fn encode_mask_pgm(mask: &DynamicMask) -> Vec<u8> {
    let samples = mask.binarize().map(|&s| if s { 255 } else { 0 });
    encode_pgm(&samples, 255)
}

pub fn write_mask_pgm(path: impl AsRef<Path>, mask: &DynamicMask) -> Result<()> {
    write(path.as_ref(), &encode_mask_pgm(mask))
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<DynamicMask> {
    let (samples, maxval) = read_pgm(path)?;
    let half = f64::from(maxval) / 2.0;
    Ok(DynamicMask::from_static_flags(&samples.map(|&s| f64::from(s) >= half)))
}

/// 16-bit image with intensities in `[0, 1]`.
pub fn encode_image_pgm(img: &Image) -> Vec<u8> {
    let samples = img.map(|&x| (x.clamp(0.0, 1.0) * 65535.0).round() as u16);
    encode_pgm(&samples, 65535)
}

pub fn write_image_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write(path.as_ref(), &encode_image_pgm(img))
}

pub fn read_image_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let (samples, maxval) = read_pgm(path)?;
    let m = f64::from(maxval);
    Ok(samples.map(|&s| f64::from(s) / m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn flo_round_trip_keeps_invalid_pixels() {
        let flow = FlowField::from_fn(5, 3, |u, v| (u != 2 || v != 1).then_some((u as f64 * 0.25, -(v as f64))));
        let back = decode_flo(&encode_flo(&flow), p()).unwrap();
        assert_eq!(back, flow);
        assert!(!back.is_valid(2, 1));
    }

    #[test]
    fn flo_header_layout() {
        let bytes = encode_flo(&FlowField::zeros(4, 2));
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(le_i32(&bytes, 4), 4);
        assert_eq!(le_i32(&bytes, 8), 2);
        assert_eq!(bytes.len(), 12 + 8 * 8);
        assert!(decode_flo(&bytes[..20], p()).is_err());
        assert!(decode_flo(b"nope", p()).is_err());
    }

    #[test]
    fn pfm_round_trip_and_row_order() {
        let map = Grid::from_fn(3, 2, |u, v| (u + 10 * v) as f64 + 0.5);
        let bytes = encode_pfm(&map);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // The first stored row is the bottom one.
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 10.5);
        assert_eq!(decode_pfm(&bytes, p()).unwrap(), map);
    }

    #[test]
    fn pfm_big_endian_is_accepted() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes, p()).unwrap()[(0, 0)], 2.5);
    }

    #[test]
    fn pgm_eight_and_sixteen_bit() {
        let g = Grid::from_fn(4, 3, |u, v| (u * 60 + v) as u16);
        let (back, m) = decode_pgm(&encode_pgm(&g, 255), p()).unwrap();
        assert_eq!((back, m), (g.clone(), 255));
        let g16 = g.map(|&x| x * 300);
        let bytes = encode_pgm(&g16, 65535);
        assert_eq!(bytes.len(), "P5\n4 3\n65535\n".len() + 24);
        assert_eq!(decode_pgm(&bytes, p()).unwrap().0, g16);
    }

    #[test]
    fn pgm_header_comments() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let (g, _) = decode_pgm(bytes, p()).unwrap();
        assert_eq!(g.as_slice(), &[0, 255]);
    }

    #[test]
    fn mask_and_image_files() {
        let dir = tempfile::tempdir().unwrap();
        let flags = Grid::from_fn(6, 4, |u, v| (u + v) % 3 != 0);
        let mask = DynamicMask::from_static_flags(&flags);
        let mp = dir.path().join("m.pgm");
        write_mask_pgm(&mp, &mask).unwrap();
        assert_eq!(read_mask_pgm(&mp).unwrap(), mask);

        let img = Grid::from_fn(6, 4, |u, v| (u * 4 + v) as f64 / 23.0);
        let ip = dir.path().join("i.pgm");
        write_image_pgm(&ip, &img).unwrap();
        let back = read_image_pgm(&ip).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(read_flo("/nonexistent/x.flo"), Err(Error::Io { .. })));
    }
}
