//! Grid file formats: PFM for float maps, 8-bit PNG for images and masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::FloatGrid;

/// Mask PNG pixels at or above this value load as foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// Encodes a 1- or 3-channel grid as little-endian PFM (rows stored bottom
/// to top, values as f32).
pub fn encode_pfm(grid: &FloatGrid) -> Result<Vec<u8>> {
    let tag = match grid.channels() {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::Format(format!(
                "PFM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for i in (0..h).rev() {
        for j in 0..w {
            for &x in grid.pixel(i, j) {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<FloatGrid> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Format(format!("not a PFM file (magic {t:?})"))),
    };
    let parse = |s: String, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PFM {what} {s:?}")))
    };
    let w = parse(token()?, "width")?;
    let h = parse(token()?, "height")?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {scale_tok:?}")))?;
    if scale == 0.0 {
        return Err(Error::Format("PFM scale must be non-zero".into()));
    }
    // Exactly one whitespace byte separates the header from the data.
    let data = bytes.get(pos + 1..).unwrap_or_default();
    let n = h * w * channels;
    if data.len() < n * 4 {
        return Err(Error::Format(format!(
            "PFM data too short: {} bytes for {n} values",
            data.len()
        )));
    }
    let little = scale < 0.0;
    let mut grid = FloatGrid::zeros(h, w, channels);
    for (k, chunk) in data[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row_from_bottom, rest) = (k / (w * channels), k % (w * channels));
        grid.set(
            h - 1 - row_from_bottom,
            rest / channels,
            rest % channels,
            f64::from(x),
        );
    }
    Ok(grid)
}

pub fn write_pfm(path: &Path, grid: &FloatGrid) -> Result<()> {
    write_atomic(path, &encode_pfm(grid)?)
}

pub fn read_pfm(path: &Path) -> Result<FloatGrid> {
    decode_pfm(&fs::read(path)?)
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel grid in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, grid: &FloatGrid) -> Result<()> {
    if grid.channels() != 3 {
        return Err(Error::Format(format!(
            "RGB PNG needs 3 channels, got {}",
            grid.channels()
        )));
    }
    let img: RgbImage = ImageBuffer::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        let p = grid.pixel(y as usize, x as usize);
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    write_png(path, |buf| img.write_to(buf, image::ImageFormat::Png))
}

/// Writes a binary mask as a 0/255 grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &FloatGrid) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::Format("mask PNG needs 1 channel".into()));
    }
    let img: GrayImage = ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.at(y as usize, x as usize) != 0.0 {
            255
        } else {
            0
        }])
    });
    write_png(path, |buf| img.write_to(buf, image::ImageFormat::Png))
}

fn write_png(
    path: &Path,
    encode: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>,
) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    encode(&mut buf)?;
    write_atomic(path, &buf.into_inner())
}

pub fn read_rgb_png(path: &Path) -> Result<FloatGrid> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(FloatGrid::from_fn(h as usize, w as usize, 3, |i, j, c| {
        f64::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0
    }))
}

pub fn read_mask_png(path: &Path) -> Result<FloatGrid> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(FloatGrid::from_fn(h as usize, w as usize, 1, |i, j, _| {
        f64::from(img.get_pixel(j as u32, i as u32)[0] >= MASK_THRESHOLD)
    }))
}

/// Writes via a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(c: usize) -> FloatGrid {
        FloatGrid::from_fn(5, 7, c, |i, j, ch| (i * 100 + j * 10 + ch) as f64 * 0.25)
    }

    #[test]
    fn pfm_round_trip_and_layout() {
        for c in [1, 3] {
            let g = grid(c);
            let bytes = encode_pfm(&g).unwrap();
            assert_eq!(decode_pfm(&bytes).unwrap(), g);
        }
        let bytes = encode_pfm(&grid(1)).unwrap();
        let header = b"Pf\n7 5\n-1.0\n";
        assert!(bytes.starts_with(header));
        // First stored value is the bottom-left pixel.
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 400.0 * 0.25);
        assert!(encode_pfm(&FloatGrid::zeros(2, 2, 2)).is_err());
        assert!(decode_pfm(b"P6\n1 1\n-1\n").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0").is_err());
    }

    #[test]
    fn big_endian_pfm_decodes() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().at(0, 0), 2.5);
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = FloatGrid::from_fn(4, 6, 3, |i, j, c| ((i + j + c) % 5) as f64 * 51.0 / 255.0);
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &rgb).unwrap();
        let back = read_rgb_png(&p).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(rgb.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));

        let mask = FloatGrid::from_fn(4, 6, 1, |i, j, _| f64::from((i + j) % 2 == 0));
        let q = dir.path().join("m.png");
        write_mask_png(&q, &mask).unwrap();
        assert_eq!(read_mask_png(&q).unwrap(), mask);
    }
}
