//! Binary PPM (P6) image files; the interchange format used by the CLI.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vq::Image;

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // read header fields: magic, width, height, maxval, then one whitespace
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut in_comment = false;
    while fields.len() < 4 {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        header.push(b[0]);
        let c = b[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !cur.is_empty() {
                fields.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(c);
        }
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("not a P6 ppm: magic {}", fields[0])));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| Error::Format("bad ppm width".into()))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format("bad ppm height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Format(format!("unsupported maxval {}", fields[3])));
    }
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    let mut image = Image::new(height, width);
    for (p, b) in image.pixels.iter_mut().zip(&bytes) {
        *p = *b as f64 / 255.0;
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bytes() {
        let mut img = Image::new(3, 5);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = ((i * 13) % 256) as f64 / 255.0;
        }
        let dir = std::env::temp_dir().join("ufcgen-ppm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img);
        std::fs::remove_file(&path).unwrap();
    }
}
