//! PPM/PGM images, annotation text files and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::detector::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, H, W]` image in `[0, 1]` as binary 8-bit PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("PPM image must be [3, H, W]"));
    };
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    let d = image.data();
    for p in 0..plane {
        bytes.extend([d[p], d[plane + p], d[2 * plane + p]].map(to_byte));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a `[H, W]` map in `[0, 1]` as binary 8-bit PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("PGM image must be [H, W]"));
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| to_byte(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses the header of a binary PNM file; returns the dimensions and the
/// offset of the pixel data.
fn pnm_header(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(magic) {
        return Err(dataset_err(path, format!("not a {} file", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| dataset_err(path, "malformed header"))?;
    }
    if fields[2] != 255 {
        return Err(dataset_err(path, "only 8-bit images are supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(dataset_err(path, "malformed header"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, offset) = pnm_header(path, &bytes, b"P6")?;
    let pixels = &bytes[offset..];
    let plane = w * h;
    if pixels.len() != 3 * plane || plane == 0 {
        return Err(dataset_err(path, "pixel data does not match the header"));
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = pixels[3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn format_annotations(annotations: &[Annotation]) -> String {
    annotations
        .iter()
        .map(|a| {
            let b = &a.bbox;
            format!("{} {} {} {} {}\n", a.category, b.x_min, b.y_min, b.x_max, b.y_max)
        })
        .collect()
}

fn parse_annotations(path: &Path, text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| dataset_err(path, format!("line {}: {what}", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad("expected `category x_min y_min x_max y_max`"));
        }
        let category: usize = fields[0].parse().map_err(|_| bad("category is not an integer"))?;
        let mut coords = [0.0; 4];
        for (slot, f) in coords.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<i64>().map_err(|_| bad("coordinate is not an integer"))? as f64;
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|_| bad("degenerate box"))?;
        out.push(Annotation { bbox, category });
    }
    Ok(out)
}

/// Writes `<id>.ppm`, `<id>.txt` per sample and a `manifest.txt` listing ids
/// in order.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for s in samples {
        if s.id.is_empty() || s.id.contains(['/', '\\', '\n']) {
            return Err(Error::invalid(format!("unusable sample id `{}`", s.id)));
        }
        if s.annotations.iter().any(|a| {
            let b = &a.bbox;
            [b.x_min, b.y_min, b.x_max, b.y_max].iter().any(|v| v.fract() != 0.0)
        }) {
            return Err(Error::invalid(format!(
                "sample `{}` has non-integer box coordinates",
                s.id
            )));
        }
        write_ppm(&dir.join(format!("{}.ppm", s.id)), &s.image)?;
        let txt = dir.join(format!("{}.txt", s.id));
        fs::write(&txt, format_annotations(&s.annotations)).map_err(|e| Error::io(&txt, e))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest: PathBuf = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for id in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ppm = dir.join(format!("{id}.ppm"));
        if !ppm.is_file() {
            return Err(dataset_err(&ppm, "image listed in manifest is missing"));
        }
        let image = read_ppm(&ppm)?;
        let txt = dir.join(format!("{id}.txt"));
        let ann = fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?;
        samples.push(Sample {
            id: id.to_string(),
            image,
            annotations: parse_annotations(&txt, &ann)?,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_annotation_names_the_line() {
        let err = parse_annotations(Path::new("a.txt"), "0 1 2 3 4\n1 x 2 3 4\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_annotations(Path::new("a.txt"), "0 5 5 5 9\n").is_err());
    }
}
