//! Binary Netpbm (P5 grayscale, P6 RGB) ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{center_resize, Frame};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::ImageParse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(path, "not a Netpbm file"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        m => {
            return Err(parse_err(
                path,
                format!("unsupported format P{}; only P5 and P6 are accepted", m as char),
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(parse_err(path, "header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "malformed header: expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, "malformed header number"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(path, "malformed header: missing separator before pixel data")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(parse_err(path, "zero image extent"));
    }
    if maxval != 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}; expected 255")));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos,
    })
}

/// Decodes one P5/P6 image to a `C×H×W` frame scaled by `1/255`.
pub fn parse_netpbm(bytes: &[u8], path: &Path) -> Result<Frame> {
    let h = parse_header(bytes, path)?;
    let n = h.channels * h.width * h.height;
    let pixels = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| parse_err(path, format!("short pixel data: need {n} bytes")))?;
    // interleaved → planar
    let mut data = vec![0.0; n];
    let plane = h.width * h.height;
    for (i, &b) in pixels.iter().enumerate() {
        let (p, c) = (i / h.channels, i % h.channels);
        data[c * plane + p] = b as f64 / 255.0;
    }
    Frame::new(Tensor::new(vec![h.channels, h.height, h.width], data)?)
}

fn convert_channels(frame: Frame, channels: usize) -> Result<Frame> {
    let c = frame.channels();
    if c == channels {
        return Ok(frame);
    }
    let (h, w) = (frame.height(), frame.width());
    let plane = h * w;
    let src = frame.pixels().data();
    let data: Vec<f64> = match (c, channels) {
        (3, 1) => (0..plane)
            .map(|i| (src[i] + src[plane + i] + src[2 * plane + i]) / 3.0)
            .collect(),
        (1, n) => (0..n).flat_map(|_| src.iter().copied()).collect(),
        _ => {
            return Err(Error::Parameter(format!(
                "cannot convert {c}-channel image to {channels} channels"
            )))
        }
    };
    Frame::new(Tensor::new(vec![channels, h, w], data)?)
}

/// Frames read from a directory, with labels when classes are subdirectories.
#[derive(Debug, Clone, Default)]
pub struct ImageDirectory {
    pub frames: Vec<Frame>,
    /// Present when images live in per-class subdirectories.
    pub labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub paths: Vec<PathBuf>,
}

fn is_netpbm(p: &Path) -> bool {
    p.is_file()
        && matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("pgm" | "ppm" | "pnm")
        )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Loads `*.pgm`/`*.ppm` files in lexicographic order, resized to
/// `expected = (channels, [height, width])`. Subdirectories, if any, are
/// treated as classes in sorted order.
pub fn load_image_directory(dir: &Path, channels: usize, size: [usize; 2]) -> Result<ImageDirectory> {
    let entries = sorted_entries(dir)?;
    let subdirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut out = ImageDirectory::default();
    let load = |path: &Path, out: &mut ImageDirectory| -> Result<()> {
        let bytes = fs::read(path)?;
        let frame = parse_netpbm(&bytes, path)?;
        let frame = center_resize(&convert_channels(frame, channels)?, size)?;
        out.frames.push(frame);
        out.paths.push(path.to_path_buf());
        Ok(())
    };
    if subdirs.is_empty() {
        for p in entries.iter().filter(|p| is_netpbm(p)) {
            load(p, &mut out)?;
        }
        return Ok(out);
    }
    let mut labels = Vec::new();
    for (class, sub) in subdirs.iter().enumerate() {
        out.class_names
            .push(sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for p in sorted_entries(sub)?.iter().filter(|p| is_netpbm(p)) {
            load(p, &mut out)?;
            labels.push(class);
        }
    }
    out.labels = Some(labels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(path: &str) -> PathBuf {
        PathBuf::from(path)
    }

    #[test]
    fn p5_two_by_two() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let f = parse_netpbm(&bytes, &p("a.pgm")).unwrap();
        assert_eq!(f.pixels().shape(), &[1, 2, 2]);
        let d = f.pixels().data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 0.50196).abs() < 1e-5);
        assert!((d[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn p6_planar_order_and_comments() {
        let mut bytes = b"P6 # rgb\n1 1 # one pixel\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let f = parse_netpbm(&bytes, &p("c.ppm")).unwrap();
        assert_eq!(f.pixels().shape(), &[3, 1, 1]);
        assert_eq!(f.pixels().data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_p4_and_short_data() {
        let err = parse_netpbm(b"P4\n1 1\n", &p("b.pbm")).unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
        assert!(err.to_string().contains("b.pbm"));
        let err = parse_netpbm(b"P5\n2 2\n255\n\x00\x01", &p("s.pgm")).unwrap_err();
        assert!(err.to_string().contains("short pixel data"), "{err}");
        assert!(parse_netpbm(b"P5\n2 x\n255\n", &p("m.pgm")).is_err());
    }

    #[test]
    fn directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_directory(dir.path(), 1, [2, 2]).unwrap().frames.is_empty());
        for (class, name, val) in [("b_cls", "1.pgm", 10u8), ("a_cls", "2.pgm", 20), ("a_cls", "1.pgm", 30)] {
            let d = dir.path().join(class);
            fs::create_dir_all(&d).unwrap();
            let mut bytes = b"P5\n2 2\n255\n".to_vec();
            bytes.extend_from_slice(&[val; 4]);
            fs::write(d.join(name), bytes).unwrap();
        }
        let out = load_image_directory(dir.path(), 1, [4, 4]).unwrap();
        assert_eq!(out.class_names, vec!["a_cls", "b_cls"]);
        assert_eq!(out.labels.as_deref(), Some(&[0, 0, 1][..]));
        assert_eq!(out.frames[0].pixels().shape(), &[1, 4, 4]);
        assert!((out.frames[0].pixels().data()[0] - 30.0 / 255.0).abs() < 1e-12);
    }
}
