//! Ground-truth and detection text files, binary PGM heatmaps and PPM scene
//! images.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ctdnet_core::metrics::{Detection, GroundTruthBox};
use ctdnet_core::{Bbox, Tensor};

fn records(text: &str, fields: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>)>> {
    text.lines().enumerate().filter_map(move |(n, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        Some(if parts.len() == fields {
            Ok((n + 1, parts))
        } else {
            Err(anyhow!("line {}: expected {fields} fields, found {}", n + 1, parts.len()))
        })
    })
}

fn field<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| anyhow!("line {line}: invalid {what} {s:?}"))
}

fn bbox(line: usize, p: &[&str]) -> Result<Bbox> {
    let c: Vec<f64> = p
        .iter()
        .map(|s| field(line, "coordinate", s))
        .collect::<Result<_>>()?;
    Bbox::new(c[0], c[1], c[2], c[3]).map_err(|e| anyhow!("line {line}: {e}"))
}

/// `image_id class_id x1 y1 x2 y2` per line.
pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruthBox>> {
    records(text, 6)
        .map(|r| {
            let (n, p) = r?;
            Ok(GroundTruthBox {
                image: field(n, "image id", p[0])?,
                class: field(n, "class id", p[1])?,
                bbox: bbox(n, &p[2..])?,
            })
        })
        .collect()
}

/// `image_id class_id score x1 y1 x2 y2` per line.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    records(text, 7)
        .map(|r| {
            let (n, p) = r?;
            let score: f64 = field(n, "score", p[2])?;
            ensure!(score.is_finite(), "line {n}: score must be finite");
            Ok(Detection {
                image: field(n, "image id", p[0])?,
                class: field(n, "class id", p[1])?,
                score,
                bbox: bbox(n, &p[3..])?,
            })
        })
        .collect()
}

pub fn format_ground_truth(gts: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for g in gts {
        let b = g.bbox;
        writeln!(s, "{} {} {} {} {} {}", g.image, g.class, b.x1, b.y1, b.x2, b.y2).unwrap();
    }
    s
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        writeln!(
            s,
            "{} {} {:.9} {:.6} {:.6} {:.6} {:.6}",
            d.image, d.class, d.score, b.x1, b.y1, b.x2, b.y2
        )
        .unwrap();
    }
    s
}

/// Binary greyscale PGM, maxval 255.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    ensure!(pixels.len() == width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Reads 8-bit P5 files, honoring `#` comments in the header.
pub fn decode_pgm(buf: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, "truncated PGM header");
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    ensure!(token()? == "P5", "not a binary PGM");
    let width: usize = token()?.parse().context("PGM width")?;
    let height: usize = token()?.parse().context("PGM height")?;
    let maxval: u16 = token()?.parse().context("PGM maxval")?;
    ensure!(width > 0 && height > 0, "PGM extents must be positive");
    ensure!((1..=255).contains(&maxval), "only 8-bit PGM is supported");
    ensure!(pos < buf.len() && buf[pos].is_ascii_whitespace(), "missing header terminator");
    let body = &buf[pos + 1..];
    ensure!(body.len() == width * height, "PGM body has {} bytes, expected {}", body.len(), width * height);
    Ok(Pgm {
        width,
        height,
        maxval,
        pixels: body.to_vec(),
    })
}

/// Binary PPM of a `[3, H, W]` image with values clamped to `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3("encode_ppm").map_err(|e| anyhow!(e))?;
    if c != 3 {
        bail!("PPM needs 3 channels, got {c}");
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}
