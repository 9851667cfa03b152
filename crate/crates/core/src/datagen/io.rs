//! On-disk dataset layout.
//!
//! ```text
//! index.tsv        <id>\t<domain>\t<stem>     one line per sample
//! <stem>.ppm       binary P6, maxval 255
//! <stem>.pgm       binary P5, maxval 255, 255 = ignore
//! <stem>.boxes     "<class> <cx> <cy> <w> <h>" per line
//! <stem>.caption   space-separated token ids
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::SampleRecord;
use crate::error::{Error, Result};
use crate::image::{BoxAnn, ImageU8, Mask};

fn format_err(file: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn pnm_bytes(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_ppm(path: &Path, img: &ImageU8) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid(format!("PPM needs 3 channels, got {}", img.channels)));
    }
    write_file(path, &pnm_bytes("P6", img.width, img.height, &img.data))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_file(path, &pnm_bytes("P5", mask.width, mask.height, &mask.data))
}

/// Parse a binary PNM header; returns (width, height, payload offset).
fn parse_pnm(path: &Path, bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(path, 0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        let ws_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == ws_start {
            return Err(format_err(path, pos, "expected whitespace"));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(format_err(path, pos, "expected decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, start, "number out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "expected single whitespace before pixel data"));
    }
    pos += 1;
    if fields[2] != 255 {
        return Err(format_err(path, pos - 1, format!("maxval must be 255, got {}", fields[2])));
    }
    Ok((fields[0], fields[1], pos))
}

pub fn read_ppm(path: &Path) -> Result<ImageU8> {
    let bytes = read_file(path)?;
    let (width, height, off) = parse_pnm(path, &bytes, b"P6")?;
    let need = width * height * 3;
    if bytes.len() != off + need {
        return Err(format_err(path, bytes.len().min(off + need), format!("expected {} pixel bytes, found {}", need, bytes.len() - off)));
    }
    Ok(ImageU8 {
        height,
        width,
        channels: 3,
        data: bytes[off..].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = read_file(path)?;
    let (width, height, off) = parse_pnm(path, &bytes, b"P5")?;
    let need = width * height;
    if bytes.len() != off + need {
        return Err(format_err(path, bytes.len().min(off + need), format!("expected {} pixel bytes, found {}", need, bytes.len() - off)));
    }
    Mask::new(height, width, bytes[off..].to_vec())
}

fn boxes_text(boxes: &[BoxAnn]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {} {}\n", b.class, b.cx, b.cy, b.w, b.h))
        .collect()
}

fn parse_boxes(path: &Path, text: &str) -> Result<Vec<BoxAnn>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if !body.is_empty() {
            let parts: Vec<&str> = body.split(' ').collect();
            if parts.len() != 5 {
                return Err(format_err(path, offset, format!("expected 5 fields, got {}", parts.len())));
            }
            let class: u8 = parts[0].parse().map_err(|_| format_err(path, offset, "bad class id"))?;
            let mut v = [0.0; 4];
            for (i, p) in parts[1..].iter().enumerate() {
                v[i] = p.parse().map_err(|_| format_err(path, offset, format!("bad float {p:?}")))?;
            }
            out.push(BoxAnn {
                class,
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            });
        }
        offset += line.len();
    }
    Ok(out)
}

fn caption_text(tokens: &[u32]) -> String {
    let mut s = tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

fn parse_caption(path: &Path, text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for tok in text.trim_end_matches('\n').split(' ') {
        out.push(tok.parse().map_err(|_| format_err(path, offset, format!("bad token {tok:?}")))?);
        offset += tok.len() + 1;
    }
    Ok(out)
}

/// Write records under `dir` (created if needed).
pub fn export_dataset(records: &[SampleRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for r in records {
        let stem = r.stem();
        index.push_str(&format!("{}\t{}\t{}\n", r.id, r.domain, stem));
        write_ppm(&dir.join(format!("{stem}.ppm")), &r.image)?;
        write_pgm(&dir.join(format!("{stem}.pgm")), &r.mask)?;
        write_file(&dir.join(format!("{stem}.boxes")), boxes_text(&r.boxes).as_bytes())?;
        write_file(&dir.join(format!("{stem}.caption")), caption_text(&r.caption).as_bytes())?;
    }
    write_file(&dir.join("index.tsv"), index.as_bytes())
}

pub fn import_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let index_path: PathBuf = dir.join("index.tsv");
    if !index_path.exists() {
        return Err(Error::MissingArtifact(index_path));
    }
    let bytes = read_file(&index_path)?;
    let text = String::from_utf8(bytes).map_err(|e| format_err(&index_path, e.utf8_error().valid_up_to(), "invalid UTF-8"))?;
    let mut records = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if body.is_empty() {
            offset += line.len();
            continue;
        }
        let cols: Vec<&str> = body.split('\t').collect();
        if cols.len() != 3 {
            return Err(format_err(&index_path, offset, format!("expected 3 tab-separated fields, got {}", cols.len())));
        }
        let id: u64 = cols[0].parse().map_err(|_| format_err(&index_path, offset, "bad sample id"))?;
        let domain: u32 = cols[1]
            .parse()
            .map_err(|_| format_err(&index_path, offset + cols[0].len() + 1, "bad domain id"))?;
        let stem = cols[2];
        let image = read_ppm(&dir.join(format!("{stem}.ppm")))?;
        let mask = read_pgm(&dir.join(format!("{stem}.pgm")))?;
        let boxes_path = dir.join(format!("{stem}.boxes"));
        let boxes_raw = read_file(&boxes_path)?;
        let boxes = parse_boxes(&boxes_path, &String::from_utf8_lossy(&boxes_raw))?;
        let cap_path = dir.join(format!("{stem}.caption"));
        let cap_raw = read_file(&cap_path)?;
        let caption = parse_caption(&cap_path, &String::from_utf8_lossy(&cap_raw))?;
        records.push(SampleRecord {
            id,
            domain,
            image,
            mask,
            boxes,
            caption,
        });
        offset += line.len();
    }
    Ok(records)
}
