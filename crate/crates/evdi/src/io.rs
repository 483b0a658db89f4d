//! File formats.
//!
//! - PNG, 8-bit: quantized interchange for inputs and previews. Loading maps
//!   sample/255 straight to linear intensity (no gamma decode); saving clamps
//!   to [0, 1] and rounds.
//! - PFM, 32-bit float: lossless-enough intermediates (ground-truth frames,
//!   checkpoint canvases). Standard layout: bottom-to-top scanlines, scale
//!   sign encodes endianness.
//! - Event CSV: one `t_us,x,y,p` line per event, p in {-1, 1}, sorted by
//!   t_us. Times are integer microseconds on disk and f64 seconds in memory.
//! - Event binary: packed little-endian records (u64 t_us, u16 x, u16 y,
//!   i8 p), same ordering contract as the CSV.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::core::{Event, EventStream, ExposureWindow, ImageBuffer};
use crate::error::{EvdiError, Result};

// ---------------------------------------------------------------------------
// PNG

/// Loads an 8-bit PNG as linear intensities in [0, 1] (value / 255, no gamma
/// decode). Grayscale files load as 1 channel, everything else as RGB.
pub fn load_png(path: &Path) -> Result<ImageBuffer> {
    let dynimg = image::open(path)?;
    match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageBuffer::new(w, h, 1, data)
        }
        other => {
            let img = other.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            ImageBuffer::new(w, h, 3, data)
        }
    }
}

/// Saves as 8-bit PNG, clamping to [0, 1] first.
pub fn save_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer length checked by construction")
            .save(path)?,
        3 => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer length checked by construction")
            .save(path)?,
        _ => unreachable!("ImageBuffer enforces 1 or 3 channels"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PFM

/// Saves a 1- or 3-channel buffer as little-endian PFM (f32 samples).
pub fn save_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = if img.channels == 3 { "PF" } else { "Pf" };
    write!(w, "{header}\n{} {}\n-1.0\n", img.width, img.height)?;
    // Bottom-to-top scanlines.
    for y in (0..img.height).rev() {
        let row_start = y * img.width * img.channels;
        let row = &img.data[row_start..row_start + img.width * img.channels];
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_pfm_token(r: &mut impl Read) -> Result<String> {
    let mut token = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(EvdiError::format("unexpected end of PFM header"));
        }
        if byte[0].is_ascii_whitespace() {
            if !token.is_empty() {
                break;
            }
        } else {
            token.push(byte[0]);
        }
    }
    String::from_utf8(token).map_err(|_| EvdiError::format("non-UTF8 PFM header"))
}

/// Loads a PFM file (either endianness, grayscale or color).
pub fn load_pfm(path: &Path) -> Result<ImageBuffer> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_pfm_token(&mut r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(EvdiError::format(format!("bad PFM magic '{other}'"))),
    };
    let width: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| EvdiError::format("bad PFM width"))?;
    let height: usize = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| EvdiError::format("bad PFM height"))?;
    let scale: f64 = read_pfm_token(&mut r)?
        .parse()
        .map_err(|_| EvdiError::format("bad PFM scale"))?;
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut raw)
        .map_err(|_| EvdiError::format("truncated PFM payload"))?;
    let mut data = vec![0.0f64; width * height * channels];
    for y in 0..height {
        // File rows run bottom-to-top.
        let file_row = height - 1 - y;
        for i in 0..width * channels {
            let off = (file_row * width * channels + i) * 4;
            let b = [raw[off], raw[off + 1], raw[off + 2], raw[off + 3]];
            let v = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            data[y * width * channels + i] = v as f64;
        }
    }
    ImageBuffer::new(width, height, channels, data)
}

// ---------------------------------------------------------------------------
// Events

const MICROS: f64 = 1e6;

fn event_to_micros(e: &Event, window: ExposureWindow) -> Result<u64> {
    let t_us = (e.t * MICROS).round();
    if t_us < 0.0 {
        return Err(EvdiError::format(format!(
            "event time {} s is negative; the on-disk format stores unsigned microseconds",
            e.t
        )));
    }
    // Keep rounded times inside the window so a round-trip re-validates.
    let lo = (window.start() * MICROS).ceil().max(0.0);
    let hi = (window.end() * MICROS).floor();
    Ok((t_us.clamp(lo, hi)) as u64)
}

pub fn save_events_csv(path: &Path, stream: &EventStream) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in stream.events() {
        let t_us = event_to_micros(e, stream.window())?;
        writeln!(w, "{},{},{},{}", t_us, e.x, e.y, e.polarity)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_events_csv(
    path: &Path,
    width: usize,
    height: usize,
    window: ExposureWindow,
) -> Result<EventStream> {
    let r = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut prev_t = 0u64;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut field = |name: &str| {
            parts
                .next()
                .map(str::trim)
                .ok_or_else(|| EvdiError::format(format!("line {}: missing {name}", lineno + 1)))
        };
        let t_us: u64 = field("t_us")?
            .parse()
            .map_err(|_| EvdiError::format(format!("line {}: bad t_us", lineno + 1)))?;
        let x: u16 = field("x")?
            .parse()
            .map_err(|_| EvdiError::format(format!("line {}: bad x", lineno + 1)))?;
        let y: u16 = field("y")?
            .parse()
            .map_err(|_| EvdiError::format(format!("line {}: bad y", lineno + 1)))?;
        let p: i8 = field("p")?
            .parse()
            .map_err(|_| EvdiError::format(format!("line {}: bad polarity", lineno + 1)))?;
        if parts.next().is_some() {
            return Err(EvdiError::format(format!(
                "line {}: expected exactly 4 fields",
                lineno + 1
            )));
        }
        if !events.is_empty() && t_us < prev_t {
            return Err(EvdiError::format(format!(
                "line {}: events must be sorted by t_us",
                lineno + 1
            )));
        }
        prev_t = t_us;
        events.push(Event {
            t: t_us as f64 / MICROS,
            x,
            y,
            polarity: p,
        });
    }
    EventStream::new(events, width, height, window)
}

pub fn save_events_bin(path: &Path, stream: &EventStream) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in stream.events() {
        let t_us = event_to_micros(e, stream.window())?;
        w.write_all(&t_us.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&e.polarity.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_events_bin(
    path: &Path,
    width: usize,
    height: usize,
    window: ExposureWindow,
) -> Result<EventStream> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    const REC: usize = 8 + 2 + 2 + 1;
    if bytes.len() % REC != 0 {
        return Err(EvdiError::format(format!(
            "event binary length {} is not a multiple of the {REC}-byte record",
            bytes.len()
        )));
    }
    let mut events = Vec::with_capacity(bytes.len() / REC);
    let mut prev_t = 0u64;
    for (i, rec) in bytes.chunks_exact(REC).enumerate() {
        let t_us = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = rec[12] as i8;
        if i > 0 && t_us < prev_t {
            return Err(EvdiError::format(format!(
                "record {i}: events must be sorted by t_us"
            )));
        }
        prev_t = t_us;
        events.push(Event {
            t: t_us as f64 / MICROS,
            x,
            y,
            polarity: p,
        });
    }
    EventStream::new(events, width, height, window)
}
