//! Chart rasterization: price windows and indicator lines drawn as hard
//! Bresenham polylines into a byte buffer, with no axes, ticks or text.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a plotted line represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SeriesRole {
    Price,
    Open,
    Close,
    Ma(usize),
}

impl SeriesRole {
    pub fn is_price_like(self) -> bool {
        !matches!(self, SeriesRole::Ma(_))
    }
}

impl fmt::Display for SeriesRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeriesRole::Price => f.write_str("price"),
            SeriesRole::Open => f.write_str("open"),
            SeriesRole::Close => f.write_str("close"),
            SeriesRole::Ma(k) => write!(f, "ma{k}"),
        }
    }
}

impl FromStr for SeriesRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "price" => Ok(SeriesRole::Price),
            "open" => Ok(SeriesRole::Open),
            "close" => Ok(SeriesRole::Close),
            _ => s
                .strip_prefix("ma")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(SeriesRole::Ma)
                .ok_or_else(|| Error::Parameter(format!("unknown series role {s:?}"))),
        }
    }
}

impl TryFrom<String> for SeriesRole {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SeriesRole> for String {
    fn from(r: SeriesRole) -> String {
        r.to_string()
    }
}

/// How values map to rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Scaling {
    /// Min/max of the price-like series in the window; indicators are clamped.
    WindowMinmax,
    /// Min/max over every rendered series.
    JointMinmax,
    /// A fixed value range shared by all charts; out-of-range values are clamped.
    FixedRange { lo: f64, hi: f64 },
}

pub type Rgb = [u8; 3];

/// Rendering parameters. Colors are given as they appear on the inverted
/// (black background) canvas; a non-inverted render is the byte-wise
/// complement of the inverted one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Render order; later series overwrite earlier ones where they cross.
    pub series: Vec<SeriesRole>,
    pub colors: BTreeMap<SeriesRole, Rgb>,
    pub invert: bool,
    pub scaling: Scaling,
    pub line_thickness: usize,
}

pub fn default_colors() -> BTreeMap<SeriesRole, Rgb> {
    BTreeMap::from([
        (SeriesRole::Price, [255, 255, 255]),
        (SeriesRole::Close, [255, 255, 255]),
        (SeriesRole::Open, [255, 0, 255]),
        (SeriesRole::Ma(5), [255, 0, 0]),
        (SeriesRole::Ma(7), [255, 255, 0]),
        (SeriesRole::Ma(10), [0, 0, 255]),
        (SeriesRole::Ma(20), [0, 255, 0]),
    ])
}

impl Default for ChartSpec {
    fn default() -> Self {
        Self {
            width: 150,
            height: 100,
            channels: 3,
            series: vec![SeriesRole::Price],
            colors: default_colors(),
            invert: true,
            scaling: Scaling::WindowMinmax,
            line_thickness: 1,
        }
    }
}

impl ChartSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.width < 8 || self.height < 8 {
            problems.push(format!("canvas {}x{} is smaller than 8x8", self.width, self.height));
        }
        if self.channels != 1 && self.channels != 3 {
            problems.push(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.line_thickness == 0 {
            problems.push("line thickness must be >= 1".into());
        }
        if self.series.is_empty() {
            problems.push("no series to render".into());
        }
        for role in &self.series {
            if !self.colors.contains_key(role) {
                problems.push(format!("no color assigned to series {role}"));
            }
        }
        if self.channels == 3 {
            let used: Vec<(&SeriesRole, &Rgb)> =
                self.colors.iter().filter(|(r, _)| self.series.contains(r)).collect();
            for (i, (ra, ca)) in used.iter().enumerate() {
                for (rb, cb) in &used[i + 1..] {
                    if ca == cb {
                        problems.push(format!("series {ra} and {rb} share color {ca:?}"));
                    }
                }
            }
        }
        if let Scaling::FixedRange { lo, hi } = self.scaling {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                problems.push(format!("fixed range [{lo}, {hi}] is empty"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }

    /// Moving-average windows among the rendered series.
    pub fn ma_windows(&self) -> Vec<usize> {
        self.series
            .iter()
            .filter_map(|r| match r {
                SeriesRole::Ma(k) => Some(*k),
                _ => None,
            })
            .collect()
    }
}

/// A row-major, channel-interleaved 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChartImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    /// Inclusive `(start, end)` day indices of the source window.
    pub window_span: (usize, usize),
}

impl ChartImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
            window_span: (0, 0),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    fn put(&mut self, x: i64, y: i64, color: &[u8]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * self.channels;
        self.pixels[i..i + self.channels].copy_from_slice(color);
    }

    /// Pixel values scaled to `[0, 1]` in channel-major (c, h, w) order.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.pixels.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = f64::from(v) / 255.0;
            }
        }
        out
    }
}

/// Byte-wise complement.
pub fn invert_image(img: &ChartImage) -> ChartImage {
    ChartImage {
        pixels: img.pixels.iter().map(|&b| 255 - b).collect(),
        ..img.clone()
    }
}

/// Row for `v` on a canvas of `height` rows, larger values higher (row 0 is the top).
fn value_to_row(v: f64, lo: f64, hi: f64, height: usize) -> i64 {
    let span = (height - 1) as f64;
    if hi <= lo {
        return (span / 2.0).round() as i64;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((1.0 - t) * span).round() as i64
}

/// Bresenham line visiting every pixel from `(x0, y0)` to `(x1, y1)`.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64, mut plot: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        plot(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws each series as a polyline. Sample `i` of `L` sits at column
/// `round(i * (width - 1) / (L - 1))`.
pub fn render_chart(series: &[(SeriesRole, &[f64])], spec: &ChartSpec) -> Result<ChartImage> {
    spec.validate()?;
    let len = series
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::Shape("no series given".into()))?;
    if let Some((role, v)) = series.iter().find(|(_, v)| v.len() != len) {
        return Err(Error::Shape(format!(
            "series {role} has length {} but expected {len}",
            v.len()
        )));
    }
    if len < 2 {
        return Err(Error::Shape(format!("need at least 2 samples, got {len}")));
    }
    if len > spec.width {
        return Err(Error::Resolution(format!(
            "{len} samples do not fit in {} columns",
            spec.width
        )));
    }
    if let Some((role, _)) = series.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Data(format!("series {role} contains non-finite values")));
    }

    let (lo, hi) = value_range(series, spec.scaling);
    let mut img = ChartImage::new(spec.width, spec.height, spec.channels);
    img.window_span = (0, len - 1);
    let half = ((spec.line_thickness - 1) / 2) as i64;
    let t = spec.line_thickness as i64;

    for (role, values) in series {
        let rgb = spec
            .colors
            .get(role)
            .ok_or_else(|| Error::Parameter(format!("no color assigned to series {role}")))?;
        let color: Vec<u8> = if spec.channels == 3 {
            rgb.to_vec()
        } else {
            vec![*rgb.iter().max().unwrap()]
        };
        let points: Vec<(i64, i64)> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = (i as f64 * (spec.width - 1) as f64 / (len - 1) as f64).round() as i64;
                (x, value_to_row(v, lo, hi, spec.height))
            })
            .collect();
        for seg in points.windows(2) {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            bresenham(x0, y0, x1, y1, |x, y| {
                for dy in 0..t {
                    for dx in 0..t {
                        img.put(x - half + dx, y - half + dy, &color);
                    }
                }
            });
        }
    }

    if !spec.invert {
        img = invert_image(&img);
    }
    Ok(img)
}

fn value_range(series: &[(SeriesRole, &[f64])], scaling: Scaling) -> (f64, f64) {
    let fold = |pred: &dyn Fn(SeriesRole) -> bool| {
        series
            .iter()
            .filter(|(r, _)| pred(*r))
            .flat_map(|(_, v)| v.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    match scaling {
        Scaling::FixedRange { lo, hi } => (lo, hi),
        Scaling::JointMinmax => fold(&|_| true),
        Scaling::WindowMinmax => {
            if series.iter().any(|(r, _)| r.is_price_like()) {
                fold(&|r: SeriesRole| r.is_price_like())
            } else {
                fold(&|_| true)
            }
        }
    }
}

/// Bilinear resampling with corner alignment: output pixel `x` samples the
/// source at `x * (src_w - 1) / (dst_w - 1)`.
pub fn resize_image(img: &ChartImage, width: usize, height: usize) -> Result<ChartImage> {
    if width == 0 || height == 0 {
        return Err(Error::Parameter(format!("cannot resize to {width}x{height}")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let scale = |dst: usize, src: usize| {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(width, img.width), scale(height, img.height));
    let ch = img.channels;
    let mut out = ChartImage::new(width, height, ch);
    out.window_span = img.window_span;
    for y in 0..height {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..ch {
                let at = |xx: usize, yy: usize| f64::from(img.pixels[(yy * img.width + xx) * ch + c]);
                let top = at(x0, y0) * (1.0 - wx) + at(x1, y0) * wx;
                let bottom = at(x0, y1) * (1.0 - wx) + at(x1, y1) * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                out.pixels[(y * width + x) * ch + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Writes an 8-bit grayscale or RGB PNG without interlacing.
pub fn save_image(img: &ChartImage, path: &Path) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Format(format!("cannot encode {c}-channel image"))),
    };
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, img.width as u32, img.height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_encode_error)?;
    writer.write_image_data(&img.pixels).map_err(png_encode_error)?;
    writer.finish().map_err(png_encode_error)?;
    Ok(())
}

fn png_encode_error(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

pub fn load_image(path: &Path) -> Result<ChartImage> {
    let file = BufReader::new(File::open(path)?);
    let bad = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit depth", path.display())));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    buf.truncate(info.buffer_size());
    Ok(ChartImage {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
        window_span: (0, 0),
    })
}
