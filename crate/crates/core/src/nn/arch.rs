use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kh: usize, kw: usize },
    Maxpool { ph: usize, pw: usize },
    Relu,
    Fc { units: usize },
    Dropout { rate: f64 },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }
}

/// Per-sample activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(d) => d,
        }
    }

    /// Shape with a leading batch dimension.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![n, c, h, w],
            ActShape::Flat(d) => vec![n, d],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(d) => write!(f, "{d}"),
        }
    }
}

/// An ordered layer list over a fixed `[channels, height, width]` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Adjustments made while fitting a preset to its input size.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ArchitectureSpec {
    /// Input shape of every layer followed by the final output shape, so the
    /// result has `layers.len() + 1` entries.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Architecture(format!("input {c}x{h}x{w} has an empty dimension")));
        }
        let mut cur = ActShape::Map { c, h, w };
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::Architecture(format!("layer {i} ({layer:?}): {msg}"));
            cur = match (*layer, cur) {
                (LayerSpec::Conv { out_channels, kh, kw }, ActShape::Map { h, w, .. }) => {
                    if out_channels == 0 || kh == 0 || kw == 0 {
                        return Err(fail("dimensions must be at least 1".into()));
                    }
                    if kh > h || kw > w {
                        return Err(fail(format!("kernel does not fit a {h}x{w} input")));
                    }
                    ActShape::Map { c: out_channels, h: h - kh + 1, w: w - kw + 1 }
                }
                (LayerSpec::Maxpool { ph, pw }, ActShape::Map { c, h, w }) => {
                    if ph == 0 || pw == 0 {
                        return Err(fail("dimensions must be at least 1".into()));
                    }
                    if h % ph != 0 || w % pw != 0 {
                        return Err(fail(format!("pool does not tile a {h}x{w} input")));
                    }
                    ActShape::Map { c, h: h / ph, w: w / pw }
                }
                (LayerSpec::Conv { .. } | LayerSpec::Maxpool { .. }, ActShape::Flat(_)) => {
                    return Err(fail("spatial layer after a flat activation".into()));
                }
                (LayerSpec::Fc { units }, _) => {
                    if units == 0 {
                        return Err(fail("units must be at least 1".into()));
                    }
                    ActShape::Flat(units)
                }
                (LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(fail(format!("rate {rate} is outside [0, 1)")));
                    }
                    s
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::SoftmaxXent, s) => {
                    if i + 1 != self.layers.len() {
                        return Err(fail("softmax-xent must be the last layer".into()));
                    }
                    if s != ActShape::Flat(NUM_CLASSES) {
                        return Err(fail(format!("expects {NUM_CLASSES} logits, got {s}")));
                    }
                    s
                }
            };
            out.push(cur);
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxXent) {
            return Err(Error::Architecture("the last layer must be softmax-xent".into()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| match (*l, *s) {
                (LayerSpec::Conv { out_channels, kh, kw }, ActShape::Map { c, .. }) => {
                    out_channels * (c * kh * kw + 1)
                }
                (LayerSpec::Fc { units }, s) => units * (s.numel() + 1),
                _ => 0,
            })
            .sum())
    }

    /// Makes every pool tile its input by enlarging the nearest preceding
    /// conv kernel by the remainder along each axis.
    fn fit_pools(&mut self) -> Result<()> {
        loop {
            let [c, h, w] = self.input;
            let mut cur = ActShape::Map { c, h, w };
            let mut last_conv = None;
            let mut fix = None;
            for (i, layer) in self.layers.iter().enumerate() {
                match (*layer, cur) {
                    (LayerSpec::Conv { out_channels, kh, kw }, ActShape::Map { h, w, .. }) => {
                        if kh > h || kw > w {
                            return Err(Error::Architecture(format!(
                                "layer {i}: kernel {kh}x{kw} does not fit a {h}x{w} input"
                            )));
                        }
                        last_conv = Some(i);
                        cur = ActShape::Map { c: out_channels, h: h - kh + 1, w: w - kw + 1 };
                    }
                    (LayerSpec::Maxpool { ph, pw }, ActShape::Map { c, h, w }) => {
                        let (rh, rw) = (h % ph, w % pw);
                        if rh != 0 || rw != 0 {
                            fix = Some((i, rh, rw));
                            break;
                        }
                        cur = ActShape::Map { c, h: h / ph, w: w / pw };
                    }
                    (LayerSpec::Fc { units }, _) => cur = ActShape::Flat(units),
                    _ => {}
                }
            }
            let Some((pool, rh, rw)) = fix else {
                return self.validate();
            };
            let Some(ci) = last_conv else {
                return Err(Error::Architecture(format!("pool at layer {pool} does not tile its input")));
            };
            if let LayerSpec::Conv { kh, kw, .. } = &mut self.layers[ci] {
                self.notes.push(format!(
                    "conv layer {ci}: kernel {}x{} enlarged to {}x{} so the pool at layer {pool} tiles its input",
                    kh,
                    kw,
                    *kh + rh,
                    *kw + rw
                ));
                *kh += rh;
                *kw += rw;
            }
        }
    }

    /// Human-readable layer-by-layer shape listing.
    pub fn summary(&self) -> Result<String> {
        let shapes = self.shapes()?;
        let mut s = format!("{} input {}\n", self.name, shapes[0]);
        for (i, layer) in self.layers.iter().enumerate() {
            s.push_str(&format!("{i:>3} {layer:?} -> {}\n", shapes[i + 1]));
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    A1,
    A2,
    A3,
    MiniAlex,
}

impl ArchPreset {
    pub const ALL: [ArchPreset; 4] = [ArchPreset::A1, ArchPreset::A2, ArchPreset::A3, ArchPreset::MiniAlex];

    pub fn name(&self) -> &'static str {
        match self {
            ArchPreset::A1 => "a1",
            ArchPreset::A2 => "a2",
            ArchPreset::A3 => "a3",
            ArchPreset::MiniAlex => "mini-alex",
        }
    }

    /// Builds the preset for a `[c, h, w]` input. `filters` is the per-layer
    /// filter count for A1-A3 and the first-layer width for mini-Alex (later
    /// conv layers use twice that).
    pub fn build(&self, input: [usize; 3], filters: usize) -> Result<ArchitectureSpec> {
        use LayerSpec::*;
        if filters == 0 {
            return Err(Error::Architecture("filter count must be at least 1".into()));
        }
        let [_, h, w] = input;
        // 30x40 kernels at 100x150, scaled with the input.
        let kh = ((30 * h) as f64 / 100.0).round().max(1.0) as usize;
        let kw = ((40 * w) as f64 / 150.0).round().max(1.0) as usize;
        let f = filters;
        let conv = |out_channels, kh, kw| Conv { out_channels, kh, kw };
        let pool = Maxpool { ph: 2, pw: 2 };
        let head = [Fc { units: 128 }, Relu, Fc { units: NUM_CLASSES }, SoftmaxXent];
        let mut layers = match self {
            ArchPreset::A1 => vec![conv(f, kh, kw), Relu, conv(f, 3, 3), Relu, pool],
            ArchPreset::A2 => vec![conv(f, kh, kw), Relu, pool, conv(f, 3, 3), Relu, pool],
            ArchPreset::A3 => vec![
                conv(f, kh, kw),
                Relu,
                conv(f, 3, 3),
                Relu,
                conv(f, 3, 3),
                Relu,
                conv(f, 3, 3),
                Relu,
                pool,
                conv(f, 3, 3),
                Relu,
                pool,
            ],
            ArchPreset::MiniAlex => vec![
                conv(f, 5, 5),
                Relu,
                pool,
                conv(2 * f, 3, 3),
                Relu,
                pool,
                conv(2 * f, 3, 3),
                Relu,
                conv(2 * f, 3, 3),
                Relu,
                conv(2 * f, 2, 2),
                Relu,
                Fc { units: 64 },
                Relu,
                Dropout { rate: 0.5 },
                Fc { units: 64 },
                Relu,
                Dropout { rate: 0.5 },
                Fc { units: NUM_CLASSES },
                SoftmaxXent,
            ],
        };
        if *self != ArchPreset::MiniAlex {
            layers.extend(head);
        }
        let mut spec = ArchitectureSpec {
            name: self.name().to_string(),
            input,
            layers,
            notes: Vec::new(),
        };
        spec.fit_pools()?;
        Ok(spec)
    }
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Architecture(format!("unknown architecture preset {s:?}")))
    }
}
