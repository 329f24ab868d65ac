//! Architecture descriptions and their canonical text form.
//!
//! ```text
//! input channels=3 size=224
//! stage conv k=3 s=2 out=16
//! stage mbconv k=3 s=2 exp=1 out=16
//! head expand=320 classes=4 bias=0
//! ```

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::conv_output_size;
use crate::rf::RfState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageOp {
    /// Convolution, batchnorm, SiLU.
    Conv,
    /// Inverted bottleneck without squeeze-and-excitation.
    MbConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub op: StageOp,
    pub kernel: usize,
    /// Expansion ratio of an MBConv; ignored for plain convolutions.
    pub expansion: f64,
    pub out_channels: usize,
    pub stride: usize,
}

impl StageSpec {
    pub fn conv(kernel: usize, stride: usize, out_channels: usize) -> Self {
        StageSpec {
            op: StageOp::Conv,
            kernel,
            expansion: 1.0,
            out_channels,
            stride,
        }
    }

    pub fn mbconv(kernel: usize, stride: usize, expansion: f64, out_channels: usize) -> Self {
        StageSpec {
            op: StageOp::MbConv,
            kernel,
            expansion,
            out_channels,
            stride,
        }
    }

    /// Width of the expanded representation inside an MBConv.
    pub fn expanded_width(&self, in_channels: usize) -> usize {
        expanded_width(in_channels, self.expansion)
    }

    /// MBConv with ratio 1 has no expansion convolution.
    pub fn has_expand(&self) -> bool {
        self.op == StageOp::MbConv && self.expansion != 1.0
    }

    /// A stride-1 MBConv that keeps its width adds a centre-cropped shortcut.
    pub fn has_residual(&self, in_channels: usize) -> bool {
        self.op == StageOp::MbConv && self.stride == 1 && in_channels == self.out_channels
    }
}

/// `round(in_channels * expansion)`, at least 1.
pub fn expanded_width(in_channels: usize, expansion: f64) -> usize {
    ((in_channels as f64 * expansion).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    /// Width of the 1×1 expansion before pooling, if any.
    pub expand_channels: Option<usize>,
    pub num_classes: usize,
    pub classifier_bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub in_channels: usize,
    /// Input side length the architecture is declared for.
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

/// One row of the per-stage geometry table.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGeometry {
    pub op: StageOp,
    pub kernel: usize,
    pub expansion: Option<f64>,
    pub out_channels: usize,
    pub stride: usize,
    pub output_resolution: usize,
    pub rf: usize,
    pub accumulated_stride: usize,
}

pub const DEFAULT_HEAD_CHANNELS: usize = 320;

impl ArchSpec {
    /// The patch-proposal extractor: eight stages, 95-pixel field, stride 8.
    pub fn anchornet(num_classes: usize) -> Self {
        let stages = vec![
            StageSpec::conv(3, 2, 16),
            StageSpec::mbconv(3, 2, 1.0, 16),
            StageSpec::mbconv(3, 2, 3.0, 24),
            StageSpec::mbconv(3, 1, 4.0, 24),
            StageSpec::mbconv(3, 1, 4.0, 48),
            StageSpec::mbconv(3, 1, 2.0, 96),
            StageSpec::mbconv(3, 1, 1.5, 96),
            StageSpec::mbconv(3, 1, 1.5, 96),
        ];
        ArchSpec {
            in_channels: 3,
            input_size: 224,
            stages,
            head: HeadSpec {
                expand_channels: Some(DEFAULT_HEAD_CHANNELS),
                num_classes,
                classifier_bias: false,
            },
        }
    }

    /// Default downstream classifier for 95×95 inputs.
    pub fn downstream(num_classes: usize) -> Self {
        ArchSpec {
            in_channels: 3,
            input_size: 95,
            stages: vec![
                StageSpec::conv(3, 2, 8),
                StageSpec::conv(3, 1, 8),
                StageSpec::conv(3, 2, 16),
                StageSpec::conv(3, 1, 16),
                StageSpec::conv(3, 2, 32),
                StageSpec::conv(3, 1, 32),
            ],
            head: HeadSpec {
                expand_channels: None,
                num_classes,
                classifier_bias: true,
            },
        }
    }

    /// Small variant used for double-precision gradient checks.
    pub fn miniature(num_classes: usize) -> Self {
        ArchSpec {
            in_channels: 3,
            input_size: 15,
            stages: vec![
                StageSpec::conv(3, 2, 8),
                StageSpec::mbconv(3, 1, 2.0, 8),
                StageSpec::mbconv(3, 1, 1.5, 8),
            ],
            head: HeadSpec {
                expand_channels: Some(8),
                num_classes,
                classifier_bias: false,
            },
        }
    }

    /// Accumulated field of every spatial convolution in order; 1×1
    /// convolutions leave it unchanged and are omitted.
    pub fn rf_state(&self) -> Result<RfState> {
        let layers: Vec<(usize, usize)> = self.stages.iter().map(|s| (s.kernel, s.stride)).collect();
        RfState::from_layers(&layers)
    }

    pub fn feature_channels(&self) -> usize {
        self.head.expand_channels.unwrap_or_else(|| {
            self.stages
                .last()
                .map_or(self.in_channels, |s| s.out_channels)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.head.num_classes == 0 {
            return Err(Error::Invalid("channels and classes must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 || s.out_channels == 0 {
                return Err(Error::Invalid(format!("stage {i} has a zero dimension")));
            }
            if s.op == StageOp::MbConv && !(s.expansion.is_finite() && s.expansion > 0.0) {
                return Err(Error::Invalid(format!("stage {i} expansion {}", s.expansion)));
            }
        }
        if self.head.expand_channels == Some(0) {
            return Err(Error::Invalid("head expansion must be positive".into()));
        }
        Ok(())
    }

    /// Per-stage output resolution and accumulated field for a square input.
    pub fn geometry(&self, input_size: usize) -> Result<Vec<StageGeometry>> {
        let mut size = input_size;
        let mut rf = RfState::identity();
        let mut rows = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            size = conv_output_size(size, s.kernel, s.stride).map_err(|_| Error::RfConstraint {
                rf: rf.push_layer(s.kernel, s.stride).map_or(0, |r| r.rf()),
                height: input_size,
                width: input_size,
            })?;
            rf = rf.push_layer(s.kernel, s.stride)?;
            rows.push(StageGeometry {
                op: s.op,
                kernel: s.kernel,
                expansion: (s.op == StageOp::MbConv).then_some(s.expansion),
                out_channels: s.out_channels,
                stride: s.stride,
                output_resolution: size,
                rf: rf.rf(),
                accumulated_stride: rf.stride(),
            });
        }
        Ok(rows)
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

fn fmt_ratio(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "input channels={} size={}", self.in_channels, self.input_size)?;
        for s in &self.stages {
            match s.op {
                StageOp::Conv => writeln!(
                    out,
                    "stage conv k={} s={} out={}",
                    s.kernel, s.stride, s.out_channels
                )?,
                StageOp::MbConv => writeln!(
                    out,
                    "stage mbconv k={} s={} exp={} out={}",
                    s.kernel,
                    s.stride,
                    fmt_ratio(s.expansion),
                    s.out_channels
                )?,
            }
        }
        match self.head.expand_channels {
            Some(e) => write!(out, "head expand={e} ")?,
            None => write!(out, "head ")?,
        }
        writeln!(
            out,
            "classes={} bias={}",
            self.head.num_classes,
            u8::from(self.head.classifier_bias)
        )?;
        f.write_str(&out)
    }
}

fn parse_fields<'a>(
    line: &'a str,
    tokens: impl Iterator<Item = &'a str>,
) -> Result<Vec<(&'a str, &'a str)>> {
    tokens
        .map(|t| {
            t.split_once('=')
                .ok_or_else(|| Error::format("architecture", format!("bad field {t:?} in {line:?}")))
        })
        .collect()
}

fn field<V: FromStr>(fields: &[(&str, &str)], key: &str, line: &str) -> Result<V> {
    let raw = fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::format("architecture", format!("missing {key} in {line:?}")))?;
    raw.parse()
        .map_err(|_| Error::format("architecture", format!("bad value {raw:?} for {key}")))
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut stages = Vec::new();
        let mut head = None;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("input") => {
                    let f = parse_fields(line, tokens)?;
                    input = Some((field(&f, "channels", line)?, field(&f, "size", line)?));
                }
                Some("stage") => {
                    let kind = tokens.next().unwrap_or("");
                    let f = parse_fields(line, tokens)?;
                    let (k, s, out) = (field(&f, "k", line)?, field(&f, "s", line)?, field(&f, "out", line)?);
                    stages.push(match kind {
                        "conv" => StageSpec::conv(k, s, out),
                        "mbconv" => StageSpec::mbconv(k, s, field(&f, "exp", line)?, out),
                        other => {
                            return Err(Error::format(
                                "architecture",
                                format!("unknown stage kind {other:?}"),
                            ))
                        }
                    });
                }
                Some("head") => {
                    let f = parse_fields(line, tokens)?;
                    let expand = if f.iter().any(|(k, _)| *k == "expand") {
                        Some(field(&f, "expand", line)?)
                    } else {
                        None
                    };
                    head = Some(HeadSpec {
                        expand_channels: expand,
                        num_classes: field(&f, "classes", line)?,
                        classifier_bias: field::<u8>(&f, "bias", line)? != 0,
                    });
                }
                Some(other) => {
                    return Err(Error::format(
                        "architecture",
                        format!("unknown directive {other:?}"),
                    ))
                }
                None => {}
            }
        }
        let (in_channels, input_size) =
            input.ok_or_else(|| Error::format("architecture", "missing input line"))?;
        let spec = ArchSpec {
            in_channels,
            input_size,
            stages,
            head: head.ok_or_else(|| Error::format("architecture", "missing head line"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
