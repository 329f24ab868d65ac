//! Forward-pass cost accounting: one multiply-accumulate counts as one FLOP,
//! pointwise operations (batchnorm, SiLU, shortcut add, pooling, softmax)
//! count one per element they touch.

use serde::Serialize;

use super::arch::{ArchSpec, StageOp};
use crate::error::{Error, Result};
use crate::ops::conv_output_size;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    /// Output `(channels, height, width)`.
    pub output: (usize, usize, usize),
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .map(|l| l.flops)
            .sum()
    }
}

/// Multiply-accumulates of one convolution.
pub fn conv_macs(
    out_positions: usize,
    out_channels: usize,
    in_per_group: usize,
    kernel: usize,
) -> u64 {
    (out_positions * out_channels * in_per_group * kernel * kernel) as u64
}

struct Walker {
    report: FlopReport,
    c: usize,
    h: usize,
    w: usize,
}

impl Walker {
    fn push(&mut self, name: String, flops: u64) {
        self.report.layers.push(LayerFlops {
            name,
            output: (self.c, self.h, self.w),
            flops,
        });
    }

    fn elems(&self) -> u64 {
        (self.c * self.h * self.w) as u64
    }

    fn conv(&mut self, name: &str, cout: usize, k: usize, s: usize, groups: usize, act: bool) -> Result<()> {
        let h = conv_output_size(self.h, k, s)?;
        let w = conv_output_size(self.w, k, s)?;
        let cin = self.c;
        self.c = cout;
        self.h = h;
        self.w = w;
        self.push(format!("{name}.conv"), conv_macs(h * w, cout, cin / groups, k));
        self.push(format!("{name}.bn"), self.elems());
        if act {
            self.push(format!("{name}.silu"), self.elems());
        }
        Ok(())
    }
}

/// Per-layer forward cost of `spec` on an `input = (H, W)` image.
pub fn count_flops(spec: &ArchSpec, input: (usize, usize)) -> Result<FlopReport> {
    spec.validate()?;
    let rf = spec.rf_state()?;
    if rf.rf() > input.0.min(input.1) {
        return Err(Error::RfConstraint {
            rf: rf.rf(),
            height: input.0,
            width: input.1,
        });
    }
    let mut wk = Walker {
        report: FlopReport::default(),
        c: spec.in_channels,
        h: input.0,
        w: input.1,
    };
    for (i, s) in spec.stages.iter().enumerate() {
        let p = format!("stage{i}");
        match s.op {
            StageOp::Conv => wk.conv(&p, s.out_channels, s.kernel, s.stride, 1, true)?,
            StageOp::MbConv => {
                let cin = wk.c;
                let mid = if s.has_expand() { s.expanded_width(cin) } else { cin };
                if s.has_expand() {
                    wk.conv(&format!("{p}.expand"), mid, 1, 1, 1, true)?;
                }
                wk.conv(&format!("{p}.depthwise"), mid, s.kernel, s.stride, mid, true)?;
                wk.conv(&format!("{p}.project"), s.out_channels, 1, 1, 1, false)?;
                if s.has_residual(cin) {
                    let e = wk.elems();
                    wk.push(format!("{p}.residual"), e);
                }
            }
        }
    }
    if let Some(e) = spec.head.expand_channels {
        wk.conv("head", e, 1, 1, 1, true)?;
    }
    let pooled = wk.elems();
    wk.h = 1;
    wk.w = 1;
    wk.push("gap".into(), pooled);
    let features = wk.c;
    let classes = spec.head.num_classes;
    wk.c = classes;
    wk.push("classifier".into(), (features * classes) as u64);
    wk.push("softmax".into(), classes as u64);
    Ok(wk.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::{HeadSpec, StageSpec};

    fn single(stage: StageSpec, cin: usize) -> ArchSpec {
        ArchSpec {
            in_channels: cin,
            input_size: 224,
            stages: vec![stage],
            head: HeadSpec {
                expand_channels: None,
                num_classes: 2,
                classifier_bias: false,
            },
        }
    }

    #[test]
    fn pointwise_conv_cost() {
        let r = count_flops(&single(StageSpec::conv(1, 1, 1), 1), (10, 10)).unwrap();
        assert_eq!(r.layers[0].flops, 100);
    }

    #[test]
    fn first_row_cost() {
        let r = count_flops(&single(StageSpec::conv(3, 2, 16), 3), (224, 224)).unwrap();
        assert_eq!(r.layers[0].name, "stage0.conv");
        assert_eq!(r.layers[0].flops, 5_322_672);
        assert_eq!(r.layers[0].output, (16, 111, 111));
    }

    #[test]
    fn default_total_near_sixty_million() {
        let r = count_flops(&ArchSpec::anchornet(1000), (224, 224)).unwrap();
        let t = r.total();
        assert!((45_000_000..=75_000_000).contains(&t), "total {t}");
    }

    #[test]
    fn undersized_input_errors() {
        assert!(count_flops(&ArchSpec::anchornet(4), (90, 224)).is_err());
    }
}
