//! Text tables for the command line.

use crate::error::Result;
use crate::model::{count_flops, ArchSpec, StageOp};

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:>w$}"))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Per-stage output resolution, kernel, accumulated field and stride.
///
/// Columns: `OR k RF S op exp out s`.
pub fn rf_table(spec: &ArchSpec, csv: bool) -> Result<String> {
    let header = ["OR", "k", "RF", "S", "op", "exp", "out", "s"];
    let mut rows = vec![header.iter().map(|h| h.to_string()).collect::<Vec<_>>()];
    for g in spec.geometry(spec.input_size)? {
        let op = match g.op {
            StageOp::Conv => "conv",
            StageOp::MbConv => "mbconv",
        };
        let exp = g.expansion.map_or("-".to_string(), |e| e.to_string());
        rows.push(vec![
            g.output_resolution.to_string(),
            format!("{0}x{0}", g.kernel),
            g.rf.to_string(),
            g.accumulated_stride.to_string(),
            op.to_string(),
            exp,
            g.out_channels.to_string(),
            g.stride.to_string(),
        ]);
    }
    if csv {
        return Ok(rows.iter().map(|r| r.join(",") + "\n").collect());
    }
    Ok(align(&rows))
}

/// Per-layer counts followed by the total.
pub fn flops_table(spec: &ArchSpec, input: usize) -> Result<String> {
    let report = count_flops(spec, (input, input))?;
    let mut rows = vec![vec!["layer".to_string(), "output".into(), "flops".into()]];
    for l in &report.layers {
        let (c, h, w) = l.output;
        rows.push(vec![l.name.clone(), format!("{c}x{h}x{w}"), l.flops.to_string()]);
    }
    let mut out = align(&rows);
    out.push_str(&format!("total {}\n", report.total()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_row_reads_naturally() {
        let t = rf_table(&ArchSpec::anchornet(1000), false).unwrap();
        assert!(t.lines().last().unwrap().contains("17  3x3  95"), "{t}");
        let first = t.lines().nth(1).unwrap();
        assert!(first.starts_with("111  3x3   3"), "{first}");
    }
}
