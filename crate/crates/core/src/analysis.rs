//! Parameter and FLOP accounting.
//!
//! FLOPs are counted as multiply-accumulates of the affine layers only:
//! `tokens * in * out` per layer, with the split-attention MLP counted once
//! per image because it acts on the pooled vector. Shifts, norms,
//! activations, softmax and the attention reweighting are free.
//!
//! The layer walk here is written independently of the model's weight
//! layout so that the two can be checked against each other.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{FusionMode, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    /// `(height, width)` the FLOPs refer to; `None` for a params-only report.
    pub input_size: Option<(usize, usize)>,
    pub total_params: u64,
    pub total_flops: u64,
}

struct Walker {
    layers: Vec<LayerCost>,
    with_flops: bool,
}

impl Walker {
    fn affine(&mut self, name: String, cin: usize, cout: usize, tokens: usize) {
        let (cin, cout, tokens) = (cin as u64, cout as u64, tokens as u64);
        self.layers.push(LayerCost {
            name,
            params: cin * cout + cout,
            flops: if self.with_flops { tokens * cin * cout } else { 0 },
        });
    }

    fn norm(&mut self, name: String, c: usize) {
        self.layers.push(LayerCost {
            name,
            params: 2 * c as u64,
            flops: 0,
        });
    }
}

fn walk(cfg: &ModelConfig, input: Option<(usize, usize)>) -> Result<CostReport> {
    cfg.validate()?;
    let (height, width) = input.unwrap_or((cfg.total_stride(), cfg.total_stride()));
    let grids = cfg.stage_grids(width, height)?;
    let mut w = Walker {
        layers: Vec::new(),
        with_flops: input.is_some(),
    };
    let k = cfg.branch_count();
    let mut prev = cfg.in_channels;
    for (s, (stage, &(gw, gh))) in cfg.stages.iter().zip(&grids).enumerate() {
        let n = gw * gh;
        let c = stage.hidden_size;
        let p = stage.patch_size;
        w.affine(format!("stage{s}/embed"), p * p * prev, c, n);
        for b in 0..stage.num_blocks {
            let pre = format!("stage{s}/block{b}");
            w.norm(format!("{pre}/ln1"), c);
            w.affine(format!("{pre}/mlp1"), c, k * c, n);
            if cfg.fusion_mode == FusionMode::SplitAttention {
                let hidden = c / cfg.reduction;
                w.affine(format!("{pre}/sa/fc1"), c, hidden, 1);
                w.affine(format!("{pre}/sa/fc2"), hidden, k * c, 1);
            }
            w.affine(format!("{pre}/mlp2"), c, c, n);
            w.norm(format!("{pre}/ln2"), c);
            w.affine(format!("{pre}/cm/fc1"), c, cfg.expansion_ratio * c, n);
            w.affine(format!("{pre}/cm/fc2"), cfg.expansion_ratio * c, c, n);
        }
        prev = c;
    }
    w.norm("head/norm".into(), prev);
    w.affine("head/fc".into(), prev, cfg.num_classes, 1);

    let total_params = w.layers.iter().map(|l| l.params).sum();
    let total_flops = w.layers.iter().map(|l| l.flops).sum();
    Ok(CostReport {
        per_layer: w.layers,
        input_size: input,
        total_params,
        total_flops,
    })
}

/// Exact count of learnable scalars.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    walk(cfg, None)
}

/// Parameters and multiply-accumulates for a `height x width` input.
pub fn count_flops(cfg: &ModelConfig, input: (usize, usize)) -> Result<CostReport> {
    walk(cfg, Some(input))
}

fn millions(n: u64) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

fn billions(n: u64) -> String {
    format!("{:.2}B", n as f64 / 1e9)
}

impl CostReport {
    /// `(group, params, flops)` summed by the first path component
    /// (`stage0`, `stage1`, ..., `head`), in first-appearance order.
    pub fn per_stage(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for l in &self.per_layer {
            let group = l.name.split('/').next().unwrap_or(&l.name);
            match out.iter_mut().find(|(g, _, _)| g == group) {
                Some(e) => {
                    e.1 += l.params;
                    e.2 += l.flops;
                }
                None => out.push((group.to_owned(), l.params, l.flops)),
            }
        }
        out
    }

    /// `name<TAB>params<TAB>flops` per layer, then per stage, then `total`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for l in &self.per_layer {
            writeln!(s, "{}\t{}\t{}", l.name, l.params, l.flops).unwrap();
        }
        for (g, p, f) in self.per_stage() {
            writeln!(s, "{g}/*\t{p}\t{f}").unwrap();
        }
        writeln!(s, "total\t{}\t{}", self.total_params, self.total_flops).unwrap();
        s
    }

    /// Human-readable per-stage table with a totals line.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>14} {:>18}", "stage", "params", "flops (MAC)").unwrap();
        for (g, p, f) in self.per_stage() {
            writeln!(s, "{g:<10} {p:>14} {f:>18}").unwrap();
        }
        match self.input_size {
            Some((h, w)) => writeln!(
                s,
                "total      params {} ({})  flops {} ({}) at {h}x{w}",
                self.total_params,
                millions(self.total_params),
                self.total_flops,
                billions(self.total_flops)
            ),
            None => writeln!(
                s,
                "total      params {} ({})",
                self.total_params,
                millions(self.total_params)
            ),
        }
        .unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn tiny_counts_match_hand_enumeration() {
        // embed 48*8+8, block 826, head norm 16, head fc 8*10+10
        let cfg = Preset::Tiny.config();
        assert_eq!(count_params(&cfg).unwrap().total_params, 392 + 826 + 16 + 90);
        assert_eq!(count_params(&cfg).unwrap().total_params, 1324);
        // embed 4*48*8, mlp1 4*8*24, sa 8*2+2*24, mlp2 4*8*8, cm 2*4*8*24, head 8*10
        let r = count_flops(&cfg, (8, 8)).unwrap();
        assert_eq!(r.total_flops, 1536 + 768 + 64 + 256 + 1536 + 80);
        assert_eq!(r.total_flops, 4240);
    }

    #[test]
    fn totals_are_sums_of_layers() {
        let r = count_flops(&Preset::Small7.config(), (224, 224)).unwrap();
        assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.total_flops, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
        let stages = r.per_stage();
        assert_eq!(stages.iter().map(|s| s.0.as_str()).collect::<Vec<_>>(), ["stage0", "stage1", "head"]);
        assert_eq!(stages.iter().map(|s| s.1).sum::<u64>(), r.total_params);
    }

    #[test]
    fn partial_patches_are_not_counted() {
        let cfg = Preset::Small7.config();
        let exact = count_flops(&cfg, (224, 224)).unwrap().total_flops;
        assert_eq!(count_flops(&cfg, (230, 227)).unwrap().total_flops, exact);
        assert!(count_flops(&cfg, (13, 224)).is_err());
    }

    #[test]
    fn tsv_ends_with_total_line() {
        let r = count_flops(&Preset::Tiny.config(), (8, 8)).unwrap();
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().last().unwrap(), "total\t1324\t4240");
        assert!(tsv.lines().all(|l| l.split('\t').count() == 3));
    }
}
