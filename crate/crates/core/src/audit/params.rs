use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{millions, AuditError};
use crate::decoder::{DecoderConfig, Sharing, CLS_TOWER_DEPTH, REG_TOWER_DEPTH};
use crate::numerics::{Params, Scalar};
use crate::posenc::{CenternessVariant, ROI_CELLS};

/// Row name of the learnable initial proposal features.
pub const PROPOSALS_ROW: &str = "proposals";

/// Parameter groups of one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "MSA")]
    Msa,
    Dyn,
    Out,
    Head,
    /// FFN, layer norms and the positional-encoding heads.
    Others,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Msa, Group::Dyn, Group::Out, Group::Head, Group::Others];

    pub fn name(self) -> &'static str {
        match self {
            Group::Msa => "MSA",
            Group::Dyn => "Dyn",
            Group::Out => "Out",
            Group::Head => "Head",
            Group::Others => "Others",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    /// Parameter scope inside a stage, e.g. `self_attn.query`.
    pub layer: String,
    pub group: Group,
    pub params: u64,
}

/// Exact parameter counts of one decoder layer and of the whole decoder
/// under a sharing policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAudit {
    /// Layers of one stage weight set.
    pub rows: Vec<AuditRow>,
    /// Per-group sums over `rows`, in [`Group::ALL`] order.
    pub groups: Vec<(Group, u64)>,
    /// Parameters of one stage weight set.
    pub stage_total: u64,
    pub policy: Sharing,
    pub stage_count: usize,
    /// Distinct stage weight sets the policy instantiates.
    pub unique_stages: usize,
    /// `unique_stages × stage_total`.
    pub decoder_total: u64,
    /// Initial proposal features, outside every stage.
    pub proposals: u64,
}

/// Closed-form counts from the layer shapes of `cfg`.
pub fn count_params(cfg: &DecoderConfig) -> ParamAudit {
    let c = cfg.c as u64;
    let d = cfg.d as u64;
    let k = cfg.num_classes as u64;
    let f = cfg.ffn_dim as u64;
    let cells = ROI_CELLS as u64;
    let linear = |i: u64, o: u64| i * o + o;
    let norm = |n: u64| 2 * n;
    // Linear without bias followed by LayerNorm.
    let tower = |depth: usize| depth as u64 * (c * c + norm(c));

    let mut rows = Vec::new();
    let mut push = |layer: &str, group: Group, params: u64| {
        rows.push(AuditRow {
            layer: layer.to_string(),
            group,
            params,
        })
    };
    for name in ["query", "key", "value", "proj"] {
        push(&format!("self_attn.{name}"), Group::Msa, linear(c, c));
    }
    push("attn_norm", Group::Others, norm(c));
    push("dyn", Group::Dyn, linear(c, 2 * c * d));
    push("conv_norm1", Group::Others, norm(d));
    push("conv_norm2", Group::Others, norm(c));
    push("out", Group::Out, linear(cells * c, c));
    push("out_norm", Group::Others, norm(c));
    push("ffn", Group::Others, linear(c, f) + linear(f, c));
    push("ffn_norm", Group::Others, norm(c));
    push("cls_tower", Group::Head, tower(CLS_TOWER_DEPTH));
    push("classifier", Group::Head, linear(c, k));
    push("reg_tower", Group::Head, tower(REG_TOWER_DEPTH));
    push("regressor", Group::Head, linear(c, 4));
    if cfg.use_box_pe {
        push("box_pe", Group::Others, linear(2 * c, c) + linear(c, c));
        push("mlp_c", Group::Others, linear(c, c) + linear(c, c));
        push("mlp_s", Group::Others, linear(c, c / 4) + linear(c / 4, 2));
    }
    if cfg.use_centerness {
        match cfg.centerness_variant {
            CenternessVariant::Static => {}
            CenternessVariant::Learnable => push("centerness", Group::Others, cells),
            CenternessVariant::Adjust => push("centerness", Group::Others, linear(c, 2)),
        }
    }

    let groups: Vec<_> = Group::ALL
        .iter()
        .map(|&g| (g, rows.iter().filter(|r| r.group == g).map(|r| r.params).sum()))
        .collect();
    let stage_total = rows.iter().map(|r| r.params).sum();
    let unique_stages = cfg.unique_stages();
    ParamAudit {
        rows,
        groups,
        stage_total,
        policy: cfg.sharing,
        stage_count: cfg.n_stages,
        unique_stages,
        decoder_total: unique_stages as u64 * stage_total,
        proposals: cfg.num_proposals as u64 * c,
    }
}

impl ParamAudit {
    pub fn group(&self, g: Group) -> u64 {
        self.groups.iter().find(|(x, _)| *x == g).map_or(0, |(_, n)| *n)
    }

    pub fn row(&self, layer: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.layer == layer).map(|r| r.params)
    }

    /// Decoder stages plus the proposal features: every `decoder.` parameter.
    pub fn model_total(&self) -> u64 {
        self.decoder_total + self.proposals
    }

    /// Compares every row and total against the tensors a built decoder
    /// registered under `decoder.` in `params`.
    pub fn verify<T: Scalar>(&self, params: &Params<T>) -> Result<(), AuditError> {
        let mismatch = |what: String, closed: u64, actual: usize| {
            Err(AuditError::Mismatch(format!("{what}: closed form {closed}, model {actual}")))
        };
        for s in 0..self.unique_stages {
            let stage = format!("decoder.stage{s}.");
            for row in &self.rows {
                let actual = params.num_scalars_with_prefix(&format!("{stage}{}.", row.layer));
                if actual as u64 != row.params {
                    return mismatch(format!("stage{s}.{}", row.layer), row.params, actual);
                }
            }
            let actual = params.num_scalars_with_prefix(&stage);
            if actual as u64 != self.stage_total {
                return mismatch(format!("stage{s} total"), self.stage_total, actual);
            }
        }
        let extra = format!("decoder.stage{}.", self.unique_stages);
        if params.num_scalars_with_prefix(&extra) != 0 {
            return Err(AuditError::Mismatch(format!(
                "model has more than {} stage weight sets",
                self.unique_stages
            )));
        }
        let actual = params.num_scalars_with_prefix(&format!("decoder.{PROPOSALS_ROW}"));
        if actual as u64 != self.proposals {
            return mismatch(PROPOSALS_ROW.to_string(), self.proposals, actual);
        }
        let actual = params.num_scalars_with_prefix("decoder.");
        if actual as u64 != self.model_total() {
            return mismatch("decoder total".to_string(), self.model_total(), actual);
        }
        Ok(())
    }

    /// Aligned text table: layers of one stage, group sums, then totals.
    pub fn to_table(&self) -> String {
        let mut lines: Vec<(String, String, String, String)> = self
            .rows
            .iter()
            .map(|r| (r.layer.clone(), r.group.name().to_string(), r.params.to_string(), millions(r.params)))
            .collect();
        for (g, n) in &self.groups {
            lines.push((format!("[{}]", g.name()), g.name().to_string(), n.to_string(), millions(*n)));
        }
        lines.push(("[stage]".into(), "Total".into(), self.stage_total.to_string(), millions(self.stage_total)));
        let decoder = format!("[decoder {} x{}]", self.policy, self.unique_stages);
        lines.push((decoder, "Total".into(), self.decoder_total.to_string(), millions(self.decoder_total)));
        lines.push((PROPOSALS_ROW.into(), "Others".into(), self.proposals.to_string(), millions(self.proposals)));
        let header = ("layer".to_string(), "group".to_string(), "params".to_string(), "M".to_string());
        let w0 = lines.iter().map(|l| l.0.len()).chain([header.0.len()]).max().unwrap_or(0);
        let w1 = lines.iter().map(|l| l.1.len()).chain([header.1.len()]).max().unwrap_or(0);
        let w2 = lines.iter().map(|l| l.2.len()).chain([header.2.len()]).max().unwrap_or(0);
        let w3 = lines.iter().map(|l| l.3.len()).chain([header.3.len()]).max().unwrap_or(0);
        let mut out = String::new();
        for (a, b, c, d) in std::iter::once(&header).chain(&lines) {
            let _ = writeln!(out, "{a:<w0$}  {b:<w1$}  {c:>w2$}  {d:>w3$}");
        }
        out
    }

    /// CSV with columns `layer,group,params_exact,params_millions`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "group", "params_exact", "params_millions"])
            .expect("in-memory CSV write");
        let mut record = |layer: &str, group: &str, n: u64| {
            w.write_record([layer, group, &n.to_string(), &millions(n)])
                .expect("in-memory CSV write");
        };
        for r in &self.rows {
            record(&r.layer, r.group.name(), r.params);
        }
        for (g, n) in &self.groups {
            record(&format!("group.{}", g.name()), g.name(), *n);
        }
        record("stage_total", "Total", self.stage_total);
        record(&format!("decoder_total.{}", self.policy), "Total", self.decoder_total);
        record(PROPOSALS_ROW, "Others", self.proposals);
        let bytes = w.into_inner().expect("in-memory CSV flush");
        String::from_utf8(bytes).expect("CSV is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_groups() {
        let a = count_params(&DecoderConfig::paper_scale());
        assert_eq!(a.group(Group::Dyn), 256 * 2 * 256 * 64 + 2 * 256 * 64);
        assert_eq!(a.group(Group::Out), 49 * 256 * 256 + 256);
        assert_eq!(a.group(Group::Msa), 4 * (256 * 256 + 256));
        assert_eq!(millions(a.group(Group::Msa)), "0.3");
        assert_eq!(millions(a.group(Group::Head)), "0.3");
        assert_eq!(millions(a.stage_total), "13.2");
        let sum: u64 = a.groups.iter().map(|(_, n)| n).sum();
        assert_eq!(sum, a.stage_total);
    }

    #[test]
    fn pe_heads_are_extra_others_rows() {
        let base = count_params(&DecoderConfig::paper_scale());
        let pe = count_params(&DecoderConfig {
            use_box_pe: true,
            ..DecoderConfig::paper_scale()
        });
        for g in [Group::Msa, Group::Dyn, Group::Out, Group::Head] {
            assert_eq!(base.group(g), pe.group(g));
        }
        let heads = pe.row("box_pe").unwrap() + pe.row("mlp_c").unwrap() + pe.row("mlp_s").unwrap();
        assert_eq!(pe.group(Group::Others), base.group(Group::Others) + heads);
        assert!(base.row("box_pe").is_none());
    }

    #[test]
    fn csv_layout() {
        let csv = count_params(&DecoderConfig::paper_scale()).to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,group,params_exact,params_millions"));
        assert!(csv.contains("\ndyn,Dyn,8421376,8.4\n"));
        assert!(csv.contains("\nout,Out,3211520,3.2\n"));
    }
}
