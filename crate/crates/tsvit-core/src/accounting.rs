//! Trainable-parameter accounting and a forward MAC estimator.
//!
//! Counts are exact integer enumerations of the parameter registry. The
//! MAC estimator is a closed-form order-of-magnitude figure: it covers the
//! linear maps and attention products only, leaving out softmax, norms and
//! activations (one MAC = one multiply-accumulate = two FLOPs).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{TsVit, TsVitConfig};

/// Exact parameter counts, grouped by path prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: u64,
    pub trainable: u64,
    /// (prefix, total, trainable), ordered by prefix.
    pub groups: Vec<(String, u64, u64)>,
}

impl ParamReport {
    /// Percentage trainable at full precision.
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.trainable as f64 / self.total as f64
    }

    /// Percentage rounded half-up to 2 decimals, computed in integers.
    pub fn percent_display(&self) -> String {
        display_percent(self.trainable, self.total)
    }

    /// Aligned text table: one row per group plus a total row.
    pub fn render_text(&self) -> String {
        let width = self
            .groups
            .iter()
            .map(|(p, _, _)| p.len())
            .chain(core::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut out = format!(
            "{:<width$}  {:>12}  {:>12}  {:>8}\n",
            "group", "trainable", "total", "percent"
        );
        for (prefix, total, trainable) in &self.groups {
            out += &format!(
                "{:<width$}  {:>12}  {:>12}  {:>8}\n",
                prefix,
                trainable,
                total,
                display_percent(*trainable, *total)
            );
        }
        out += &format!(
            "{:<width$}  {:>12}  {:>12}  {:>8}\n",
            "total",
            self.trainable,
            self.total,
            self.percent_display()
        );
        out
    }

    /// One CSV row: method, trainable, total, percent.
    pub fn render_csv_row(&self, method: &str) -> String {
        format!(
            "{method},{},{},{}",
            self.trainable,
            self.total,
            self.percent_display()
        )
    }
}

pub const CSV_HEADER: &str = "method,trainable,total,percent";

/// `100 * trainable / total` rounded half-up to 2 decimals, in pure
/// integer arithmetic so display never depends on float rounding.
fn display_percent(trainable: u64, total: u64) -> String {
    if total == 0 {
        return "0.00".into();
    }
    // Hundredths of a percent, half-up: floor((2*t*10000 + total) / (2*total)).
    let hundredths =
        (2 * trainable as u128 * 10_000 + total as u128) / (2 * total as u128);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Group key for a parameter path: the leading segment, except PEFT
/// parameters which keep two segments ("peft.lora", "peft.vpt", ...).
fn group_of(path: &str) -> &str {
    let mut dots = path.match_indices('.');
    let first = dots.next().map(|(i, _)| i).unwrap_or(path.len());
    if &path[..first] == "peft" {
        let second = dots.next().map(|(i, _)| i).unwrap_or(path.len());
        &path[..second]
    } else {
        &path[..first]
    }
}

/// Walk the registry and produce exact counts.
pub fn count_params(model: &TsVit) -> ParamReport {
    let mut groups: Vec<(String, u64, u64)> = Vec::new();
    let mut total = 0u64;
    let mut trainable = 0u64;
    for p in model.params.iter() {
        let n = p.tensor.numel() as u64;
        total += n;
        let tr = if p.trainable { n } else { 0 };
        trainable += tr;
        let key = group_of(&p.path);
        match groups.iter_mut().find(|(g, _, _)| g == key) {
            Some((_, gt, gtr)) => {
                *gt += n;
                *gtr += tr;
            }
            None => groups.push((String::from(key), n, tr)),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    ParamReport {
        total,
        trainable,
        groups,
    }
}

/// Forward multiply-accumulate counts for one input tile, split by stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub patch_embed: u64,
    pub temporal_linear: u64,
    pub temporal_attention: u64,
    pub spatial_linear: u64,
    pub spatial_attention: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.patch_embed
            + self.temporal_linear
            + self.temporal_attention
            + self.spatial_linear
            + self.spatial_attention
            + self.head
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }
}

/// Closed-form MAC estimate. Attached modules contribute their own linear
/// maps and any extra attention positions; freeze-only methods change
/// nothing here.
pub fn estimate_flops(model: &TsVit) -> FlopReport {
    estimate_flops_for(&model.cfg, model)
}

fn stage_macs(
    cfg: &TsVitConfig,
    model: &TsVit,
    batch: u64,
    seq_base: u64,
    depth: u64,
    temporal: bool,
) -> (u64, u64) {
    let d = cfg.d as u64;
    let md = (cfg.mlp_ratio * cfg.d) as u64;
    let prompt_len = match &model.peft.vpt {
        Some(v) if temporal => v.temporal_len as u64,
        Some(v) => v.spatial_len as u64,
        None => 0,
    };
    let external = model.peft.vpt.as_ref().map(|v| v.external).unwrap_or(false);
    let (seq, kv_extra, prompt_proj) = if prompt_len == 0 {
        (seq_base, 0, 0)
    } else if external {
        (seq_base + prompt_len, 0, 0)
    } else {
        (seq_base, prompt_len, prompt_len * d * 3 * d)
    };
    let lora_r = match &model.peft.lora {
        Some(l) if temporal => l.rt as u64,
        Some(l) => l.rs as u64,
        None => 0,
    };
    let adapter_dim = match &model.peft.adapter {
        Some(a) if temporal => a.dt as u64,
        Some(a) => a.ds as u64,
        None => 0,
    };
    let tokens = batch * seq;
    let mut linear_per_block = tokens * (d * 3 * d)      // qkv
        + tokens * d * d                                  // attention proj
        + tokens * 2 * d * md                             // mlp
        + prompt_proj;
    if lora_r > 0 {
        // Four wrapped linears: r*(d_in + d_out) extra MACs per token each.
        linear_per_block +=
            tokens * lora_r * ((d + 3 * d) + (d + d) + (d + md) + (md + d));
    }
    if adapter_dim > 0 {
        linear_per_block += tokens * 2 * d * adapter_dim;
    }
    // Scores q k^T plus the attention-weighted sum of v.
    let attn_per_block = 2 * batch * seq * (seq + kv_extra) * d;
    (depth * linear_per_block, depth * attn_per_block)
}

fn estimate_flops_for(cfg: &TsVitConfig, model: &TsVit) -> FlopReport {
    let (n, t, k) = (
        cfg.num_patches() as u64,
        cfg.t as u64,
        cfg.k as u64,
    );
    let (d, pd, p2) = (
        cfg.d as u64,
        cfg.patch_dim() as u64,
        (cfg.p * cfg.p) as u64,
    );
    let rr = model.peft.lora.as_ref().map(|l| l.rr as u64).unwrap_or(0);
    let mut patch_embed = n * t * pd * d;
    if rr > 0 {
        patch_embed += n * t * rr * (pd + d);
    }
    let (temporal_linear, temporal_attention) =
        stage_macs(cfg, model, n, k + t, cfg.l_t as u64, true);
    let (spatial_linear, spatial_attention) =
        stage_macs(cfg, model, k, n, cfg.l_s as u64, false);
    let mut head = k * n * d * p2;
    if rr > 0 {
        head += k * n * rr * (d + p2);
    }
    FlopReport {
        patch_embed,
        temporal_linear,
        temporal_attention,
        spatial_linear,
        spatial_attention,
        head,
    }
}
