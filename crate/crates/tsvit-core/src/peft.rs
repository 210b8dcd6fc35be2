//! Parameter-efficient fine-tuning surgery.
//!
//! [`apply_peft`] freezes the whole base model, then runs exactly one
//! method's unfreeze/attach rule and returns a [`SurgeryReport`] that
//! partitions every parameter path into frozen / unfrozen / added.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::{
    AdapterAttach, AdapterPlacement, LoraAttach, Stage, TsVit, TsVitConfig, VptAttach,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which biases BitFit trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BiasSubset {
    /// Every parameter whose path ends in "bias".
    Full,
    /// Per block: the query slice of the qkv bias and the first MLP bias.
    Partial,
}

/// Which class tokens token tuning trains.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TokenMode {
    Full,
    Partial(Vec<usize>),
}

/// One tuning method. Exactly one is applied per surgery.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "method", rename_all = "snake_case"))]
pub enum PeftSpec {
    BitFit {
        subset: BiasSubset,
    },
    Vpt {
        temporal_len: usize,
        spatial_len: usize,
        external: bool,
        deep: bool,
    },
    Lora {
        rt: usize,
        rs: usize,
        rr: usize,
        /// Update scale numerator; the effective scale is alpha / rank.
        alpha: f32,
    },
    AdaptFormer {
        dt: usize,
        ds: usize,
        placement: AdapterPlacement,
        scale: f32,
    },
    HeadTune,
    TokenTune {
        mode: TokenMode,
    },
    FullFineTune,
    Scratch,
}

impl PeftSpec {
    pub fn name(&self) -> &'static str {
        match self {
            PeftSpec::BitFit { .. } => "bitfit",
            PeftSpec::Vpt { .. } => "vpt",
            PeftSpec::Lora { .. } => "lora",
            PeftSpec::AdaptFormer { .. } => "adaptformer",
            PeftSpec::HeadTune => "head_tune",
            PeftSpec::TokenTune { .. } => "token_tune",
            PeftSpec::FullFineTune => "full_fine_tune",
            PeftSpec::Scratch => "scratch",
        }
    }
}

/// Outcome of one surgery: which base parameters stayed frozen, which were
/// unfrozen, and which new parameters the method attached. The three path
/// lists partition the model's full parameter set.
#[derive(Debug, Clone)]
pub struct SurgeryReport {
    pub method: String,
    pub frozen: Vec<String>,
    pub unfrozen: Vec<String>,
    pub added: Vec<String>,
    pub trainable_count: u64,
    pub total_count: u64,
}

/// Every linear map the forward pass routes through [`Stage`]-ranked LoRA,
/// with its input/output widths.
fn lora_targets(cfg: &TsVitConfig) -> Vec<(String, usize, usize, Stage)> {
    let (d, md) = (cfg.d, cfg.mlp_ratio * cfg.d);
    let mut out = vec![(
        "embed.patch".to_string(),
        cfg.patch_dim(),
        d,
        Stage::Rest,
    )];
    for (stage_name, depth, stage) in [
        ("temporal", cfg.l_t, Stage::Temporal),
        ("spatial", cfg.l_s, Stage::Spatial),
    ] {
        for i in 0..depth {
            let pre = format!("{stage_name}.block{i}");
            out.push((format!("{pre}.attn.qkv"), d, 3 * d, stage));
            out.push((format!("{pre}.attn.proj"), d, d, stage));
            out.push((format!("{pre}.mlp.fc1"), d, md, stage));
            out.push((format!("{pre}.mlp.fc2"), md, d, stage));
        }
    }
    out.push(("head.out".to_string(), d, cfg.p * cfg.p, Stage::Rest));
    out
}

/// Paths BitFit unfreezes. `Full` is every bias in the model; `Partial`
/// keeps only the query bias and first MLP bias of each block plus the
/// head bias.
pub fn bitfit_rule(model: &TsVit, subset: BiasSubset) -> Vec<String> {
    match subset {
        BiasSubset::Full => model
            .params
            .paths()
            .filter(|p| p.ends_with("bias"))
            .map(String::from)
            .collect(),
        BiasSubset::Partial => {
            let mut out = Vec::new();
            for (stage, depth) in [("temporal", model.cfg.l_t), ("spatial", model.cfg.l_s)] {
                for i in 0..depth {
                    out.push(format!("{stage}.block{i}.attn.qkv.q_bias"));
                    out.push(format!("{stage}.block{i}.mlp.fc1.bias"));
                }
            }
            out.push("head.out.bias".to_string());
            out
        }
    }
}

/// Paths token tuning unfreezes: the chosen class tokens, nothing else.
pub fn token_tune_rule(model: &TsVit, mode: &TokenMode) -> Result<Vec<String>> {
    let k = model.cfg.k;
    let classes: Vec<usize> = match mode {
        TokenMode::Full => (0..k).collect(),
        TokenMode::Partial(list) => {
            if list.is_empty() {
                return Err(CoreError::InvalidSpec(
                    "token tuning with an empty class list".into(),
                ));
            }
            if let Some(&bad) = list.iter().find(|&&c| c >= k) {
                return Err(CoreError::InvalidSpec(format!(
                    "token tuning class {bad} out of range for K = {k}"
                )));
            }
            list.clone()
        }
    };
    Ok(classes
        .iter()
        .map(|c| format!("embed.class_token.{c}"))
        .collect())
}

/// Attach LoRA matrices to every covered linear map. A is random, B is
/// zero, so the update matrix starts at zero and the forward pass is
/// unchanged until training moves B.
pub fn add_lora(model: &mut TsVit, rt: usize, rs: usize, rr: usize, alpha: f32, rng: &mut Rng) -> Result<Vec<String>> {
    if model.peft.lora.is_some() {
        return Err(CoreError::InvalidSpec("LoRA already attached".into()));
    }
    let attach = LoraAttach { rt, rs, rr, alpha };
    let targets = lora_targets(&model.cfg);
    for &(ref prefix, d_in, d_out, stage) in &targets {
        let r = attach.rank_for(stage);
        if r > d_in.min(d_out) {
            return Err(CoreError::InvalidSpec(format!(
                "LoRA rank {r} exceeds min({d_in}, {d_out}) at `{prefix}`"
            )));
        }
    }
    let mut added = Vec::new();
    for (prefix, d_in, d_out, stage) in targets {
        let r = attach.rank_for(stage);
        if r == 0 {
            continue;
        }
        let a = format!("peft.lora.{prefix}.a");
        let b = format!("peft.lora.{prefix}.b");
        model.params.register(&a, Tensor::randn(&[r, d_in], 0.02, rng))?;
        model.params.register(&b, Tensor::zeros(&[d_out, r]))?;
        added.push(a);
        added.push(b);
    }
    model.peft.lora = Some(attach);
    Ok(added)
}

/// Fold every LoRA update into its base weight and drop the A/B matrices.
/// Returns false (a no-op) when no LoRA is attached.
pub fn merge_lora(model: &mut TsVit) -> Result<bool> {
    let Some(attach) = model.peft.lora.take() else {
        return Ok(false);
    };
    for (prefix, d_in, d_out, stage) in lora_targets(&model.cfg) {
        let r = attach.rank_for(stage);
        if r == 0 {
            continue;
        }
        let a = model
            .params
            .remove(&format!("peft.lora.{prefix}.a"))
            .ok_or_else(|| CoreError::Contract(format!("missing LoRA A at `{prefix}`")))?;
        let b = model
            .params
            .remove(&format!("peft.lora.{prefix}.b"))
            .ok_or_else(|| CoreError::Contract(format!("missing LoRA B at `{prefix}`")))?;
        let scale = attach.alpha / r as f32;
        let w = model
            .params
            .by_path_mut(&format!("{prefix}.weight"))
            .ok_or_else(|| CoreError::Contract(format!("missing weight at `{prefix}`")))?;
        // W (d_in, d_out) += scale * A^T B^T, i.e. W[i][o] += scale * sum_j A[j][i] B[o][j]
        let ad = a.tensor.data();
        let bd = b.tensor.data();
        let wd = w.tensor.data_mut();
        for i in 0..d_in {
            for o in 0..d_out {
                let mut acc = 0.0f64;
                for j in 0..r {
                    acc += ad[j * d_in + i] as f64 * bd[o * r + j] as f64;
                }
                wd[i * d_out + o] += scale * acc as f32;
            }
        }
    }
    Ok(true)
}

/// Attach a bottleneck adapter to every MLP sub-block: width `dt` in
/// temporal blocks, `ds` in spatial blocks. Zero-initialized up-projection
/// makes the attached model's forward identical to the base.
pub fn add_adaptformer(
    model: &mut TsVit,
    dt: usize,
    ds: usize,
    placement: AdapterPlacement,
    scale: f32,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    if dt == 0 && ds == 0 {
        return Err(CoreError::InvalidSpec(
            "adapter with both dimensions zero".into(),
        ));
    }
    if model.peft.adapter.is_some() {
        return Err(CoreError::InvalidSpec("adapter already attached".into()));
    }
    let d = model.cfg.d;
    let mut added = Vec::new();
    for (stage, depth, dim) in [("temporal", model.cfg.l_t, dt), ("spatial", model.cfg.l_s, ds)] {
        if dim == 0 {
            continue;
        }
        for i in 0..depth {
            let pre = format!("peft.adapter.{stage}.block{i}");
            for (name, tensor) in [
                (format!("{pre}.down.weight"), Tensor::xavier_uniform(d, dim, rng)),
                (format!("{pre}.down.bias"), Tensor::zeros(&[dim])),
                (format!("{pre}.up.weight"), Tensor::zeros(&[dim, d])),
                (format!("{pre}.up.bias"), Tensor::zeros(&[d])),
            ] {
                model.params.register(&name, tensor)?;
                added.push(name);
            }
        }
    }
    model.peft.adapter = Some(AdapterAttach {
        dt,
        ds,
        placement,
        scale,
    });
    Ok(added)
}

/// Attach learned prompt tokens: one set per transformer when shallow, one
/// set per block when deep. Prompts are N(0, 0.02)-initialized.
pub fn add_vpt(
    model: &mut TsVit,
    temporal_len: usize,
    spatial_len: usize,
    external: bool,
    deep: bool,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    if temporal_len == 0 && spatial_len == 0 {
        return Err(CoreError::InvalidSpec(
            "prompt tuning with both lengths zero".into(),
        ));
    }
    if model.peft.vpt.is_some() {
        return Err(CoreError::InvalidSpec("prompts already attached".into()));
    }
    let d = model.cfg.d;
    let mut added = Vec::new();
    for (stage, depth, len) in [
        ("temporal", model.cfg.l_t, temporal_len),
        ("spatial", model.cfg.l_s, spatial_len),
    ] {
        if len == 0 {
            continue;
        }
        let names: Vec<String> = if deep {
            (0..depth)
                .map(|i| format!("peft.vpt.{stage}.block{i}.prompt"))
                .collect()
        } else {
            vec![format!("peft.vpt.{stage}.prompt")]
        };
        for name in names {
            model
                .params
                .register(&name, Tensor::randn(&[len, d], 0.02, rng))?;
            added.push(name);
        }
    }
    model.peft.vpt = Some(VptAttach {
        temporal_len,
        spatial_len,
        external,
        deep,
    });
    Ok(added)
}

/// Freeze everything, then run one method's rule. `unfreeze_head` keeps
/// the segmentation head trainable alongside the method's own parameters;
/// it is ignored by FullFineTune/Scratch (everything trains) and by token
/// tuning (the head stays frozen so class tokens alone steer the output).
pub fn apply_peft(
    model: &mut TsVit,
    spec: &PeftSpec,
    unfreeze_head: bool,
    rng: &mut Rng,
) -> Result<SurgeryReport> {
    if !model.peft.is_empty() {
        return Err(CoreError::InvalidSpec(
            "model already carries an attached method".into(),
        ));
    }
    let base_paths: BTreeSet<String> = model.params.paths().map(String::from).collect();
    model.params.set_all_trainable(false);

    let mut added = Vec::new();
    match spec {
        PeftSpec::FullFineTune => model.params.set_all_trainable(true),
        PeftSpec::Scratch => {
            *model = TsVit::new(model.cfg.clone(), rng)?;
        }
        PeftSpec::HeadTune => {}
        PeftSpec::BitFit { subset } => {
            for path in bitfit_rule(model, *subset) {
                model.params.set_trainable(&path, true)?;
            }
        }
        PeftSpec::TokenTune { mode } => {
            for path in token_tune_rule(model, mode)? {
                model.params.set_trainable(&path, true)?;
            }
        }
        PeftSpec::Vpt {
            temporal_len,
            spatial_len,
            external,
            deep,
        } => {
            added = add_vpt(model, *temporal_len, *spatial_len, *external, *deep, rng)?;
        }
        PeftSpec::Lora { rt, rs, rr, alpha } => {
            added = add_lora(model, *rt, *rs, *rr, *alpha, rng)?;
        }
        PeftSpec::AdaptFormer {
            dt,
            ds,
            placement,
            scale,
        } => {
            added = add_adaptformer(model, *dt, *ds, *placement, *scale, rng)?;
        }
    }

    let head_unfrozen = unfreeze_head
        && !matches!(
            spec,
            PeftSpec::FullFineTune | PeftSpec::Scratch | PeftSpec::TokenTune { .. }
        );
    if head_unfrozen {
        let head_paths: Vec<String> = model
            .params
            .paths()
            .filter(|p| p.starts_with("head."))
            .map(String::from)
            .collect();
        for path in head_paths {
            model.params.set_trainable(&path, true)?;
        }
    }

    let added_set: BTreeSet<&str> = added.iter().map(String::as_str).collect();
    let mut frozen = Vec::new();
    let mut unfrozen = Vec::new();
    for p in model.params.iter() {
        if added_set.contains(p.path.as_str()) {
            continue;
        }
        if p.trainable {
            unfrozen.push(p.path.clone());
        } else {
            frozen.push(p.path.clone());
        }
    }
    // Scratch rebuilds the registry; everything it holds is still the base
    // parameter set, so the partition check below remains meaningful.
    debug_assert!(
        matches!(spec, PeftSpec::Scratch)
            || frozen.len() + unfrozen.len() == base_paths.len()
    );
    Ok(SurgeryReport {
        method: spec.name().to_string(),
        frozen,
        unfrozen,
        added,
        trainable_count: model.params.trainable_count(),
        total_count: model.params.total_count(),
    })
}
