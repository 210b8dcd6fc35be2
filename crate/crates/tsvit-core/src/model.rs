//! The temporal-spatial vision transformer.
//!
//! A tile of shape (T, H, W, C) is cut into non-overlapping P x P patches,
//! each patch's time series is encoded by a temporal transformer that
//! prepends K learned class tokens, and the resulting per-class token maps
//! are mixed by a spatial transformer before a shared linear head projects
//! every (class, location) token back to P x P logits.
//!
//! PEFT modules (LoRA, adapters, prompts) attach to the forward pass via
//! [`PeftAttachments`]; surgery that installs them lives in [`crate::peft`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DAYS_PER_YEAR: usize = 366;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TsVitConfig {
    /// Timesteps per tile.
    pub t: usize,
    /// Tile height and width in pixels.
    pub h: usize,
    pub w: usize,
    /// Input channels.
    pub c: usize,
    /// Output classes.
    pub k: usize,
    /// Patch side length.
    pub p: usize,
    /// Embedding width.
    pub d: usize,
    /// Temporal / spatial encoder depths.
    pub l_t: usize,
    pub l_s: usize,
    /// Attention heads.
    pub heads: usize,
    /// MLP hidden multiplier.
    pub mlp_ratio: usize,
}

/// Fixed reference configuration used by all accounting checks.
pub const REFERENCE_CONFIG_R: TsVitConfig = TsVitConfig {
    t: 9,
    h: 24,
    w: 24,
    c: 10,
    k: 2,
    p: 3,
    d: 128,
    l_t: 4,
    l_s: 4,
    heads: 4,
    mlp_ratio: 4,
};

impl TsVitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h % self.p != 0 || self.w % self.p != 0 {
            return Err(CoreError::Contract(format!(
                "tile {}x{} not divisible by patch size {}",
                self.h, self.w, self.p
            )));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::Contract(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.k < 2 {
            return Err(CoreError::Contract("need at least 2 classes".into()));
        }
        if self.l_t < 1 || self.l_s < 1 {
            return Err(CoreError::Contract("encoder depths must be >= 1".into()));
        }
        if self.t == 0 || self.c == 0 || self.d == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::Contract("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// Number of patch locations.
    pub fn num_patches(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    /// Raw patch feature size P*P*C.
    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }
}

/// A K=27 variant of the reference config (Munich-style class count).
pub fn munich_variant() -> TsVitConfig {
    TsVitConfig {
        k: 27,
        ..REFERENCE_CONFIG_R
    }
}

// ---------------------------------------------------------------------
// PEFT attachments
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdapterPlacement {
    Series,
    Parallel,
}

#[derive(Debug, Clone)]
pub struct LoraAttach {
    pub rt: usize,
    pub rs: usize,
    pub rr: usize,
    pub alpha: f32,
}

#[derive(Debug, Clone)]
pub struct AdapterAttach {
    pub dt: usize,
    pub ds: usize,
    pub placement: AdapterPlacement,
    pub scale: f32,
}

#[derive(Debug, Clone)]
pub struct VptAttach {
    pub temporal_len: usize,
    pub spatial_len: usize,
    pub external: bool,
    pub deep: bool,
}

/// Modules attached by PEFT surgery, consulted by the forward pass.
#[derive(Debug, Clone, Default)]
pub struct PeftAttachments {
    pub lora: Option<LoraAttach>,
    pub adapter: Option<AdapterAttach>,
    pub vpt: Option<VptAttach>,
}

impl PeftAttachments {
    pub fn is_empty(&self) -> bool {
        self.lora.is_none() && self.adapter.is_none() && self.vpt.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Temporal,
    Spatial,
    /// Patch projection and head ("rest" in LoRA terms).
    Rest,
}

impl LoraAttach {
    pub fn rank_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::Temporal => self.rt,
            Stage::Spatial => self.rs,
            Stage::Rest => self.rr,
        }
    }
}

// ---------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------

/// TSViT model: config, parameter registry and attached PEFT modules.
#[derive(Debug, Clone)]
pub struct TsVit {
    pub cfg: TsVitConfig,
    pub params: ParamSet,
    pub peft: PeftAttachments,
}

impl TsVit {
    /// Fresh model: Xavier-uniform weights, zero biases, N(0, 0.02) tokens
    /// and position/day embeddings.
    pub fn new(cfg: TsVitConfig, rng: &mut Rng) -> Result<TsVit> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let d = cfg.d;
        let pd = cfg.patch_dim();
        let md = cfg.mlp_ratio * d;

        params.register("embed.patch.weight", Tensor::xavier_uniform(pd, d, rng))?;
        params.register("embed.patch.bias", Tensor::zeros(&[d]))?;
        params.register("embed.day.table", Tensor::randn(&[DAYS_PER_YEAR, d], 0.02, rng))?;
        for k in 0..cfg.k {
            params.register(
                &format!("embed.class_token.{k}"),
                Tensor::randn(&[d], 0.02, rng),
            )?;
        }
        for stage in ["temporal", "spatial"] {
            let depth = if stage == "temporal" { cfg.l_t } else { cfg.l_s };
            for i in 0..depth {
                let pre = format!("{stage}.block{i}");
                params.register(&format!("{pre}.norm1.scale"), Tensor::full(&[d], 1.0))?;
                params.register(&format!("{pre}.norm1.bias"), Tensor::zeros(&[d]))?;
                params.register(
                    &format!("{pre}.attn.qkv.weight"),
                    Tensor::xavier_uniform(d, 3 * d, rng),
                )?;
                params.register(&format!("{pre}.attn.qkv.q_bias"), Tensor::zeros(&[d]))?;
                params.register(&format!("{pre}.attn.qkv.k_bias"), Tensor::zeros(&[d]))?;
                params.register(&format!("{pre}.attn.qkv.v_bias"), Tensor::zeros(&[d]))?;
                params.register(
                    &format!("{pre}.attn.proj.weight"),
                    Tensor::xavier_uniform(d, d, rng),
                )?;
                params.register(&format!("{pre}.attn.proj.bias"), Tensor::zeros(&[d]))?;
                params.register(&format!("{pre}.norm2.scale"), Tensor::full(&[d], 1.0))?;
                params.register(&format!("{pre}.norm2.bias"), Tensor::zeros(&[d]))?;
                params.register(
                    &format!("{pre}.mlp.fc1.weight"),
                    Tensor::xavier_uniform(d, md, rng),
                )?;
                params.register(&format!("{pre}.mlp.fc1.bias"), Tensor::zeros(&[md]))?;
                params.register(
                    &format!("{pre}.mlp.fc2.weight"),
                    Tensor::xavier_uniform(md, d, rng),
                )?;
                params.register(&format!("{pre}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
            }
        }
        params.register(
            "spatial.pos",
            Tensor::randn(&[cfg.num_patches(), d], 0.02, rng),
        )?;
        params.register("head.norm.scale", Tensor::full(&[d], 1.0))?;
        params.register("head.norm.bias", Tensor::zeros(&[d]))?;
        params.register(
            "head.out.weight",
            Tensor::xavier_uniform(d, cfg.p * cfg.p, rng),
        )?;
        params.register("head.out.bias", Tensor::zeros(&[cfg.p * cfg.p]))?;

        Ok(TsVit {
            cfg,
            params,
            peft: PeftAttachments::default(),
        })
    }

    /// After `graph.backward`, pull leaf gradients into the registry.
    pub fn accumulate_grads(&mut self, graph: &Graph, leaves: &[(usize, Var)]) -> Result<()> {
        for &(id, var) in leaves {
            if self.params.get(id).trainable {
                if let Some(grad) = graph.grad_tensor(var) {
                    self.params.accumulate_grad(id, &grad)?;
                }
            }
        }
        Ok(())
    }
}

/// Cut a tile into non-overlapping patches, row-major patch order.
/// Returns raw tokens of shape (N, T, P*P*C).
pub fn patchify_raw(cfg: &TsVitConfig, tile: &Tensor) -> Result<Tensor> {
    let (t, h, w, c, p) = (cfg.t, cfg.h, cfg.w, cfg.c, cfg.p);
    if tile.shape() != [t, h, w, c] {
        return Err(CoreError::Contract(format!(
            "tile shape {:?} does not match config ({t}, {h}, {w}, {c})",
            tile.shape()
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let n = hp * wp;
    let pd = p * p * c;
    let data = tile.data();
    let mut out = vec![0.0f32; n * t * pd];
    for ph in 0..hp {
        for pw in 0..wp {
            let patch = ph * wp + pw;
            for ti in 0..t {
                let dst = (patch * t + ti) * pd;
                for i in 0..p {
                    let row = ph * p + i;
                    let src = ((ti * h + row) * w + pw * p) * c;
                    out[dst + i * p * c..dst + (i + 1) * p * c]
                        .copy_from_slice(&data[src..src + p * c]);
                }
            }
        }
    }
    Tensor::new(&[n, t, pd], out)
}

/// One forward pass being built on a graph. Parameters enter the tape as
/// leaves exactly once and are remembered so gradients can be pulled back
/// into the registry afterwards.
pub struct Forward<'m> {
    model: &'m TsVit,
    pub graph: Graph,
    leaves: Vec<(usize, Var)>,
    cache: BTreeMap<usize, Var>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m TsVit) -> Self {
        Forward {
            model,
            graph: Graph::new(),
            leaves: Vec::new(),
            cache: BTreeMap::new(),
        }
    }

    /// Forward pass with f64 accumulation (for the finite-difference oracle).
    pub fn precise(model: &'m TsVit) -> Self {
        Forward {
            model,
            graph: Graph::precise(),
            leaves: Vec::new(),
            cache: BTreeMap::new(),
        }
    }

    /// Surrender the tape and the touched-parameter list.
    pub fn finish(self) -> (Graph, Vec<(usize, Var)>) {
        (self.graph, self.leaves)
    }

    /// (param id, tape var) pairs for every parameter the pass touched.
    pub fn leaves(&self) -> &[(usize, Var)] {
        &self.leaves
    }

    pub fn into_leaves(self) -> Vec<(usize, Var)> {
        self.leaves
    }

    fn param(&mut self, path: &str) -> Result<Var> {
        let id = self.model.params.id_of(path).ok_or_else(|| {
            CoreError::Contract(format!("missing parameter `{path}`"))
        })?;
        if let Some(&v) = self.cache.get(&id) {
            return Ok(v);
        }
        let p = self.model.params.get(id);
        let v = self.graph.leaf(p.tensor.clone(), p.trainable)?;
        self.cache.insert(id, v);
        self.leaves.push((id, v));
        Ok(v)
    }

    /// Linear layer `x @ W (+ bias)`, with a LoRA bypass when one is
    /// attached to this weight. `x` is (M, d_in).
    fn linear(&mut self, x: Var, prefix: &str, bias_parts: &[&str], stage: Stage) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let mut y = self.graph.matmul(x, w)?;
        if !bias_parts.is_empty() {
            let parts: Vec<Var> = bias_parts
                .iter()
                .map(|b| self.param(&format!("{prefix}.{b}")))
                .collect::<Result<_>>()?;
            let bias = if parts.len() == 1 {
                parts[0]
            } else {
                self.graph.concat(&parts, 0)?
            };
            y = self.graph.add(y, bias)?;
        }
        if let Some(lora) = &self.model.peft.lora {
            let r = lora.rank_for(stage);
            if r > 0 {
                // A is (r, d_in), B is (d_out, r); update = scale * x A^T B^T.
                let scale = lora.alpha / r as f32;
                let a = self.param(&format!("peft.lora.{prefix}.a"))?;
                let b = self.param(&format!("peft.lora.{prefix}.b"))?;
                let a_t = self.graph.permute(a, &[1, 0])?;
                let xa = self.graph.matmul(x, a_t)?;
                let b_t = self.graph.permute(b, &[1, 0])?;
                let mut delta = self.graph.matmul(xa, b_t)?;
                delta = self.graph.scale(delta, scale)?;
                y = self.graph.add(y, delta)?;
            }
        }
        Ok(y)
    }

    /// Raw patches projected to width d, with the day-of-year embedding of
    /// each acquisition added per timestep. Output (N, T, d).
    pub fn embed_patches(&mut self, tile: &Tensor, times: &[u16]) -> Result<Var> {
        let cfg = &self.model.cfg;
        if times.len() != cfg.t {
            return Err(CoreError::Contract(format!(
                "{} acquisition days for T = {}",
                times.len(),
                cfg.t
            )));
        }
        if let Some(&bad) = times.iter().find(|&&d| d < 1 || d as usize > DAYS_PER_YEAR) {
            return Err(CoreError::Contract(format!(
                "day-of-year {bad} outside [1, {DAYS_PER_YEAR}]"
            )));
        }
        let raw = patchify_raw(cfg, tile)?;
        let (n, t, pd) = (cfg.num_patches(), cfg.t, cfg.patch_dim());
        let raw = self.graph.constant(raw.reshaped(&[n * t, pd])?)?;
        let proj = self.linear(raw, "embed.patch", &["bias"], Stage::Rest)?;
        let proj = self.graph.reshape(proj, &[n, t, cfg.d])?;
        let table = self.param("embed.day.table")?;
        let idx: Vec<usize> = times.iter().map(|&d| d as usize - 1).collect();
        let day = self.graph.gather(table, &idx)?; // (T, d)
        self.graph.add(proj, day)
    }

    /// Pre-norm transformer encoder block over (B, S, d) token batches.
    /// `internal_prompt` adds extra key/value positions from a learned
    /// prompt without growing the output sequence.
    fn block(
        &mut self,
        x: Var,
        prefix: &str,
        stage: Stage,
        internal_prompt: Option<&str>,
    ) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (d, heads) = (cfg.d, cfg.heads);
        let hd = d / heads;
        let shape = self.graph.shape(x).to_vec();
        let (b, s) = (shape[0], shape[1]);

        // Attention sub-block.
        let n1s = self.param(&format!("{prefix}.norm1.scale"))?;
        let n1b = self.param(&format!("{prefix}.norm1.bias"))?;
        let h = self.graph.layer_norm(x, n1s, n1b, 1e-5)?;
        let flat = self.graph.reshape(h, &[b * s, d])?;
        let qkv = self.linear(
            flat,
            &format!("{prefix}.attn.qkv"),
            &["q_bias", "k_bias", "v_bias"],
            stage,
        )?;
        let qkv = self.graph.reshape(qkv, &[b, s, 3 * d])?;
        let q = self.graph.slice(qkv, 2, 0, d)?;
        let mut k = self.graph.slice(qkv, 2, d, d)?;
        let mut v = self.graph.slice(qkv, 2, 2 * d, d)?;
        let mut s_kv = s;
        if let Some(prompt_path) = internal_prompt {
            let prompt = self.param(prompt_path)?;
            let len = self.graph.shape(prompt)[0];
            let pqkv = self.linear(
                prompt,
                &format!("{prefix}.attn.qkv"),
                &["q_bias", "k_bias", "v_bias"],
                stage,
            )?;
            let pk = self.graph.slice(pqkv, 1, d, d)?;
            let pv = self.graph.slice(pqkv, 1, 2 * d, d)?;
            let pk = self.graph.repeat(pk, b)?;
            let pv = self.graph.repeat(pv, b)?;
            k = self.graph.concat(&[k, pk], 1)?;
            v = self.graph.concat(&[v, pv], 1)?;
            s_kv += len;
        }
        let q = self.graph.reshape(q, &[b, s, heads, hd])?;
        let q = self.graph.permute(q, &[0, 2, 1, 3])?; // (b, heads, s, hd)
        let k = self.graph.reshape(k, &[b, s_kv, heads, hd])?;
        let k_t = self.graph.permute(k, &[0, 2, 3, 1])?; // (b, heads, hd, s_kv)
        let v = self.graph.reshape(v, &[b, s_kv, heads, hd])?;
        let v = self.graph.permute(v, &[0, 2, 1, 3])?;
        let scores = self.graph.matmul(q, k_t)?;
        let scores = self.graph.scale(scores, 1.0 / libm::sqrtf(hd as f32))?;
        let attn = self.graph.softmax(scores)?;
        let ctx = self.graph.matmul(attn, v)?; // (b, heads, s, hd)
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[b * s, d])?;
        let proj = self.linear(ctx, &format!("{prefix}.attn.proj"), &["bias"], stage)?;
        let proj = self.graph.reshape(proj, &[b, s, d])?;
        let x = self.graph.add(x, proj)?;

        // MLP sub-block, with an optional adapter on it.
        let n2s = self.param(&format!("{prefix}.norm2.scale"))?;
        let n2b = self.param(&format!("{prefix}.norm2.bias"))?;
        let h2 = self.graph.layer_norm(x, n2s, n2b, 1e-5)?;
        let h2_flat = self.graph.reshape(h2, &[b * s, d])?;
        let fc1 = self.linear(h2_flat, &format!("{prefix}.mlp.fc1"), &["bias"], stage)?;
        let act = self.graph.gelu(fc1)?;
        let mut mlp = self.linear(act, &format!("{prefix}.mlp.fc2"), &["bias"], stage)?;

        if let Some(adapter) = &self.model.peft.adapter {
            let dim = match stage {
                Stage::Temporal => adapter.dt,
                Stage::Spatial => adapter.ds,
                Stage::Rest => 0,
            };
            if dim > 0 {
                let apre = format!("peft.adapter.{prefix}");
                let input = match adapter.placement {
                    AdapterPlacement::Parallel => h2_flat,
                    AdapterPlacement::Series => mlp,
                };
                let down = self.linear(input, &format!("{apre}.down"), &["bias"], stage)?;
                let act = self.graph.gelu(down)?;
                let up = self.linear(act, &format!("{apre}.up"), &["bias"], stage)?;
                let up = self.graph.scale(up, adapter.scale)?;
                mlp = self.graph.add(mlp, up)?;
            }
        }
        let mlp = self.graph.reshape(mlp, &[b, s, d])?;
        self.graph.add(x, mlp)
    }

    /// Run one encoder stack over (B, S, d), handling external prompts:
    /// shallow prompts are appended once and stripped at exit, deep prompts
    /// are replaced per block.
    fn encode(&mut self, mut x: Var, stage: Stage) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (stage_name, depth) = match stage {
            Stage::Temporal => ("temporal", cfg.l_t),
            Stage::Spatial => ("spatial", cfg.l_s),
            Stage::Rest => unreachable!("no encoder for the rest stage"),
        };
        let shape = self.graph.shape(x).to_vec();
        let (b, s_base) = (shape[0], shape[1]);

        let vpt = self.model.peft.vpt.clone();
        let prompt_len = match (&vpt, stage) {
            (Some(v), Stage::Temporal) => v.temporal_len,
            (Some(v), Stage::Spatial) => v.spatial_len,
            _ => 0,
        };
        let external = vpt.as_ref().map(|v| v.external).unwrap_or(false);
        let deep = vpt.as_ref().map(|v| v.deep).unwrap_or(false);

        let prompt_path = |block: Option<usize>| -> String {
            match block {
                Some(i) => format!("peft.vpt.{stage_name}.block{i}.prompt"),
                None => format!("peft.vpt.{stage_name}.prompt"),
            }
        };

        if prompt_len > 0 && external && !deep {
            let p = self.param(&prompt_path(None))?;
            let p = self.graph.repeat(p, b)?;
            x = self.graph.concat(&[x, p], 1)?;
        }
        for i in 0..depth {
            let prefix = format!("{stage_name}.block{i}");
            if prompt_len > 0 && external && deep {
                // Fresh prompts per block; previous prompt outputs discarded.
                if i > 0 {
                    x = self.graph.slice(x, 1, 0, s_base)?;
                }
                let p = self.param(&prompt_path(Some(i)))?;
                let p = self.graph.repeat(p, b)?;
                x = self.graph.concat(&[x, p], 1)?;
            }
            let internal = if prompt_len > 0 && !external {
                Some(prompt_path(if deep { Some(i) } else { None }))
            } else {
                None
            };
            x = self.block(x, &prefix, stage, internal.as_deref())?;
        }
        if prompt_len > 0 && external {
            x = self.graph.slice(x, 1, 0, s_base)?;
        }
        Ok(x)
    }

    /// Temporal transformer: per location, prepend the K class tokens, run
    /// the temporal stack over length K+T, keep the class positions.
    /// (N, T, d) -> (N, K, d).
    pub fn temporal_encode(&mut self, tokens: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (n, k, d) = (cfg.num_patches(), cfg.k, cfg.d);
        if self.graph.shape(tokens) != [n, cfg.t, d] {
            return Err(CoreError::Contract(format!(
                "temporal_encode: expected ({n}, {}, {d}), got {:?}",
                cfg.t,
                self.graph.shape(tokens)
            )));
        }
        let cls: Vec<Var> = (0..k)
            .map(|i| {
                let v = self.param(&format!("embed.class_token.{i}"))?;
                self.graph.reshape(v, &[1, d])
            })
            .collect::<Result<_>>()?;
        let cls = self.graph.concat(&cls, 0)?; // (K, d)
        let cls = self.graph.repeat(cls, n)?; // (N, K, d)
        let x = self.graph.concat(&[cls, tokens], 1)?; // (N, K+T, d)
        let x = self.encode(x, Stage::Temporal)?;
        self.graph.slice(x, 1, 0, k)
    }

    /// Spatial transformer: per class, add position embeddings over the N
    /// locations and run the spatial stack. (N, K, d) -> (K, N, d).
    pub fn spatial_encode(&mut self, class_maps: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (n, k, d) = (cfg.num_patches(), cfg.k, cfg.d);
        if self.graph.shape(class_maps) != [n, k, d] {
            return Err(CoreError::Contract(format!(
                "spatial_encode: expected ({n}, {k}, {d}), got {:?}",
                self.graph.shape(class_maps)
            )));
        }
        let x = self.graph.permute(class_maps, &[1, 0, 2])?; // (K, N, d)
        let pos = self.param("spatial.pos")?;
        let x = self.graph.add(x, pos)?;
        self.encode(x, Stage::Spatial)
    }

    /// Segmentation head: layer-norm, shared linear d -> P*P per
    /// (class, location) token, reassembled into (K, H, W) logits.
    pub fn head(&mut self, x: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (n, k, d, p) = (cfg.num_patches(), cfg.k, cfg.d, cfg.p);
        let ns = self.param("head.norm.scale")?;
        let nb = self.param("head.norm.bias")?;
        let x = self.graph.layer_norm(x, ns, nb, 1e-5)?;
        let flat = self.graph.reshape(x, &[k * n, d])?;
        let out = self.linear(flat, "head.out", &["bias"], Stage::Rest)?;
        let (hp, wp) = (cfg.h / p, cfg.w / p);
        let out = self.graph.reshape(out, &[k, hp, wp, p, p])?;
        let out = self.graph.permute(out, &[0, 1, 3, 2, 4])?; // (K, hp, p, wp, p)
        self.graph.reshape(out, &[k, cfg.h, cfg.w])
    }

    /// Full forward: tile (T, H, W, C) + acquisition days -> logits (K, H, W).
    pub fn run(&mut self, tile: &Tensor, times: &[u16]) -> Result<Var> {
        let tokens = self.embed_patches(tile, times)?;
        let class_maps = self.temporal_encode(tokens)?;
        let mixed = self.spatial_encode(class_maps)?;
        self.head(mixed)
    }

    /// Logits (K, H, W) rearranged to per-pixel rows (H*W, K) for the
    /// cross-entropy loss.
    pub fn pixel_logits(&mut self, logits: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        let x = self.graph.permute(logits, &[1, 2, 0])?;
        self.graph.reshape(x, &[cfg.h * cfg.w, cfg.k])
    }
}

/// Closed-form parameter count of the base architecture (no PEFT modules).
/// Independent of the registry; used as the enumeration oracle's partner.
pub fn closed_form_param_count(cfg: &TsVitConfig) -> u64 {
    let (d, md, pd) = (cfg.d as u64, (cfg.mlp_ratio * cfg.d) as u64, cfg.patch_dim() as u64);
    let per_block = 2 * d                  // norm1
        + d * 3 * d + 3 * d                // qkv
        + d * d + d                        // proj
        + 2 * d                            // norm2
        + d * md + md                      // fc1
        + md * d + d; // fc2
    let embed = pd * d + d + DAYS_PER_YEAR as u64 * d + cfg.k as u64 * d;
    let blocks = (cfg.l_t + cfg.l_s) as u64 * per_block;
    let pos = (cfg.num_patches() * cfg.d) as u64;
    let p2 = (cfg.p * cfg.p) as u64;
    let head = 2 * d + d * p2 + p2;
    embed + blocks + pos + head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_diff_grad;

    fn tiny_cfg() -> TsVitConfig {
        TsVitConfig {
            t: 2,
            h: 4,
            w: 4,
            c: 2,
            k: 2,
            p: 2,
            d: 8,
            l_t: 1,
            l_s: 1,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn run_logits(model: &TsVit, tile: &Tensor, times: &[u16]) -> Tensor {
        let mut fwd = Forward::new(model);
        let logits = fwd.run(tile, times).unwrap();
        fwd.graph.value(logits).clone()
    }

    #[test]
    fn patchify_reference_shapes() {
        let cfg = REFERENCE_CONFIG_R;
        let mut rng = Rng::new(0);
        let tile = Tensor::randn(&[9, 24, 24, 10], 1.0, &mut rng);
        let raw = patchify_raw(&cfg, &tile).unwrap();
        assert_eq!(raw.shape(), &[64, 9, 90]);

        let model = TsVit::new(cfg, &mut rng).unwrap();
        let mut fwd = Forward::new(&model);
        let emb = fwd.embed_patches(&tile, &[1, 30, 60, 90, 120, 150, 180, 210, 240]).unwrap();
        assert_eq!(fwd.graph.shape(emb), &[64, 9, 128]);
    }

    #[test]
    fn patchify_single_patch_degenerate() {
        let cfg = TsVitConfig {
            p: 4,
            h: 4,
            w: 4,
            ..tiny_cfg()
        };
        let mut rng = Rng::new(1);
        let tile = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        let raw = patchify_raw(&cfg, &tile).unwrap();
        assert_eq!(raw.shape(), &[1, 2, 32]);
    }

    #[test]
    fn patchify_locality() {
        // Swapping two patch blocks in the tile swaps the token rows.
        let cfg = tiny_cfg();
        let mut rng = Rng::new(2);
        let tile = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        let raw = patchify_raw(&cfg, &tile).unwrap();
        // Build a tile with patch (0,0) and (1,1) swapped.
        let mut swapped = tile.clone();
        for t in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for c in 0..2 {
                        let a = ((t * 4 + i) * 4 + j) * 2 + c;
                        let b = ((t * 4 + (2 + i)) * 4 + (2 + j)) * 2 + c;
                        swapped.data_mut().swap(a, b);
                    }
                }
            }
        }
        let raw2 = patchify_raw(&cfg, &swapped).unwrap();
        let row = 2 * 8; // per-patch block length: T * patch_dim
        assert_eq!(&raw.data()[0..row], &raw2.data()[3 * row..4 * row]);
        assert_eq!(&raw.data()[3 * row..4 * row], &raw2.data()[0..row]);
        assert_eq!(&raw.data()[row..2 * row], &raw2.data()[row..2 * row]);
    }

    #[test]
    fn out_of_range_day_rejected() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(3);
        let model = TsVit::new(cfg, &mut rng).unwrap();
        let tile = Tensor::zeros(&[2, 4, 4, 2]);
        let mut fwd = Forward::new(&model);
        assert!(fwd.run(&tile, &[0, 10]).is_err());
        let mut fwd = Forward::new(&model);
        assert!(fwd.run(&tile, &[10, 367]).is_err());
    }

    #[test]
    fn temporal_encode_reference_shape() {
        let mut rng = Rng::new(4);
        let model = TsVit::new(REFERENCE_CONFIG_R, &mut rng).unwrap();
        let tile = Tensor::randn(&[9, 24, 24, 10], 0.5, &mut rng);
        let mut fwd = Forward::new(&model);
        let tokens = fwd.embed_patches(&tile, &[5, 36, 64, 95, 125, 156, 186, 217, 247]).unwrap();
        let cls = fwd.temporal_encode(tokens).unwrap();
        assert_eq!(fwd.graph.shape(cls), &[64, 2, 128]);
        let mixed = fwd.spatial_encode(cls).unwrap();
        assert_eq!(fwd.graph.shape(mixed), &[2, 64, 128]);
    }

    #[test]
    fn identity_blocks_return_class_tokens() {
        // Zeroed residual branches make each block the identity, so the
        // temporal encoder returns the class tokens at every location.
        let cfg = tiny_cfg();
        let mut rng = Rng::new(5);
        let mut model = TsVit::new(cfg, &mut rng).unwrap();
        for stage in ["temporal", "spatial"] {
            let p = model.params.by_path_mut(&format!("{stage}.block0.attn.proj.weight")).unwrap();
            p.tensor = Tensor::zeros(&[8, 8]);
            let p = model.params.by_path_mut(&format!("{stage}.block0.mlp.fc2.weight")).unwrap();
            p.tensor = Tensor::zeros(&[16, 8]);
        }
        let tile = Tensor::randn(&[2, 4, 4, 2], 1.0, &mut rng);
        let mut fwd = Forward::new(&model);
        let tokens = fwd.embed_patches(&tile, &[40, 80]).unwrap();
        let cls = fwd.temporal_encode(tokens).unwrap();
        let out = fwd.graph.value(cls).clone();
        let t0 = model.params.by_path("embed.class_token.0").unwrap().tensor.data();
        let t1 = model.params.by_path("embed.class_token.1").unwrap().tensor.data();
        for loc in 0..4 {
            let base = loc * 2 * 8;
            assert_eq!(&out.data()[base..base + 8], t0);
            assert_eq!(&out.data()[base + 8..base + 16], t1);
        }
    }

    #[test]
    fn identical_locations_share_output() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(6);
        let model = TsVit::new(cfg, &mut rng).unwrap();
        // Tile whose four patches are identical.
        let mut tile = Tensor::zeros(&[2, 4, 4, 2]);
        for t in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    for c in 0..2 {
                        let idx = ((t * 4 + i) * 4 + j) * 2 + c;
                        tile.data_mut()[idx] =
                            (t as f32 + 1.0) * 0.3 + ((i % 2) * 2 + (j % 2)) as f32 * 0.1 + c as f32;
                    }
                }
            }
        }
        let mut fwd = Forward::new(&model);
        let tokens = fwd.embed_patches(&tile, &[40, 80]).unwrap();
        let cls = fwd.temporal_encode(tokens).unwrap();
        let out = fwd.graph.value(cls).clone();
        let row = 2 * 8;
        for loc in 1..4 {
            assert_eq!(&out.data()[..row], &out.data()[loc * row..(loc + 1) * row]);
        }
    }

    #[test]
    fn spatial_identity_transposes_input() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(7);
        let mut model = TsVit::new(cfg, &mut rng).unwrap();
        let p = model.params.by_path_mut("spatial.block0.attn.proj.weight").unwrap();
        p.tensor = Tensor::zeros(&[8, 8]);
        let p = model.params.by_path_mut("spatial.block0.mlp.fc2.weight").unwrap();
        p.tensor = Tensor::zeros(&[16, 8]);
        let p = model.params.by_path_mut("spatial.pos").unwrap();
        p.tensor = Tensor::zeros(&[4, 8]);
        let input = Tensor::randn(&[4, 2, 8], 1.0, &mut rng);
        let mut fwd = Forward::new(&model);
        let iv = fwd.graph.constant(input.clone()).unwrap();
        let out = fwd.spatial_encode(iv).unwrap();
        assert_eq!(fwd.graph.shape(out), &[2, 4, 8]);
        for k in 0..2 {
            for n in 0..4 {
                for c in 0..8 {
                    assert_eq!(
                        fwd.graph.value(out).data()[(k * 4 + n) * 8 + c],
                        input.data()[(n * 2 + k) * 8 + c]
                    );
                }
            }
        }
    }

    #[test]
    fn munich_variant_shape() {
        let cfg = munich_variant();
        assert_eq!(cfg.k, 27);
        let mut rng = Rng::new(8);
        let model = TsVit::new(cfg, &mut rng).unwrap();
        let tile = Tensor::randn(&[9, 24, 24, 10], 0.3, &mut rng);
        let mut fwd = Forward::new(&model);
        let tokens = fwd.embed_patches(&tile, &[5, 36, 64, 95, 125, 156, 186, 217, 247]).unwrap();
        let cls = fwd.temporal_encode(tokens).unwrap();
        let mixed = fwd.spatial_encode(cls).unwrap();
        assert_eq!(fwd.graph.shape(mixed), &[27, 64, 128]);
    }

    #[test]
    fn forward_reference_logits_shape() {
        let mut rng = Rng::new(9);
        let model = TsVit::new(REFERENCE_CONFIG_R, &mut rng).unwrap();
        let tile = Tensor::randn(&[9, 24, 24, 10], 0.5, &mut rng);
        let logits = run_logits(&model, &tile, &[5, 36, 64, 95, 125, 156, 186, 217, 247]);
        assert_eq!(logits.shape(), &[2, 24, 24]);
    }

    #[test]
    fn zero_weights_give_spatially_constant_logits() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(10);
        let mut model = TsVit::new(cfg, &mut rng).unwrap();
        for path in model.params.paths().map(String::from).collect::<Vec<_>>() {
            if path.ends_with(".weight")
                || path.contains("class_token")
                || path == "spatial.pos"
                || path == "embed.day.table"
            {
                let p = model.params.by_path_mut(&path).unwrap();
                p.tensor = Tensor::zeros(p.tensor.shape());
            }
        }
        let tile = Tensor::zeros(&[2, 4, 4, 2]);
        let logits = run_logits(&model, &tile, &[40, 80]);
        let first = logits.data()[0];
        assert!(logits.data().iter().all(|&v| v == first), "{:?}", logits.data());
    }

    #[test]
    fn times_vector_changes_logits() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(11);
        let model = TsVit::new(cfg, &mut rng).unwrap();
        let tile = Tensor::randn(&[2, 4, 4, 2], 0.5, &mut rng);
        let a = run_logits(&model, &tile, &[40, 80]);
        let b = run_logits(&model, &tile, &[41, 80]);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(12);
        let model = TsVit::new(tiny_cfg(), &mut rng).unwrap();
        let tile = Tensor::randn(&[2, 4, 4, 2], 0.5, &mut rng);
        let a = run_logits(&model, &tile, &[40, 80]);
        let b = run_logits(&model, &tile, &[40, 80]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn param_count_matches_closed_form() {
        for (seed, cfg) in [
            (0u64, REFERENCE_CONFIG_R),
            (1, munich_variant()),
            (2, tiny_cfg()),
        ] {
            let mut rng = Rng::new(seed);
            let model = TsVit::new(cfg.clone(), &mut rng).unwrap();
            assert_eq!(
                model.params.total_count(),
                closed_form_param_count(&cfg),
                "config {cfg:?}"
            );
        }
    }

    #[test]
    fn reference_total_near_two_million() {
        let mut rng = Rng::new(0);
        let model = TsVit::new(REFERENCE_CONFIG_R, &mut rng).unwrap();
        let total = model.params.total_count();
        assert!((1_500_000..2_500_000).contains(&total), "total {total}");
    }

    #[test]
    fn temporal_encoder_is_location_equivariant() {
        // Permuting the N locations of the temporal input permutes the
        // output rows identically (weights shared across locations).
        let cfg = tiny_cfg();
        let mut rng = Rng::new(13);
        let model = TsVit::new(cfg, &mut rng).unwrap();
        let tile = Tensor::randn(&[2, 4, 4, 2], 0.7, &mut rng);
        let times = [40u16, 80];

        let mut fwd = Forward::new(&model);
        let tokens = fwd.embed_patches(&tile, &times).unwrap();
        let base_tokens = fwd.graph.value(tokens).clone();
        let out = fwd.temporal_encode(tokens).unwrap();
        let base_out = fwd.graph.value(out).clone();

        // Reverse the 4 locations by hand and re-encode.
        let row = 2 * 8; // T * d per location
        let mut permuted = Tensor::zeros(&[4, 2, 8]);
        for loc in 0..4 {
            permuted.data_mut()[(3 - loc) * row..(4 - loc) * row]
                .copy_from_slice(&base_tokens.data()[loc * row..(loc + 1) * row]);
        }
        let mut fwd2 = Forward::new(&model);
        let tv = fwd2.graph.constant(permuted).unwrap();
        let out2 = fwd2.temporal_encode(tv).unwrap();
        let out2 = fwd2.graph.value(out2).clone();
        let out_row = 2 * 8;
        for loc in 0..4 {
            assert_eq!(
                &base_out.data()[loc * out_row..(loc + 1) * out_row],
                &out2.data()[(3 - loc) * out_row..(4 - loc) * out_row]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_model() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(14);
        let model = TsVit::new(cfg, &mut rng).unwrap();
        let tile = Tensor::randn(&[2, 4, 4, 2], 0.5, &mut rng);
        let times = [40u16, 80];
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();

        let loss_with = |m: &TsVit| -> f32 {
            let mut fwd = Forward::precise(m);
            let logits = fwd.run(&tile, &times).unwrap();
            let rows = fwd.pixel_logits(logits).unwrap();
            let loss = fwd.graph.cross_entropy(rows, &labels).unwrap();
            fwd.graph.value(loss).item()
        };

        let mut fwd = Forward::precise(&model);
        let logits = fwd.run(&tile, &times).unwrap();
        let rows = fwd.pixel_logits(logits).unwrap();
        let loss = fwd.graph.cross_entropy(rows, &labels).unwrap();
        let (mut graph, leaves) = fwd.finish();
        graph.backward(loss).unwrap();

        for path in [
            "embed.class_token.0",
            "temporal.block0.attn.qkv.q_bias",
            "spatial.block0.mlp.fc1.bias",
            "head.out.bias",
        ] {
            let id = model.params.id_of(path).unwrap();
            let var = leaves.iter().find(|(i, _)| *i == id).unwrap().1;
            let ad = graph.grad(var).unwrap().to_vec();
            let base = model.params.get(id).tensor.clone();
            let fd = finite_diff_grad(
                |probe| {
                    let mut m = model.clone();
                    m.params.get_mut(id).tensor = probe.clone();
                    Ok(loss_with(&m))
                },
                &base,
                1e-4,
            )
            .unwrap();
            for (i, (&a, &f)) in ad.iter().zip(fd.data()).enumerate() {
                // Relative agreement with an absolute slack that absorbs the
                // float32 quantization noise of the finite-difference probe.
                let err = (a - f).abs();
                let tol = 1e-3 * a.abs().max(f.abs()) + 5e-4;
                assert!(err < tol, "{path}[{i}]: ad {a} fd {f} err {err}");
            }
        }
    }
}

