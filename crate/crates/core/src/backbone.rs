//! Toy vision transformer with two parameter-efficient adaptation routes:
//! deep visual prompt tuning (learnable tokens inserted before every encoder
//! block and dropped after it) and LoRA factors on the QKV projections.
//!
//! Token layout entering block `l` under prompt tuning:
//!
//! ```text
//! [ cls | prompt_l (prompt_len rows) | patch tokens (T rows) ]
//! ```
//!
//! The block output keeps `cls` and the patch tokens only, so every block sees
//! `1 + prompt_len + T` tokens and hands `1 + T` tokens onward.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain_adapt::DomainHead;
use crate::error::{Error, Result};
use crate::math;
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::stain::RgbPatch;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Width of the hidden layer of the domain classifier.
pub const DOMAIN_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub prompt_len: usize,
    pub lora_rank: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_side: 64,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 2,
            prompt_len: 4,
            lora_rank: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return bad("image_side must be a positive multiple of patch_size");
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be a positive multiple of num_heads");
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 {
            return bad("num_layers and mlp_ratio must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        Ok(())
    }

    /// Number of patch tokens `T = (image_side / patch_size)²`.
    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Which parameters train. Everything outside the listed groups is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Adaptation {
    /// Prompts, class token, class head, domain head.
    Vpt,
    /// LoRA factors, class head, domain head.
    Lora,
    /// Class head and domain head on a frozen backbone.
    HeadOnly,
}

impl Adaptation {
    pub fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Adaptation::Vpt => matches!(group, Prompt | ClassToken | ClassHead | DomainHead),
            Adaptation::Lora => matches!(group, LoraFactor | ClassHead | DomainHead),
            Adaptation::HeadOnly => matches!(group, ClassHead | DomainHead),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Adaptation::Vpt => "vpt",
            Adaptation::Lora => "lora",
            Adaptation::HeadOnly => "head_only",
        }
    }
}

impl core::str::FromStr for Adaptation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vpt" => Ok(Adaptation::Vpt),
            "lora" => Ok(Adaptation::Lora),
            "head_only" => Ok(Adaptation::HeadOnly),
            _ => Err(Error::InvalidConfig(format!("unknown adaptation '{s}' (expected vpt, lora or head_only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    lora: Option<(ParamId, ParamId)>,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[1, num_classes]`
    pub logits: Var,
    /// Final class-token embedding `[1, embed_dim]`, shared by both heads.
    pub feature: Var,
    /// `(tokens in, tokens out)` for every encoder block.
    pub block_lengths: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Route {
    prompts: bool,
    lora: bool,
}

/// The toy backbone with prompt tokens, LoRA factors, class head and
/// (optionally) the domain head, all held in one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct VptViT {
    config: ViTConfig,
    adaptation: Adaptation,
    store: ParamStore,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    cls: ParamId,
    prompts: Vec<ParamId>,
    layers: Vec<EncoderLayer>,
    norm_g: ParamId,
    norm_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    domain_head: Option<DomainHead>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * math::normal(rng)).collect()).expect("shape matches")
}

fn filled(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("shape matches")
}

impl VptViT {
    /// Randomly initialized model. The domain head is created when
    /// `num_domains >= 2`. Starts under the [`Adaptation::Vpt`] policy.
    pub fn new(config: ViTConfig, num_domains: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hidden = config.mlp_ratio * d;
        let fan = |n: usize| 1.0 / math::sqrt(n as f64);
        let mut s = ParamStore::new();
        use ParamGroup::*;

        let pf = config.patch_features();
        let w = normal_tensor(&mut rng, &[pf, d], fan(pf));
        // Bias starts at −0.5·Σᵢ Wᵢ so a mid-gray patch projects to zero.
        let mut bias = alloc::vec![0.0; d];
        for row in w.data().chunks_exact(d) {
            for (b, v) in bias.iter_mut().zip(row) {
                *b -= 0.5 * v;
            }
        }
        let patch_w = s.add("patch_embed.weight", PatchEmbed, w);
        let patch_b = s.add("patch_embed.bias", PatchEmbed, Tensor::new(alloc::vec![d], bias)?);
        let pos = s.add("pos_embed", Position, normal_tensor(&mut rng, &[config.tokens(), d], 0.02));
        let cls = s.add("cls_token", ClassToken, normal_tensor(&mut rng, &[1, d], 0.02));
        let mut prompts = Vec::new();
        if config.prompt_len > 0 {
            let scale = 1.0 / math::sqrt(d as f64);
            for l in 0..config.num_layers {
                let n = config.prompt_len * d;
                let data = (0..n).map(|_| (rng.random::<f64>() - 0.5) * scale).collect();
                let t = Tensor::new(vec![config.prompt_len, d], data)?;
                prompts.push(s.add(format!("prompts.{l}"), Prompt, t));
            }
        }
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let p = |name: &str| format!("blocks.{l}.{name}");
            let ln1_g = s.add(p("ln1.gamma"), Encoder, filled(&[d], 1.0));
            let ln1_b = s.add(p("ln1.beta"), Encoder, filled(&[d], 0.0));
            let qkv_w = s.add(p("qkv.weight"), Encoder, normal_tensor(&mut rng, &[d, 3 * d], fan(d)));
            let qkv_b = s.add(p("qkv.bias"), Encoder, filled(&[3 * d], 0.0));
            let proj_w = s.add(p("proj.weight"), Encoder, normal_tensor(&mut rng, &[d, d], fan(d)));
            let proj_b = s.add(p("proj.bias"), Encoder, filled(&[d], 0.0));
            let ln2_g = s.add(p("ln2.gamma"), Encoder, filled(&[d], 1.0));
            let ln2_b = s.add(p("ln2.beta"), Encoder, filled(&[d], 0.0));
            let fc1_w = s.add(p("fc1.weight"), Encoder, normal_tensor(&mut rng, &[d, hidden], fan(d)));
            let fc1_b = s.add(p("fc1.bias"), Encoder, filled(&[hidden], 0.0));
            let fc2_w = s.add(p("fc2.weight"), Encoder, normal_tensor(&mut rng, &[hidden, d], fan(hidden)));
            let fc2_b = s.add(p("fc2.bias"), Encoder, filled(&[d], 0.0));
            let lora = if config.lora_rank > 0 {
                let r = config.lora_rank;
                let a = s.add(p("qkv.lora_a"), LoraFactor, normal_tensor(&mut rng, &[d, r], fan(d)));
                let b = s.add(p("qkv.lora_b"), LoraFactor, filled(&[r, 3 * d], 0.0));
                Some((a, b))
            } else {
                None
            };
            layers.push(EncoderLayer {
                ln1_g,
                ln1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                ln2_g,
                ln2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                lora,
            });
        }
        let norm_g = s.add("norm.gamma", Encoder, filled(&[d], 1.0));
        let norm_b = s.add("norm.beta", Encoder, filled(&[d], 0.0));
        let head_w = s.add("head.weight", ClassHead, normal_tensor(&mut rng, &[d, config.num_classes], fan(d)));
        let head_b = s.add("head.bias", ClassHead, filled(&[config.num_classes], 0.0));
        let domain_head = if num_domains >= 2 {
            Some(crate::domain_adapt::DomainHead::new(&mut s, d, DOMAIN_HIDDEN, num_domains, &mut rng))
        } else {
            None
        };
        let mut model = VptViT {
            config,
            adaptation: Adaptation::Vpt,
            store: s,
            patch_w,
            patch_b,
            pos,
            cls,
            prompts,
            layers,
            norm_g,
            norm_b,
            head_w,
            head_b,
            domain_head,
        };
        model.set_adaptation(Adaptation::Vpt);
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn adaptation(&self) -> Adaptation {
        self.adaptation
    }

    /// Switches the forward route and freeze policy.
    pub fn set_adaptation(&mut self, adaptation: Adaptation) {
        self.adaptation = adaptation;
        self.store.set_trainable(|g| adaptation.trains(g));
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn domain_head(&self) -> Option<&DomainHead> {
        self.domain_head.as_ref()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_head.as_ref().map_or(0, |h| h.num_domains)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.store.bind(tape)
    }

    /// Flattened non-overlapping patches scaled to `[0, 1]`:
    /// `[T, patch_size² · 3]`, features ordered `(dy, dx, channel)`.
    pub fn patchify(&self, p: &RgbPatch) -> Result<Tensor> {
        let side = self.config.image_side;
        if p.side() != side {
            return Err(Error::invalid(
                "patch_embed",
                format!("image is {}x{}, model expects {side}x{side}", p.side(), p.side()),
            ));
        }
        let ps = self.config.patch_size;
        let grid = side / ps;
        let pf = self.config.patch_features();
        let px = p.pixels();
        let mut out = Vec::with_capacity(grid * grid * pf);
        for gy in 0..grid {
            for gx in 0..grid {
                for dy in 0..ps {
                    let row = (gy * ps + dy) * side + gx * ps;
                    for v in &px[row * 3..(row + ps) * 3] {
                        out.push(f64::from(*v) / 255.0);
                    }
                }
            }
        }
        Tensor::new(vec![grid * grid, pf], out)
    }

    /// Linear projection of the patches, before the positional embedding.
    pub fn patch_project(&self, tape: &mut Tape, b: &Bindings, p: &RgbPatch) -> Result<Var> {
        let patches = self.patchify(p)?;
        let x = tape.leaf(&patches);
        let proj = tape.matmul(x, b[self.patch_w])?;
        tape.add_row(proj, b[self.patch_b])
    }

    /// Patch tokens `E₀`: projection plus learned positional embedding.
    pub fn patch_embed(&self, tape: &mut Tape, b: &Bindings, p: &RgbPatch) -> Result<Var> {
        let proj = self.patch_project(tape, b, p)?;
        tape.add(proj, b[self.pos])
    }

    fn affine(&self, tape: &mut Tape, x: Var, g: Var, beta: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let s = tape.mul_row(n, g)?;
        tape.add_row(s, beta)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row(y, bias)
    }

    fn block(&self, tape: &mut Tape, b: &Bindings, layer: &EncoderLayer, x: Var, lora: bool) -> Result<Var> {
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let seq = tape.shape(x)[0];
        let h = self.affine(tape, x, b[layer.ln1_g], b[layer.ln1_b])?;
        let w = match (lora, layer.lora) {
            (true, Some((a, bf))) => {
                let delta = tape.matmul(b[a], b[bf])?;
                tape.add(b[layer.qkv_w], delta)?
            }
            (true, None) => return Err(Error::InvalidConfig("LoRA forward needs lora_rank > 0".into())),
            (false, _) => b[layer.qkv_w],
        };
        let qkv = self.linear(tape, h, w, b[layer.qkv_b])?;
        let qkv_t = tape.transpose(qkv)?; // [3D, S]
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut heads_t = Vec::with_capacity(self.config.num_heads);
        for hi in 0..self.config.num_heads {
            let q_t = tape.slice_rows(qkv_t, hi * dh, dh)?;
            let q = tape.transpose(q_t)?; // [S, dh]
            let k_t = tape.slice_rows(qkv_t, d + hi * dh, dh)?; // [dh, S]
            let v_t = tape.slice_rows(qkv_t, 2 * d + hi * dh, dh)?;
            let v = tape.transpose(v_t)?;
            let scores = tape.matmul(q, k_t)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores)?;
            let o = tape.matmul(attn, v)?; // [S, dh]
            heads_t.push(tape.transpose(o)?);
        }
        let merged_t = tape.concat_rows(&heads_t)?; // [D, S]
        let merged = tape.transpose(merged_t)?;
        let attn_out = self.linear(tape, merged, b[layer.proj_w], b[layer.proj_b])?;
        let x = tape.add(x, attn_out)?;
        let h2 = self.affine(tape, x, b[layer.ln2_g], b[layer.ln2_b])?;
        let m = self.linear(tape, h2, b[layer.fc1_w], b[layer.fc1_b])?;
        let m = tape.gelu(m);
        let m = self.linear(tape, m, b[layer.fc2_w], b[layer.fc2_b])?;
        debug_assert_eq!(tape.shape(m)[0], seq);
        tape.add(x, m)
    }

    fn run(&self, tape: &mut Tape, b: &Bindings, e0: Var, route: Route) -> Result<ForwardOutput> {
        let t = self.config.tokens();
        if tape.shape(e0) != [t, self.config.embed_dim] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: tape.shape(e0).to_vec(),
                rhs: vec![t, self.config.embed_dim],
            });
        }
        let use_prompts = route.prompts && self.config.prompt_len > 0;
        let mut x = tape.concat_rows(&[b[self.cls], e0])?;
        let mut lengths = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if use_prompts {
                let p = self.config.prompt_len;
                let cls = tape.slice_rows(x, 0, 1)?;
                let patches = tape.slice_rows(x, 1, t)?;
                let with_prompts = tape.concat_rows(&[cls, b[self.prompts[l]], patches])?;
                let y = self.block(tape, b, layer, with_prompts, route.lora)?;
                let cls = tape.slice_rows(y, 0, 1)?;
                let patches = tape.slice_rows(y, 1 + p, t)?;
                x = tape.concat_rows(&[cls, patches])?;
                lengths.push((1 + p + t, 1 + t));
            } else {
                x = self.block(tape, b, layer, x, route.lora)?;
                lengths.push((1 + t, 1 + t));
            }
        }
        let x = self.affine(tape, x, b[self.norm_g], b[self.norm_b])?;
        let feature = tape.slice_rows(x, 0, 1)?;
        let logits = self.classify(tape, b, feature)?;
        Ok(ForwardOutput {
            logits,
            feature,
            block_lengths: lengths,
        })
    }

    /// Class head applied to a shared feature `[1, embed_dim]`.
    pub fn classify(&self, tape: &mut Tape, b: &Bindings, feature: Var) -> Result<Var> {
        self.linear(tape, feature, b[self.head_w], b[self.head_b])
    }

    /// Forward with per-layer prompt insertion and removal.
    pub fn forward_vpt(&self, tape: &mut Tape, b: &Bindings, e0: Var) -> Result<ForwardOutput> {
        self.run(tape, b, e0, Route { prompts: true, lora: false })
    }

    /// Forward with QKV weights `W + A·B`.
    pub fn forward_lora(&self, tape: &mut Tape, b: &Bindings, e0: Var) -> Result<ForwardOutput> {
        self.run(tape, b, e0, Route { prompts: false, lora: true })
    }

    /// Backbone without prompts or adapters.
    pub fn forward_plain(&self, tape: &mut Tape, b: &Bindings, e0: Var) -> Result<ForwardOutput> {
        self.run(tape, b, e0, Route { prompts: false, lora: false })
    }

    /// Forward along the route of the current adaptation.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, e0: Var) -> Result<ForwardOutput> {
        match self.adaptation {
            Adaptation::Vpt => self.forward_vpt(tape, b, e0),
            Adaptation::Lora => self.forward_lora(tape, b, e0),
            Adaptation::HeadOnly => self.forward_plain(tape, b, e0),
        }
    }

    /// Copies parameter values from `other` by name. Shapes must agree.
    pub fn load_values(&mut self, values: &[(alloc::string::String, Tensor)]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.store.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter '{name}'")))?;
            let dst = self.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_side: 16,
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
            prompt_len: 3,
            lora_rank: 2,
        }
    }

    fn patch(side: usize, seed: u8) -> RgbPatch {
        let px = (0..side * side * 3).map(|i| ((i as u32 * 31 + seed as u32 * 7) % 251) as u8).collect();
        RgbPatch::new(side, side, px).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        assert_eq!(ViTConfig::default().tokens(), 64);
        let bad = ViTConfig { image_side: 60, ..ViTConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ViTConfig { num_heads: 3, ..ViTConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_embed_shapes_and_locality() {
        let m = VptViT::new(ViTConfig::default(), 2, 1).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let p = patch(64, 1);
        let e0 = m.patch_embed(&mut tape, &b, &p).unwrap();
        assert_eq!(tape.shape(e0), &[64, 64]);

        // Zero image and zero bias: tokens equal the positional embedding.
        let mut z = m.clone();
        let zid = z.patch_b;
        z.store_mut().get_mut(zid).data_mut().fill(0.0);
        let mut zt = Tape::new();
        let zb = z.bind(&mut zt);
        let e0 = z.patch_embed(&mut zt, &zb, &RgbPatch::filled(64, [0, 0, 0])).unwrap();
        assert_eq!(zt.value(e0), z.store().get(z.pos).data());

        // The initial bias centers a mid-gray patch at zero projection.
        let g = m.patch_project(&mut tape, &b, &RgbPatch::filled(64, [128, 128, 128])).unwrap();
        let scale = 128.0 / 255.0 - 0.5;
        let w = m.store().get(m.patch_w);
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        for j in 0..cols {
            let expected: f64 = (0..rows).map(|i| scale * w.data()[i * cols + j]).sum();
            assert!((tape.value(g)[j] - expected).abs() < 1e-12);
        }

        let mut q = p.clone();
        // Pixel (10, 20) lives in patch (row 2, col 1) → token 2·8 + 1 = 17.
        let i = (20 * 64 + 10) * 3;
        q.pixels_mut()[i] = q.pixels()[i].wrapping_add(50);
        let a = m.patch_project(&mut tape, &b, &p).unwrap();
        let c = m.patch_project(&mut tape, &b, &q).unwrap();
        let (va, vc) = (tape.value(a).to_vec(), tape.value(c).to_vec());
        for tok in 0..64 {
            let same = va[tok * 64..(tok + 1) * 64] == vc[tok * 64..(tok + 1) * 64];
            assert_eq!(same, tok != 17, "token {tok}");
        }
        assert!(m.patch_embed(&mut tape, &b, &patch(32, 0)).is_err());
    }

    #[test]
    fn sequence_length_trace() {
        let m = VptViT::new(ViTConfig::default(), 2, 3).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let e0 = m.patch_embed(&mut tape, &b, &patch(64, 2)).unwrap();
        let out = m.forward_vpt(&mut tape, &b, e0).unwrap();
        assert_eq!(out.block_lengths, vec![(69, 65); 4]);
        assert_eq!(tape.shape(out.logits), &[1, 2]);
        assert_eq!(tape.shape(out.feature), &[1, 64]);
    }

    #[test]
    fn zero_prompts_equal_plain_forward() {
        let cfg = ViTConfig { prompt_len: 0, ..tiny() };
        let m = VptViT::new(cfg, 2, 5).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let e0 = m.patch_embed(&mut tape, &b, &patch(16, 4)).unwrap();
        let a = m.forward_vpt(&mut tape, &b, e0).unwrap();
        let c = m.forward_plain(&mut tape, &b, e0).unwrap();
        assert_eq!(tape.value(a.logits), tape.value(c.logits));
        assert_eq!(a.block_lengths, c.block_lengths);
    }

    #[test]
    fn prompts_receive_gradient_in_every_layer() {
        let m = VptViT::new(tiny(), 2, 7).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let e0 = m.patch_embed(&mut tape, &b, &patch(16, 9)).unwrap();
        let out = m.forward_vpt(&mut tape, &b, e0).unwrap();
        let loss = tape.cross_entropy(out.logits, &[1], None).unwrap();
        let g = tape.backward(loss).unwrap();
        for &pid in &m.prompts {
            let gp = g.get(b[pid]).unwrap();
            assert!(gp.iter().any(|v| *v != 0.0));
        }
        // Frozen encoder weights are not tracked.
        assert!(g.get(b[m.layers[0].qkv_w]).is_none());
    }

    #[test]
    fn lora_zero_init_is_bitwise_identity() {
        let m = VptViT::new(tiny(), 2, 11).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let e0 = m.patch_embed(&mut tape, &b, &patch(16, 3)).unwrap();
        let a = m.forward_lora(&mut tape, &b, e0).unwrap();
        let c = m.forward_plain(&mut tape, &b, e0).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(tape.value(a.logits)), bits(tape.value(c.logits)));
        assert_eq!(bits(tape.value(a.feature)), bits(tape.value(c.feature)));
    }

    #[test]
    fn full_rank_lora_reconstructs_weight_delta() {
        let cfg = ViTConfig { lora_rank: 8, ..tiny() };
        let d = cfg.embed_dim;
        let base = VptViT::new(cfg, 2, 5).unwrap();
        let mut lora = base.clone();
        let mut merged = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in 0..cfg.num_layers {
            let delta: Vec<f64> = (0..d * 3 * d).map(|_| 0.1 * math::normal(&mut rng)).collect();
            // A is a signed permutation, so B = Aᵀ·ΔW gives A·B = ΔW.
            let perm: Vec<usize> = (0..d).map(|i| (3 * i + 1) % d).collect();
            let sign = |i: usize| if i % 3 == 0 { -1.0 } else { 1.0 };
            let mut a = alloc::vec![0.0; d * d];
            let mut bm = alloc::vec![0.0; d * 3 * d];
            for i in 0..d {
                a[i * d + perm[i]] = sign(i);
                for j in 0..3 * d {
                    bm[perm[i] * 3 * d + j] = sign(i) * delta[i * 3 * d + j];
                }
            }
            let set = |m: &mut VptViT, name: &str, v: &[f64]| {
                let id = m.store().find(name).unwrap();
                m.store_mut().get_mut(id).data_mut().copy_from_slice(v);
            };
            set(&mut lora, &format!("blocks.{l}.qkv.lora_a"), &a);
            set(&mut lora, &format!("blocks.{l}.qkv.lora_b"), &bm);
            let id = merged.store().find(&format!("blocks.{l}.qkv.weight")).unwrap();
            for (w, dw) in merged.store_mut().get_mut(id).data_mut().iter_mut().zip(&delta) {
                *w += dw;
            }
        }
        let run = |m: &VptViT, lora: bool| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let e0 = m.patch_embed(&mut tape, &b, &patch(16, 6)).unwrap();
            let out = if lora { m.forward_lora(&mut tape, &b, e0) } else { m.forward_plain(&mut tape, &b, e0) };
            tape.value(out.unwrap().feature).to_vec()
        };
        let (x, y) = (run(&lora, true), run(&merged, false));
        assert_ne!(run(&base, false), y);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() <= 1e-10, "{p} vs {q}");
        }
    }

    #[test]
    fn freeze_policies() {
        let mut m = VptViT::new(tiny(), 3, 2).unwrap();
        let trainable = |m: &VptViT| {
            m.store()
                .entries()
                .iter()
                .filter(|e| e.tensor.requires_grad())
                .map(|e| e.group)
                .collect::<alloc::collections::BTreeSet<_>>()
        };
        use ParamGroup::*;
        assert_eq!(trainable(&m), [ClassToken, Prompt, ClassHead, DomainHead].into_iter().collect());
        m.set_adaptation(Adaptation::Lora);
        assert_eq!(trainable(&m), [LoraFactor, ClassHead, DomainHead].into_iter().collect());
        m.set_adaptation(Adaptation::HeadOnly);
        assert_eq!(trainable(&m), [ClassHead, DomainHead].into_iter().collect());
    }

    #[test]
    fn deterministic_init() {
        let a = VptViT::new(tiny(), 2, 42).unwrap();
        let b = VptViT::new(tiny(), 2, 42).unwrap();
        assert_eq!(a.store().checksum(|_| true), b.store().checksum(|_| true));
        let c = VptViT::new(tiny(), 2, 43).unwrap();
        assert_ne!(a.store().checksum(|_| true), c.store().checksum(|_| true));
    }
}
