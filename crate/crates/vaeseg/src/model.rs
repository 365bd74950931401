//! Network assembly: shared encoder, segmentation decoder with additive
//! skips and sigmoid head, and the variational reconstruction branch.
//!
//! Parameters live in an ordered name → tensor map whose layout is a pure
//! function of [`ModelConfig`], so checkpoints can be validated against the
//! config alone. Forward passes build a fresh graph each call; parameter
//! tensors enter the graph lazily in a deterministic order, which keeps
//! [`Model::forward`] and [`Model::forward_seg_only`] bit-identical on their
//! shared prefix in eval mode.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, GroupNormSpec};
use crate::rng::{purpose, stream};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filter count at the top level; doubles at each downsampling.
    pub base_filters: usize,
    /// Spatial levels; levels - 1 stride-2 downsamplings.
    pub levels: usize,
    /// Residual block count per encoder level.
    pub blocks_per_level: Vec<usize>,
    pub input_channels: usize,
    pub seg_channels: usize,
    /// Training crop (D, H, W). Each extent must be divisible by
    /// 2^levels: 2^(levels-1) for the encoder and one more halving inside
    /// the variational branch.
    pub crop_shape: [usize; 3],
    pub dropout_rate: f32,
    /// Target group count for group norm; layers with fewer channels fall
    /// back to one group per channel.
    pub gn_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_filters: 8,
            levels: 4,
            blocks_per_level: vec![1, 2, 2, 4],
            input_channels: 4,
            seg_channels: 3,
            crop_shape: [32, 32, 32],
            dropout_rate: 0.2,
            gn_groups: 8,
        }
    }
}

impl ModelConfig {
    /// Full-scale configuration: 32 base filters, 160x192x128 crops.
    pub fn full_scale() -> Self {
        Self { base_filters: 32, crop_shape: [160, 192, 128], ..Self::default() }
    }

    pub fn latent_total(&self) -> usize {
        8 * self.base_filters
    }

    /// Dimensions of the latent mean (and of the log-variance).
    pub fn latent_dims(&self) -> usize {
        self.latent_total() / 2
    }

    /// Channels of the stride-2 conv feeding the latent dense layer.
    pub fn vd_channels(&self) -> usize {
        self.base_filters / 2
    }

    pub fn endpoint_channels(&self) -> usize {
        self.base_filters << (self.levels - 1)
    }

    fn encoder_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Divisibility required of crops: one extra factor of two beyond the
    /// encoder for the halving inside the variational branch.
    pub fn crop_divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn endpoint_spatial(&self) -> [usize; 3] {
        self.crop_shape.map(|d| d / self.encoder_divisor())
    }

    fn vd_spatial(&self) -> [usize; 3] {
        self.endpoint_spatial().map(|d| d / 2)
    }

    /// Flattened length of the stride-2 conv output inside the VD row.
    pub fn vd_flat(&self) -> usize {
        self.vd_channels() * self.vd_spatial().iter().product::<usize>()
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        self.gn_groups.min(channels)
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.levels < 2 {
            return fail(format!("levels {} < 2", self.levels));
        }
        if self.base_filters < 2 || self.base_filters % 2 != 0 {
            return fail(format!(
                "base_filters {} must be even and >= 2 (the variational branch narrows to half)",
                self.base_filters
            ));
        }
        if self.blocks_per_level.len() != self.levels {
            return fail(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                self.levels
            ));
        }
        if self.blocks_per_level.iter().any(|&b| b == 0) {
            return fail("blocks_per_level entries must be >= 1".into());
        }
        if self.input_channels == 0 || self.seg_channels == 0 {
            return fail("channel counts must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.gn_groups == 0 {
            return fail("gn_groups must be >= 1".into());
        }
        let div = self.crop_divisor();
        for (axis, &d) in self.crop_shape.iter().enumerate() {
            if d == 0 || d % div != 0 {
                return fail(format!(
                    "crop axis {axis} extent {d} is not a positive multiple of {div}"
                ));
            }
        }
        let mut normed: Vec<usize> =
            (0..self.levels).map(|l| self.level_channels(l)).collect();
        normed.push(self.vd_channels());
        for c in normed {
            let groups = self.groups_for(c);
            if c % groups != 0 {
                return fail(format!("{groups} norm groups do not divide {c} channels"));
            }
        }
        Ok(())
    }
}

/// How one parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in +-sqrt(6 / fan_in), for conv and dense weights.
    FanIn(usize),
    /// Zeros: biases, group norm beta.
    Zero,
    /// Ones: group norm gamma.
    One,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec(name: String, out_c: usize, in_c: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![out_c, in_c, k, k, k],
            init: Init::FanIn(in_c * k * k * k),
        },
        ParamSpec { name: format!("{name}.bias"), shape: vec![out_c], init: Init::Zero },
    ]
}

fn dense_spec(name: String, out_d: usize, in_d: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![out_d, in_d],
            init: Init::FanIn(in_d),
        },
        ParamSpec { name: format!("{name}.bias"), shape: vec![out_d], init: Init::Zero },
    ]
}

fn gn_spec(name: String, channels: usize) -> [ParamSpec; 2] {
    [
        ParamSpec { name: format!("{name}.gamma"), shape: vec![channels], init: Init::One },
        ParamSpec { name: format!("{name}.beta"), shape: vec![channels], init: Init::Zero },
    ]
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    for i in [1, 2] {
        out.extend(gn_spec(format!("{prefix}.gn{i}"), channels));
        out.extend(conv_spec(format!("{prefix}.conv{i}"), channels, channels, 3));
    }
}

/// The full parameter table, in initialization and checkpoint order.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let f = config.base_filters;
    let mut out = Vec::new();
    out.extend(conv_spec("encoder.init.conv".into(), f, config.input_channels, 3));
    for l in 0..config.levels {
        let c = config.level_channels(l);
        for b in 0..config.blocks_per_level[l] {
            block_specs(&mut out, &format!("encoder.L{l}.B{b}"), c);
        }
        if l + 1 < config.levels {
            out.extend(conv_spec(format!("encoder.down{l}.conv"), c * 2, c, 3));
        }
    }
    for l in (0..config.levels - 1).rev() {
        let c = config.level_channels(l);
        out.extend(conv_spec(format!("decoder.L{l}.reduce.conv"), c, c * 2, 1));
        block_specs(&mut out, &format!("decoder.L{l}.B0"), c);
    }
    out.extend(conv_spec("decoder.head.conv".into(), config.seg_channels, f, 1));

    let ec = config.endpoint_channels();
    out.extend(gn_spec("vae.vd.gn".into(), ec));
    out.extend(conv_spec("vae.vd.conv".into(), config.vd_channels(), ec, 3));
    out.extend(dense_spec("vae.vd.dense".into(), config.latent_total(), config.vd_flat()));
    out.extend(dense_spec("vae.vu.dense".into(), config.vd_flat(), config.latent_dims()));
    out.extend(conv_spec("vae.vu.conv".into(), ec, config.vd_channels(), 1));
    for l in (0..config.levels - 1).rev() {
        let c = config.level_channels(l);
        out.extend(conv_spec(format!("vae.up{l}.conv"), c, c * 2, 1));
        block_specs(&mut out, &format!("vae.L{l}.B0"), c);
    }
    out.extend(conv_spec("vae.end.conv".into(), config.input_channels, f, 1));
    out
}

/// Ordered (row name, output shape) table mirroring the architecture,
/// computed without allocating activations. Shapes are `[C, D, H, W]`
/// except the latent rows VD and VDraw, which are vectors.
pub fn infer_shapes(
    config: &ModelConfig,
    input_shape: [usize; 4],
) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    if input_shape[0] != config.input_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, config expects {}",
            input_shape[0], config.input_channels
        )));
    }
    let div = config.crop_divisor();
    let mut sp = [input_shape[1], input_shape[2], input_shape[3]];
    for (axis, &d) in sp.iter().enumerate() {
        if d == 0 || d % div != 0 {
            return Err(Error::Shape(format!(
                "input axis {axis} extent {d} is not a positive multiple of {div}"
            )));
        }
    }

    let f = config.base_filters;
    let with = |c: usize, sp: [usize; 3]| vec![c, sp[0], sp[1], sp[2]];
    let mut rows = Vec::new();
    rows.push(("Input".to_string(), with(config.input_channels, sp)));
    rows.push(("InitConv".to_string(), with(f, sp)));
    for l in 0..config.levels {
        let c = config.level_channels(l);
        for b in 0..config.blocks_per_level[l] {
            rows.push((format!("EncBlock{l}.{b}"), with(c, sp)));
        }
        if l + 1 < config.levels {
            sp = sp.map(|d| d / 2);
            rows.push((format!("EncDown{l}"), with(c * 2, sp)));
        }
    }
    rows.push(("EncoderEndpoint".to_string(), with(config.endpoint_channels(), sp)));
    let endpoint_sp = sp;
    for l in (0..config.levels - 1).rev() {
        let c = config.level_channels(l);
        sp = sp.map(|d| d * 2);
        rows.push((format!("DecUp{l}"), with(c, sp)));
        rows.push((format!("DecBlock{l}"), with(c, sp)));
    }
    rows.push(("SegHead".to_string(), with(config.seg_channels, sp)));

    rows.push(("VD".to_string(), vec![config.latent_total()]));
    rows.push(("VDraw".to_string(), vec![config.latent_dims()]));
    let mut vsp = endpoint_sp;
    rows.push(("VU".to_string(), with(config.endpoint_channels(), vsp)));
    for l in (0..config.levels - 1).rev() {
        let c = config.level_channels(l);
        vsp = vsp.map(|d| d * 2);
        rows.push((format!("VUp{l}"), with(c, vsp)));
        rows.push((format!("VBlock{l}"), with(c, vsp)));
    }
    rows.push(("Vend".to_string(), with(config.input_channels, vsp)));
    Ok(rows)
}

/// Named parameters plus the config that shaped them. Parameter tensors may
/// be a subset of the full table (segmentation-only checkpoints); forward
/// passes fail only if they actually touch a missing name.
pub struct Model {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor>,
}

/// A completed training-capable forward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: NodeId,
    pub seg: NodeId,
    pub recon: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    /// Graph leaf of every parameter the pass touched, by name.
    pub param_nodes: IndexMap<String, NodeId>,
}

/// A segmentation-only forward pass (no variational branch, no dropout).
pub struct SegForward {
    pub graph: Graph,
    pub seg: NodeId,
}

struct Wiring<'m> {
    model: &'m Model,
    used: IndexMap<String, NodeId>,
}

impl<'m> Wiring<'m> {
    fn new(model: &'m Model) -> Self {
        Self { model, used: IndexMap::new() }
    }

    fn p(&mut self, g: &mut Graph, name: String) -> Result<NodeId> {
        if let Some(&id) = self.used.get(&name) {
            return Ok(id);
        }
        let t = self
            .model
            .params
            .get(&name)
            .ok_or_else(|| Error::Graph(format!("parameter {name} missing from model")))?;
        let id = g.leaf(t.clone());
        self.used.insert(name, id);
        Ok(id)
    }
}

impl Model {
    pub fn build(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(init_seed, &[purpose::INIT]);
        let mut params = IndexMap::new();
        for spec in parameter_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::FanIn(fan) => {
                    let bound = (6.0 / fan as f64).sqrt() as f32;
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?.requires_grad(true));
        }
        Ok(Self { config, params })
    }

    fn block(
        &self,
        g: &mut Graph,
        w: &mut Wiring<'_>,
        x: NodeId,
        prefix: &str,
        channels: usize,
    ) -> Result<NodeId> {
        let gn = GroupNormSpec::new(channels, self.config.groups_for(channels));
        let conv = ConvSpec::new(channels, channels, 3, 1);
        let mut cur = x;
        for i in [1, 2] {
            let gamma = w.p(g, format!("{prefix}.gn{i}.gamma"))?;
            let beta = w.p(g, format!("{prefix}.gn{i}.beta"))?;
            cur = ops::group_norm(g, cur, gamma, beta, gn)?;
            cur = ops::relu(g, cur)?;
            let weight = w.p(g, format!("{prefix}.conv{i}.weight"))?;
            let bias = w.p(g, format!("{prefix}.conv{i}.bias"))?;
            cur = ops::conv3d(g, cur, weight, bias, conv)?;
        }
        ops::add(g, x, cur)
    }

    fn named_conv(
        &self,
        g: &mut Graph,
        w: &mut Wiring<'_>,
        x: NodeId,
        name: &str,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let weight = w.p(g, format!("{name}.weight"))?;
        let bias = w.p(g, format!("{name}.bias"))?;
        ops::conv3d(g, x, weight, bias, spec)
    }

    /// Encoder, decoder, and sigmoid head. Returns (input leaf, seg output,
    /// encoder endpoint).
    fn seg_trunk(
        &self,
        g: &mut Graph,
        w: &mut Wiring<'_>,
        x: &Tensor,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let cfg = &self.config;
        let f = cfg.base_filters;
        let input = g.leaf(x.clone());
        let mut cur = self.named_conv(
            g,
            w,
            input,
            "encoder.init.conv",
            ConvSpec::new(cfg.input_channels, f, 3, 1),
        )?;
        if let Some(rng) = dropout {
            cur = ops::spatial_dropout(g, cur, cfg.dropout_rate, rng, true)?;
        }

        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let c = cfg.level_channels(l);
            for b in 0..cfg.blocks_per_level[l] {
                cur = self.block(g, w, cur, &format!("encoder.L{l}.B{b}"), c)?;
            }
            skips.push(cur);
            if l + 1 < cfg.levels {
                cur = self.named_conv(
                    g,
                    w,
                    cur,
                    &format!("encoder.down{l}.conv"),
                    ConvSpec::new(c, c * 2, 3, 2),
                )?;
            }
        }
        let endpoint = cur;

        let mut d = endpoint;
        for l in (0..cfg.levels - 1).rev() {
            let c = cfg.level_channels(l);
            d = self.named_conv(
                g,
                w,
                d,
                &format!("decoder.L{l}.reduce.conv"),
                ConvSpec::new(c * 2, c, 1, 1),
            )?;
            d = ops::trilinear_upsample(g, d)?;
            d = ops::add(g, d, skips[l])?;
            d = self.block(g, w, d, &format!("decoder.L{l}.B0"), c)?;
        }
        let logits = self.named_conv(
            g,
            w,
            d,
            "decoder.head.conv",
            ConvSpec::new(f, cfg.seg_channels, 1, 1),
        )?;
        let seg = ops::sigmoid(g, logits)?;
        Ok((input, seg, endpoint))
    }

    /// Variational branch from the encoder endpoint down to the
    /// reconstruction. `latent_rng` draws the sample; `None` fixes z = mu.
    fn vae_branch(
        &self,
        g: &mut Graph,
        w: &mut Wiring<'_>,
        endpoint: NodeId,
        latent_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let cfg = &self.config;
        let ec = cfg.endpoint_channels();

        let gamma = w.p(g, "vae.vd.gn.gamma".into())?;
        let beta = w.p(g, "vae.vd.gn.beta".into())?;
        let mut v = ops::group_norm(
            g,
            endpoint,
            gamma,
            beta,
            GroupNormSpec::new(ec, cfg.groups_for(ec)),
        )?;
        v = ops::relu(g, v)?;
        v = self.named_conv(
            g,
            w,
            v,
            "vae.vd.conv",
            ConvSpec::new(ec, cfg.vd_channels(), 3, 2),
        )?;
        let vd_shape = g.value(v).shape().to_vec();
        let flat: usize = vd_shape.iter().product();
        v = ops::reshape(g, v, vec![flat])?;
        let wt = w.p(g, "vae.vd.dense.weight".into())?;
        let bt = w.p(g, "vae.vd.dense.bias".into())?;
        let latent = ops::dense(g, v, wt, bt)?;

        let ld = cfg.latent_dims();
        let mu = ops::slice(g, latent, 0, vec![ld])?;
        let logvar = ops::slice(g, latent, ld, vec![ld])?;
        let z = match latent_rng {
            Some(rng) => ops::reparameterize(g, mu, logvar, rng)?,
            None => mu,
        };

        let wt = w.p(g, "vae.vu.dense.weight".into())?;
        let bt = w.p(g, "vae.vu.dense.bias".into())?;
        let mut u = ops::dense(g, z, wt, bt)?;
        u = ops::relu(g, u)?;
        u = ops::reshape(g, u, vd_shape)?;
        u = self.named_conv(g, w, u, "vae.vu.conv", ConvSpec::new(cfg.vd_channels(), ec, 1, 1))?;
        u = ops::trilinear_upsample(g, u)?;
        for l in (0..cfg.levels - 1).rev() {
            let c = cfg.level_channels(l);
            u = self.named_conv(
                g,
                w,
                u,
                &format!("vae.up{l}.conv"),
                ConvSpec::new(c * 2, c, 1, 1),
            )?;
            u = ops::trilinear_upsample(g, u)?;
            u = self.block(g, w, u, &format!("vae.L{l}.B0"), c)?;
        }
        let recon = self.named_conv(
            g,
            w,
            u,
            "vae.end.conv",
            ConvSpec::new(cfg.base_filters, cfg.input_channels, 1, 1),
        )?;
        Ok((recon, mu, logvar))
    }

    fn check_input(&self, x: &Tensor, require_crop: bool) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "input shape {s:?}, expected [{}, D, H, W]",
                self.config.input_channels
            )));
        }
        if require_crop {
            let want = self.config.crop_shape;
            if s[1] != want[0] || s[2] != want[1] || s[3] != want[2] {
                return Err(Error::Shape(format!(
                    "input spatial {:?} does not match configured crop {want:?}",
                    &s[1..]
                )));
            }
        } else {
            let div = self.config.encoder_divisor();
            for &d in &s[1..] {
                if d % div != 0 || d == 0 {
                    return Err(Error::Shape(format!(
                        "input spatial {:?} must be positive multiples of {div}",
                        &s[1..]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full pass: segmentation head and variational reconstruction. In
    /// training mode `rng` drives channel dropout and the latent sample; in
    /// eval mode no stochastic node exists and z = mu.
    pub fn forward(&self, x: &Tensor, rng: &mut ChaCha8Rng, training: bool) -> Result<ForwardPass> {
        self.check_input(x, true)?;
        let mut g = Graph::new();
        let mut w = Wiring::new(self);
        let (input, seg, endpoint) =
            self.seg_trunk(&mut g, &mut w, x, training.then_some(&mut *rng))?;
        let (recon, mu, logvar) =
            self.vae_branch(&mut g, &mut w, endpoint, training.then_some(rng))?;
        Ok(ForwardPass { graph: g, input, seg, recon, mu, logvar, param_nodes: w.used })
    }

    /// Deployment pass: encoder, decoder, and head only. Works on any input
    /// whose spatial extents divide by the encoder factor (the trunk is
    /// fully convolutional) and with models whose variational parameters
    /// were never loaded.
    pub fn forward_seg_only(&self, x: &Tensor) -> Result<SegForward> {
        self.check_input(x, false)?;
        let mut g = Graph::new();
        let mut w = Wiring::new(self);
        let (_, seg, _) = self.seg_trunk(&mut g, &mut w, x, None)?;
        Ok(SegForward { graph: g, seg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig { base_filters: 4, crop_shape: [16, 16, 16], ..ModelConfig::default() }
    }

    fn tiny_input(seed: u64) -> Tensor {
        crate::gradprobe::uniform(seed, vec![4, 16, 16, 16], -1.0, 1.0)
    }

    #[test]
    fn full_scale_shape_table() {
        let rows = infer_shapes(&ModelConfig::full_scale(), [4, 160, 192, 128]).unwrap();
        let lookup = |name: &str| -> Vec<usize> {
            rows.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name}")).1.clone()
        };
        assert_eq!(lookup("EncoderEndpoint"), vec![256, 20, 24, 16]);
        assert_eq!(lookup("SegHead"), vec![3, 160, 192, 128]);
        assert_eq!(lookup("VD"), vec![256]);
        assert_eq!(lookup("VDraw"), vec![128]);
        assert_eq!(lookup("VU"), vec![256, 20, 24, 16]);
        assert_eq!(lookup("VUp2"), vec![128, 40, 48, 32]);
        assert_eq!(lookup("VBlock2"), vec![128, 40, 48, 32]);
        assert_eq!(lookup("VUp1"), vec![64, 80, 96, 64]);
        assert_eq!(lookup("VBlock1"), vec![64, 80, 96, 64]);
        assert_eq!(lookup("VUp0"), vec![32, 160, 192, 128]);
        assert_eq!(lookup("VBlock0"), vec![32, 160, 192, 128]);
        assert_eq!(lookup("Vend"), vec![4, 160, 192, 128]);
    }

    #[test]
    fn desk_scale_shape_table() {
        let cfg = ModelConfig::default();
        let rows = infer_shapes(&cfg, [4, 32, 32, 32]).unwrap();
        let lookup = |name: &str| -> Vec<usize> {
            rows.iter().find(|(n, _)| n == name).unwrap().1.clone()
        };
        assert_eq!(lookup("EncoderEndpoint"), vec![64, 4, 4, 4]);
        assert_eq!(lookup("VD"), vec![64]);
        assert_eq!(lookup("VDraw"), vec![32]);
        assert_eq!(lookup("Vend"), vec![4, 32, 32, 32]);
    }

    #[test]
    fn shape_table_rejects_indivisible_input() {
        let cfg = ModelConfig::default();
        assert!(infer_shapes(&cfg, [4, 24, 32, 32]).is_err());
        assert!(infer_shapes(&cfg, [3, 32, 32, 32]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        let odd = ModelConfig { base_filters: 6, ..ModelConfig::default() };
        // 12-channel layers would need 8 groups, which do not divide 12
        assert!(odd.validate().is_err());
        let bad_crop = ModelConfig { crop_shape: [24, 32, 32], ..ModelConfig::default() };
        assert!(bad_crop.validate().is_err());
        let bad_blocks = ModelConfig { blocks_per_level: vec![1, 2], ..ModelConfig::default() };
        assert!(bad_blocks.validate().is_err());
    }

    #[test]
    fn build_is_seed_deterministic() {
        let a = Model::build(tiny_config(), 77).unwrap();
        let b = Model::build(tiny_config(), 77).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (name, t) in &a.params {
            assert_eq!(t.data(), b.params[name].data(), "{name}");
        }
        let c = Model::build(tiny_config(), 78).unwrap();
        assert!(a.params.iter().any(|(n, t)| t.data() != c.params[n].data()));
    }

    #[test]
    fn init_statistics_match_scheme() {
        let m = Model::build(ModelConfig::default(), 5).unwrap();
        let w = &m.params["encoder.L3.B0.conv1.weight"];
        let fan_in = 64 * 27;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.5));
        assert!(m.params["encoder.init.conv.bias"].data().iter().all(|&v| v == 0.0));
        assert!(m.params["encoder.L0.B0.gn1.gamma"].data().iter().all(|&v| v == 1.0));
        assert!(m.params["encoder.L0.B0.gn1.beta"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_change_touches_only_latent_dense_shapes() {
        let small = parameter_specs(&ModelConfig::default());
        let big = parameter_specs(&ModelConfig {
            crop_shape: [48, 32, 32],
            ..ModelConfig::default()
        });
        assert_eq!(small.len(), big.len());
        let mut differing: Vec<&str> = small
            .iter()
            .zip(&big)
            .filter(|(a, b)| a.shape != b.shape)
            .map(|(a, _)| a.name.as_str())
            .collect();
        differing.sort_unstable();
        assert_eq!(
            differing,
            ["vae.vd.dense.weight", "vae.vu.dense.bias", "vae.vu.dense.weight"]
        );
    }

    #[test]
    fn forward_shapes_and_output_ranges() {
        let model = Model::build(tiny_config(), 3).unwrap();
        let x = tiny_input(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pass = model.forward(&x, &mut rng, false).unwrap();
        assert_eq!(pass.graph.value(pass.seg).shape(), &[3, 16, 16, 16]);
        assert_eq!(pass.graph.value(pass.recon).shape(), &[4, 16, 16, 16]);
        assert_eq!(pass.graph.value(pass.mu).shape(), &[16]);
        assert_eq!(pass.graph.value(pass.logvar).shape(), &[16]);
        // sigmoid saturates to exactly 0.0 or 1.0 in f32 for large logits,
        // so only the closed bounds are guaranteed
        let seg = pass.graph.value(pass.seg).data();
        assert!(seg.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(seg.iter().any(|&v| v > 0.05 && v < 0.95));
        // every parameter participates in the full pass
        assert_eq!(pass.param_nodes.len(), model.params.len());
    }

    #[test]
    fn eval_forward_is_deterministic_and_matches_seg_only() {
        let model = Model::build(tiny_config(), 4).unwrap();
        let x = tiny_input(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = model.forward(&x, &mut rng, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = model.forward(&x, &mut rng, false).unwrap();
        assert_eq!(
            a.graph.value(a.seg).data(),
            b.graph.value(b.seg).data(),
            "eval forward must ignore the rng"
        );
        let seg_only = model.forward_seg_only(&x).unwrap();
        assert_eq!(
            a.graph.value(a.seg).data(),
            seg_only.graph.value(seg_only.seg).data(),
            "trunk must be bit-identical across entry points"
        );
    }

    #[test]
    fn training_forward_uses_the_rng() {
        let model = Model::build(tiny_config(), 4).unwrap();
        let x = tiny_input(2);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = model.forward(&x, &mut rng, true).unwrap();
            p.graph.value(p.recon).data().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn seg_only_accepts_any_multiple_of_eight() {
        let model = Model::build(tiny_config(), 4).unwrap();
        let x = crate::gradprobe::uniform(3, vec![4, 24, 16, 8], -1.0, 1.0);
        let pass = model.forward_seg_only(&x).unwrap();
        assert_eq!(pass.graph.value(pass.seg).shape(), &[3, 24, 16, 8]);
        // the full pass is pinned to the configured crop
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.forward(&x, &mut rng, false).is_err());
    }

    #[test]
    fn seg_only_runs_without_variational_parameters() {
        let mut model = Model::build(tiny_config(), 6).unwrap();
        model.params.retain(|name, _| !name.starts_with("vae."));
        let x = tiny_input(4);
        assert!(model.forward_seg_only(&x).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.forward(&x, &mut rng, false).is_err());
    }
}
