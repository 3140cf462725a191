//! Two-stream saliency network.
//!
//! A small strided-convolution encoder produces four stages per modality at
//! strides 4, 8, 16 and 32. At every stage the global (SAGEM) and local
//! (SALRM) cross-modal modules run side by side; a fusion unit merges them
//! with the next-coarser fused stage and applies pixel self-attention. The
//! decoder runs coarse to fine, and every decoder block feeds a one-channel
//! head whose sigmoid map is supervised at input resolution.

use crate::error::{Error, Result};
use crate::layers::{linear_flops, FeedForward, Linear, Norm, MLP_EXPANSION};
use crate::ops;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::sagem::{self, SagemParams};
use crate::salrm::{self, SalrmParams};
use crate::superpixel::{GridGeometry, NeighborhoodSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
/// Encoder output stride of each stage.
pub const STAGE_STRIDES: [usize; STAGES] = [4, 8, 16, 32];
pub const DECODER_KERNEL: usize = 5;
/// Decoder head weights start uniform in `[-b, b]`. Xavier-sized heads
/// saturate the sigmoids because fused features grow towards the fine stages.
pub const HEAD_INIT_BOUND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub channels: [usize; STAGES],
    pub cells: [usize; STAGES],
    pub mask_radius: usize,
    pub iters: usize,
    pub salrm_k: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: [32, 64, 128, 256],
            cells: [2, 2, 1, 1],
            mask_radius: 2,
            iters: 2,
            salrm_k: salrm::DEFAULT_K,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest valid network: 32 px input, stage sides 8, 4, 2, 1.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            channels: [4, 8, 16, 32],
            ..Self::default()
        }
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_size / STAGE_STRIDES[stage]
    }

    pub fn geometry(&self, stage: usize) -> Result<GridGeometry> {
        GridGeometry::square(self.stage_side(stage), self.cells[stage])
    }

    pub fn neighborhood(&self, stage: usize) -> NeighborhoodSpec {
        NeighborhoodSpec::new(self.mask_radius, self.cells[stage])
    }

    pub fn validate(&self) -> Result<()> {
        let last = STAGE_STRIDES[STAGES - 1];
        if self.input_size == 0 || !self.input_size.is_multiple_of(last) {
            return Err(Error::invalid(
                "ModelConfig",
                format!("input_size {} must be a positive multiple of {last}", self.input_size),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("ModelConfig", "channels must be positive"));
        }
        if !(1..=3).contains(&self.mask_radius) {
            return Err(Error::invalid(
                "ModelConfig",
                format!("mask_radius {} outside 1..=3", self.mask_radius),
            ));
        }
        if self.salrm_k == 0 {
            return Err(Error::invalid("ModelConfig", "salrm_k must be at least 1"));
        }
        for s in 0..STAGES {
            self.geometry(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderStage {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionParams {
    pub proj: Linear,
    /// Projects the next-coarser fused stage; absent at the coarsest stage.
    pub coarse: Option<Linear>,
    pub attn: SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderParams {
    /// Projects the previous decoder output; absent for the first block.
    pub proj: Option<Linear>,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub norm: Norm,
    pub pw1: Linear,
    pub pw2: Linear,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkParams {
    pub enc_rgb: [EncoderStage; STAGES],
    pub enc_depth: [EncoderStage; STAGES],
    pub sagem: [SagemParams; STAGES],
    pub salrm: [SalrmParams; STAGES],
    pub fusion: [FusionParams; STAGES],
    pub decoder: [DecoderParams; STAGES],
}

fn encoder(store: &mut ParamStore, prefix: &str, ch: &[usize; STAGES], rng: &mut Rng) -> [EncoderStage; STAGES] {
    std::array::from_fn(|s| {
        let (k, cin) = if s == 0 { (4, 3) } else { (2, ch[s - 1]) };
        let cout = ch[s];
        let p = format!("{prefix}.s{}", s + 1);
        let w = store.xavier(format!("{p}.conv.w"), &[k, k, cin, cout], k * k * cin, k * k * cout, rng);
        let b = store.zeros(format!("{p}.conv.b"), &[cout]);
        EncoderStage {
            w,
            b,
            norm: Norm::new(store, &format!("{p}.norm"), cout),
        }
    })
}

impl NetworkParams {
    /// Registers every parameter in a fixed order drawn from `config.seed`.
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Self {
        let mut rng = Rng::new(config.seed);
        let ch = config.channels;
        let enc_rgb = encoder(store, "enc.rgb", &ch, &mut rng);
        let enc_depth = encoder(store, "enc.depth", &ch, &mut rng);
        let sagem = std::array::from_fn(|s| SagemParams::new(store, &format!("stage{}.sagem", s + 1), ch[s], &mut rng));
        let salrm = std::array::from_fn(|s| {
            SalrmParams::new(store, &format!("stage{}.salrm", s + 1), ch[s], config.salrm_k, &mut rng)
        });
        let fusion = std::array::from_fn(|s| {
            let p = format!("fuse{}", s + 1);
            let c = ch[s];
            let mut lin = |name: &str, cin: usize, cout: usize| Linear::new(store, &format!("{p}.{name}"), cin, cout, &mut rng);
            FusionParams {
                proj: lin("proj", 2 * c, c),
                coarse: (s + 1 < STAGES).then(|| lin("coarse", ch[s + 1], c)),
                attn: SelfAttention {
                    q: lin("attn.q", c, c),
                    k: lin("attn.k", c, c),
                    v: lin("attn.v", c, c),
                    o: lin("attn.o", c, c),
                },
            }
        });
        let decoder = std::array::from_fn(|s| {
            let p = format!("dec{}", s + 1);
            let c = ch[s];
            let hidden = MLP_EXPANSION * c;
            let proj = (s + 1 < STAGES).then(|| Linear::new(store, &format!("{p}.proj"), ch[s + 1], c, &mut rng));
            let k2 = DECODER_KERNEL * DECODER_KERNEL;
            let dw_w = store.xavier(format!("{p}.dw.w"), &[DECODER_KERNEL, DECODER_KERNEL, c], k2, k2, &mut rng);
            let dw_b = store.zeros(format!("{p}.dw.b"), &[c]);
            DecoderParams {
                proj,
                dw_w,
                dw_b,
                norm: Norm::new(store, &format!("{p}.norm"), c),
                pw1: Linear::new(store, &format!("{p}.pw1"), c, hidden, &mut rng),
                pw2: Linear::new(store, &format!("{p}.pw2"), hidden, c, &mut rng),
                head: Linear::small(store, &format!("{p}.head"), c, 1, HEAD_INIT_BOUND, &mut rng),
            }
        });
        Self {
            enc_rgb,
            enc_depth,
            sagem,
            salrm,
            fusion,
            decoder,
        }
    }
}

/// Saliency maps at input resolution; `maps[0]` is the final prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyOutput {
    pub maps: [Tensor; STAGES],
}

impl SaliencyOutput {
    /// `SM^i` for `i` in `1..=4`.
    pub fn sm(&self, i: usize) -> &Tensor {
        &self.maps[i - 1]
    }

    pub fn prediction(&self) -> &Tensor {
        &self.maps[0]
    }
}

/// Per-stage `[HW, C]` features of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub stages: [Var; STAGES],
}

/// Everything a forward pass leaves on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub rgb: StageFeatures,
    pub depth: StageFeatures,
    pub global: [Var; STAGES],
    pub local: [Var; STAGES],
    pub fused: [Var; STAGES],
    /// Sigmoid maps `[H, W]`, finest first.
    pub maps: [Var; STAGES],
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: NetworkParams,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let params = NetworkParams::new(&mut store, &config);
        Ok(Self { config, store, params })
    }

    /// Records a full forward pass. `rgb` is `[3, H, W]`, `depth` `[1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, rgb: &Tensor, depth: &Tensor) -> Result<ForwardVars> {
        forward(tape, &self.config, &self.params, rgb, depth)
    }

    pub fn predict(&self, rgb: &Tensor, depth: &Tensor) -> Result<SaliencyOutput> {
        let mut tape = Tape::inference(&self.store);
        let vars = self.forward(&mut tape, rgb, depth)?;
        Ok(SaliencyOutput {
            maps: vars.maps.map(|v| tape.value(v).clone()),
        })
    }
}

fn check_image(t: &Tensor, channels: usize, size: usize) -> Result<()> {
    if t.shape() != [channels, size, size] {
        return Err(Error::ShapeMismatch {
            op: "network input",
            lhs: t.shape().to_vec(),
            rhs: vec![channels, size, size],
        });
    }
    Ok(())
}

/// Depth `[1, H, W]` replicated to `[H, W, 3]`.
pub fn replicate_depth(depth: &Tensor) -> Result<Tensor> {
    let hwc = ops::chw_to_hwc(depth)?;
    ops::concat(&[&hwc, &hwc, &hwc], 2)
}

fn encode_stream(tape: &mut Tape, x: Var, enc: &[EncoderStage; STAGES]) -> Result<StageFeatures> {
    let mut cur = x;
    let mut stages = [cur; STAGES];
    for (s, stage) in enc.iter().enumerate() {
        let stride = if s == 0 { 4 } else { 2 };
        let (w, b) = (tape.param(stage.w), tape.param(stage.b));
        let y = tape.strided_conv(cur, w, b, stride)?;
        cur = stage.norm.forward(tape, y)?;
        let sh = tape.shape(cur).to_vec();
        stages[s] = tape.reshape(cur, &[sh[0] * sh[1], sh[2]])?;
    }
    Ok(StageFeatures { stages })
}

/// Both streams' stage features.
pub fn toy_encode(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &NetworkParams,
    rgb: &Tensor,
    depth: &Tensor,
) -> Result<(StageFeatures, StageFeatures)> {
    check_image(rgb, 3, config.input_size)?;
    check_image(depth, 1, config.input_size)?;
    let r = tape.constant(ops::chw_to_hwc(rgb)?);
    let d = tape.constant(replicate_depth(depth)?);
    Ok((encode_stream(tape, r, &params.enc_rgb)?, encode_stream(tape, d, &params.enc_depth)?))
}

/// Single-head self-attention with a residual connection over `[HW, C]` tokens.
pub fn self_attention(tape: &mut Tape, x: Var, attn: &SelfAttention) -> Result<Var> {
    let c = tape.shape(x)[1];
    let q = attn.q.forward(tape, x)?;
    let k = attn.k.forward(tape, x)?;
    let v = attn.v.forward(tape, x)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    let w = tape.softmax(logits, 1)?;
    let h = tape.matmul(w, v)?;
    let o = attn.o.forward(tape, h)?;
    tape.add(x, o)
}

/// `[HW, C]` tokens of a square map to the next finer map, still as tokens.
fn upsample_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [hw, c] = *tape.shape(x) else {
        return Err(Error::invalid("upsample_tokens", "expected [HW, C]"));
    };
    let side = square_side(hw)?;
    let map = tape.reshape(x, &[side, side, c])?;
    let up = tape.upsample_x2(map)?;
    tape.reshape(up, &[4 * hw, c])
}

fn square_side(hw: usize) -> Result<usize> {
    let side = (hw as f64).sqrt().round() as usize;
    if side * side != hw {
        return Err(Error::invalid("network", format!("{hw} tokens do not form a square map")));
    }
    Ok(side)
}

/// Concatenate, project, add the (already resized) coarser feature, then self-attend.
pub fn fuse_stage(tape: &mut Tape, global: Var, local: Var, coarser: Option<Var>, params: &FusionParams) -> Result<Var> {
    let cat = tape.concat(&[global, local], 1)?;
    let mut x = params.proj.forward(tape, cat)?;
    if let Some(c) = coarser {
        x = tape.add(x, c)?;
    }
    self_attention(tape, x, &params.attn)
}

/// Coarse-to-fine decoding; returns sigmoid maps `[H, W]`, finest first.
pub fn decode(tape: &mut Tape, fused: &[Var; STAGES], params: &[DecoderParams; STAGES], input_size: usize) -> Result<[Var; STAGES]> {
    let mut maps = [fused[0]; STAGES];
    let mut prev: Option<Var> = None;
    for s in (0..STAGES).rev() {
        let dec = &params[s];
        let [hw, c] = *tape.shape(fused[s]) else {
            return Err(Error::invalid("decode", "fused stage must be [HW, C]"));
        };
        let side = square_side(hw)?;
        let f = tape.reshape(fused[s], &[side, side, c])?;
        let x = match (prev, dec.proj) {
            (Some(p), Some(proj)) => {
                let p = proj.forward(tape, p)?;
                tape.add(p, f)?
            }
            (None, _) => f,
            (Some(_), None) => return Err(Error::invalid("decode", "missing decoder projection")),
        };
        let (w, b) = (tape.param(dec.dw_w), tape.param(dec.dw_b));
        let h = tape.depthwise_conv(x, w, b)?;
        let h = dec.norm.forward(tape, h)?;
        let h = dec.pw1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = dec.pw2.forward(tape, h)?;
        let y = tape.add(x, h)?;
        let out = tape.upsample_x2(y)?;

        let mut logit = dec.head.forward(tape, out)?;
        while tape.shape(logit)[0] < input_size {
            logit = tape.upsample_x2(logit)?;
        }
        let logit = tape.reshape(logit, &[input_size, input_size])?;
        maps[s] = tape.sigmoid(logit);
        prev = Some(out);
    }
    Ok(maps)
}

pub fn forward(tape: &mut Tape, config: &ModelConfig, params: &NetworkParams, rgb: &Tensor, depth: &Tensor) -> Result<ForwardVars> {
    let (fr, fd) = toy_encode(tape, config, params, rgb, depth)?;
    let mut global = fr.stages;
    let mut local = fr.stages;
    for s in 0..STAGES {
        let geo = config.geometry(s)?;
        let spec = config.neighborhood(s);
        let (r, d) = (fr.stages[s], fd.stages[s]);
        global[s] = sagem::sagem_forward(tape, r, d, &params.sagem[s], &geo, &spec, config.iters)?.0;
        local[s] = salrm::salrm_forward(tape, r, d, &params.salrm[s], &geo, &spec, config.iters)?.0;
    }
    let mut fused = global;
    for s in (0..STAGES).rev() {
        let coarser = match params.fusion[s].coarse {
            Some(lin) => {
                let up = upsample_tokens(tape, fused[s + 1])?;
                Some(lin.forward(tape, up)?)
            }
            None => None,
        };
        fused[s] = fuse_stage(tape, global[s], local[s], coarser, &params.fusion[s])?;
    }
    let maps = decode(tape, &fused, &params.decoder, config.input_size)?;
    Ok(ForwardVars {
        rgb: fr,
        depth: fd,
        global,
        local,
        fused,
        maps,
    })
}

/// Scalar parameter count of one encoder stream.
pub fn encoder_param_count(channels: &[usize; STAGES]) -> usize {
    let mut total = 0;
    let mut cin = 3;
    for (s, &c) in channels.iter().enumerate() {
        let k = if s == 0 { 4 } else { 2 };
        total += k * k * cin * c + c + 2 * c;
        cin = c;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageFlops {
    pub encoder: u64,
    pub sagem: sagem::FlopCount,
    pub salrm: salrm::FlopCount,
    pub fusion: u64,
    pub decoder: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.encoder + self.sagem.total() + self.salrm.total() + self.fusion + self.decoder
    }

    /// Total with SAGEM's pixel-superpixel products replaced by dense pixel-pixel ones.
    pub fn dense_total(&self) -> u64 {
        self.total() - self.sagem.attention + self.sagem.dense_attention
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub stages: [StageFlops; STAGES],
    /// `(HW, M)` per stage.
    pub sizes: [(usize, usize); STAGES],
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.stages.iter().map(StageFlops::total).sum()
    }

    pub fn dense_total(&self) -> u64 {
        self.stages.iter().map(StageFlops::dense_total).sum()
    }
}

/// Exact multiply-add flops of [`forward`] under `config`, without building it.
pub fn count_flops(config: &ModelConfig) -> Result<FlopReport> {
    config.validate()?;
    let ch = config.channels;
    let mut stages = [StageFlops::default(); STAGES];
    let mut sizes = [(0, 0); STAGES];
    for s in 0..STAGES {
        let geo = config.geometry(s)?;
        let spec = config.neighborhood(s);
        let (n, c) = (geo.n(), ch[s]);
        sizes[s] = (n, geo.m());
        let (k, cin) = if s == 0 { (4, 3) } else { (2, ch[s - 1]) };
        let encoder = 2 * 2 * (n * k * k * cin * c) as u64;
        let mut fusion = linear_flops(n, 2 * c, c) + 4 * linear_flops(n, c, c) + 2 * 2 * (n * n * c) as u64;
        let mut decoder = 2 * (DECODER_KERNEL * DECODER_KERNEL * n * c) as u64
            + FeedForward::flops(n, c)
            + linear_flops(4 * n, c, 1);
        if s + 1 < STAGES {
            fusion += linear_flops(n, ch[s + 1], c);
            decoder += linear_flops(n, ch[s + 1], c);
        }
        stages[s] = StageFlops {
            encoder,
            sagem: sagem::sagem_flops(&geo, &spec, c, config.iters),
            salrm: salrm::salrm_flops(&geo, &spec, c, config.salrm_k, config.iters),
            fusion,
            decoder,
        };
    }
    Ok(FlopReport { stages, sizes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_sides() {
        let c = ModelConfig::default();
        assert_eq!((0..4).map(|s| c.stage_side(s)).collect::<Vec<_>>(), vec![16, 8, 4, 2]);
        assert!(c.validate().is_ok());
        let bad = ModelConfig {
            input_size: 16,
            ..ModelConfig::tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encoder_count_matches_store() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        assert_eq!(encoder_param_count(&[4, 8, 16, 32]), 3060);
        assert_eq!(net.store.numel_with_prefix("enc."), 6120);
    }

    #[test]
    fn measured_flops_match_count() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let mut rng = Rng::new(1);
        let rgb = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let depth = Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng);
        let mut tape = Tape::inference(&net.store);
        let vars = net.forward(&mut tape, &rgb, &depth).unwrap();
        assert_eq!(tape.flops(), count_flops(&net.config).unwrap().total());
        for m in vars.maps {
            assert!(tape.value(m).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
