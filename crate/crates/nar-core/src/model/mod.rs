//! The attribute-prediction network.
//!
//! Pipeline: the raw depth row gets its learnable affine + ReLU, a stack of
//! standard pre-norm transformer blocks turns the token sequence into an
//! intermediate map H, and a cascade of aggregation/fusion blocks with
//! learnable queries shrinks H down to a single D-wide vector that a small
//! head maps to the scalar prediction.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NarError, Result};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::{Scalar, Tensor};
use crate::tokenizer::TokenSequence;

pub const HEAD_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width D; must match the encoder spec in use.
    pub token_width: usize,
    #[serde(default = "default_stage1")]
    pub n_stage1_blocks: usize,
    /// Attention heads; defaults to one head per 32 feature columns.
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    /// Query token counts per fusion stage; strictly decreasing, ending at 1.
    #[serde(default = "default_fusion")]
    pub fusion_stages: Vec<usize>,
    #[serde(default)]
    pub use_standard_block_in_fusion: bool,
    /// Hidden widths of the prediction head; the final affine to 1 is implied.
    #[serde(default)]
    pub head_hidden_sizes: Option<Vec<usize>>,
    /// Sigmoid on the output (targets normalized to [0,1]); identity otherwise.
    #[serde(default = "default_true")]
    pub sigmoid_output: bool,
}

fn default_stage1() -> usize {
    6
}

fn default_ffn_ratio() -> usize {
    4
}

fn default_fusion() -> Vec<usize> {
    vec![4, 2, 1]
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_width(192)
    }
}

impl ModelConfig {
    pub fn for_width(token_width: usize) -> Self {
        ModelConfig {
            token_width,
            n_stage1_blocks: 6,
            n_heads: None,
            ffn_ratio: 4,
            fusion_stages: vec![4, 2, 1],
            use_standard_block_in_fusion: false,
            head_hidden_sizes: None,
            sigmoid_output: true,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
            .unwrap_or_else(|| (self.token_width / HEAD_WIDTH).max(1))
    }

    pub fn head_hidden_sizes(&self) -> Vec<usize> {
        self.head_hidden_sizes
            .clone()
            .unwrap_or_else(|| vec![self.token_width])
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_width == 0 {
            return Err(NarError::InvalidSpec("token width must be positive".into()));
        }
        let heads = self.n_heads();
        if heads == 0 || !self.token_width.is_multiple_of(heads) {
            return Err(NarError::InvalidSpec(format!(
                "{heads} heads do not divide token width {}",
                self.token_width
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(NarError::InvalidSpec("ffn ratio must be positive".into()));
        }
        if self.fusion_stages.is_empty() {
            return Err(NarError::InvalidSpec("fusion stage list is empty".into()));
        }
        if *self.fusion_stages.last().unwrap() != 1 {
            return Err(NarError::InvalidSpec(
                "last fusion stage must have 1 query token".into(),
            ));
        }
        if !self.fusion_stages.windows(2).all(|w| w[0] > w[1]) {
            return Err(NarError::InvalidSpec(
                "fusion stages must be strictly decreasing".into(),
            ));
        }
        if self.head_hidden_sizes().contains(&0) {
            return Err(NarError::InvalidSpec(
                "head hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

// --- parameter containers -----------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AffineParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub wq: AffineParams<T>,
    pub wk: AffineParams<T>,
    pub wv: AffineParams<T>,
    pub wo: AffineParams<T>,
}

#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn_in: AffineParams<T>,
    pub ffn_out: AffineParams<T>,
}

/// Aggregation / fusion block: attention between different token sets, so
/// the residual wraps only the FFN.
#[derive(Debug, Clone)]
pub struct CrossBlockParams<T: Scalar> {
    pub ln_q: LayerNormParams<T>,
    pub ln_kv: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln_ffn: LayerNormParams<T>,
    pub ffn_in: AffineParams<T>,
    pub ffn_out: AffineParams<T>,
}

#[derive(Debug, Clone)]
pub struct FusionStageParams<T: Scalar> {
    /// Learnable query matrix, N_k x D.
    pub query: Tensor<T>,
    pub agg: CrossBlockParams<T>,
    pub refine: Option<BlockParams<T>>,
    pub fuse: CrossBlockParams<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub depth_proj: AffineParams<T>,
    pub stage1: Vec<BlockParams<T>>,
    pub fusion: Vec<FusionStageParams<T>>,
    pub head: Vec<AffineParams<T>>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn unit(d: usize) -> Self {
        let mut gain = Tensor::new(1, d, vec![T::one(); d]).unwrap();
        gain.requires_grad = true;
        LayerNormParams {
            gain,
            bias: Tensor::zeros(1, d).with_grad(),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> AffineParams<T> {
    fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        let mut w = Tensor::new(fan_in, fan_out, data).unwrap();
        w.requires_grad = true;
        AffineParams {
            w,
            b: Tensor::zeros(1, fan_out).with_grad(),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl<T: Scalar> AttentionParams<T> {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        AttentionParams {
            wq: AffineParams::xavier(rng, d, d),
            wk: AffineParams::xavier(rng, d, d),
            wv: AffineParams::xavier(rng, d, d),
            wo: AffineParams::xavier(rng, d, d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
    }
}

impl<T: Scalar> BlockParams<T> {
    fn init(rng: &mut ChaCha8Rng, d: usize, ffn_ratio: usize) -> Self {
        BlockParams {
            ln1: LayerNormParams::unit(d),
            attn: AttentionParams::init(rng, d),
            ln2: LayerNormParams::unit(d),
            ffn_in: AffineParams::xavier(rng, d, d * ffn_ratio),
            ffn_out: AffineParams::xavier(rng, d * ffn_ratio, d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.ffn_in.visit_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{prefix}.ffn_out"), f);
    }
}

impl<T: Scalar> CrossBlockParams<T> {
    fn init(rng: &mut ChaCha8Rng, d: usize, ffn_ratio: usize) -> Self {
        CrossBlockParams {
            ln_q: LayerNormParams::unit(d),
            ln_kv: LayerNormParams::unit(d),
            attn: AttentionParams::init(rng, d),
            ln_ffn: LayerNormParams::unit(d),
            ffn_in: AffineParams::xavier(rng, d, d * ffn_ratio),
            ffn_out: AffineParams::xavier(rng, d * ffn_ratio, d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.ln_q.visit(&format!("{prefix}.ln_q"), f);
        self.ln_kv.visit(&format!("{prefix}.ln_kv"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln_ffn.visit(&format!("{prefix}.ln_ffn"), f);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.ln_q.visit_mut(&format!("{prefix}.ln_q"), f);
        self.ln_kv.visit_mut(&format!("{prefix}.ln_kv"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln_ffn.visit_mut(&format!("{prefix}.ln_ffn"), f);
        self.ffn_in.visit_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{prefix}.ffn_out"), f);
    }
}

impl<T: Scalar> FusionStageParams<T> {
    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.query"), &self.query);
        self.agg.visit(&format!("{prefix}.agg"), f);
        if let Some(refine) = &self.refine {
            refine.visit(&format!("{prefix}.refine"), f);
        }
        self.fuse.visit(&format!("{prefix}.fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.query"), &mut self.query);
        self.agg.visit_mut(&format!("{prefix}.agg"), f);
        if let Some(refine) = &mut self.refine {
            refine.visit_mut(&format!("{prefix}.refine"), f);
        }
        self.fuse.visit_mut(&format!("{prefix}.fuse"), f);
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: Xavier-uniform affines, unit layer norms, and
    /// queries drawn from N(0, 0.02^2).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.token_width;
        let depth_proj = AffineParams::xavier(&mut rng, d, d);
        let stage1 = (0..cfg.n_stage1_blocks)
            .map(|_| BlockParams::init(&mut rng, d, cfg.ffn_ratio))
            .collect();
        let fusion = cfg
            .fusion_stages
            .iter()
            .map(|&n_k| {
                let data = (0..n_k * d)
                    .map(|_| T::from_f64(normal(&mut rng) * 0.02))
                    .collect();
                let mut query = Tensor::new(n_k, d, data).unwrap();
                query.requires_grad = true;
                FusionStageParams {
                    query,
                    agg: CrossBlockParams::init(&mut rng, d, cfg.ffn_ratio),
                    refine: cfg
                        .use_standard_block_in_fusion
                        .then(|| BlockParams::init(&mut rng, d, cfg.ffn_ratio)),
                    fuse: CrossBlockParams::init(&mut rng, d, cfg.ffn_ratio),
                }
            })
            .collect();
        let mut head = Vec::new();
        let mut width = d;
        for h in cfg.head_hidden_sizes() {
            head.push(AffineParams::xavier(&mut rng, width, h));
            width = h;
        }
        head.push(AffineParams::xavier(&mut rng, width, 1));
        Ok(ModelParams {
            depth_proj,
            stage1,
            fusion,
            head,
        })
    }

    /// Visits every tensor with a stable name, in a fixed order shared with
    /// [`bind`].
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        self.depth_proj.visit("depth_proj", f);
        for (i, b) in self.stage1.iter().enumerate() {
            b.visit(&format!("stage1.{i}"), f);
        }
        for (k, s) in self.fusion.iter().enumerate() {
            s.visit(&format!("fusion.{k}"), f);
        }
        for (i, a) in self.head.iter().enumerate() {
            a.visit(&format!("head.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        self.depth_proj.visit_mut("depth_proj", f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_mut(&format!("stage1.{i}"), f);
        }
        for (k, s) in self.fusion.iter_mut().enumerate() {
            s.visit_mut(&format!("fusion.{k}"), f);
        }
        for (i, a) in self.head.iter_mut().enumerate() {
            a.visit_mut(&format!("head.{i}"), f);
        }
    }

    pub fn n_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    pub fn n_values(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// --- tape binding ---------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BoundLn {
    gain: Var,
    bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    w: Var,
    b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttn {
    wq: BoundAffine,
    wk: BoundAffine,
    wv: BoundAffine,
    wo: BoundAffine,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    ln1: BoundLn,
    attn: BoundAttn,
    ln2: BoundLn,
    ffn_in: BoundAffine,
    ffn_out: BoundAffine,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCross {
    ln_q: BoundLn,
    ln_kv: BoundLn,
    attn: BoundAttn,
    ln_ffn: BoundLn,
    ffn_in: BoundAffine,
    ffn_out: BoundAffine,
}

#[derive(Debug, Clone)]
pub struct BoundStage {
    query: Var,
    agg: BoundCross,
    refine: Option<BoundBlock>,
    fuse: BoundCross,
}

/// Model parameters bound as tape leaves. `flat` lists every leaf in the
/// same order [`ModelParams::visit`] produces, which is what aligns
/// per-sample gradients with the optimizer state.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub flat: Vec<Var>,
    depth_proj: BoundAffine,
    stage1: Vec<BoundBlock>,
    fusion: Vec<BoundStage>,
    head: Vec<BoundAffine>,
}

struct Binder<'t, 'p, T: Scalar> {
    tape: &'t mut Tape<'p, T>,
    flat: Vec<Var>,
}

impl<'t, 'p, T: Scalar> Binder<'t, 'p, T> {
    fn leaf(&mut self, t: &'p Tensor<T>) -> Result<Var> {
        let v = self.tape.leaf(t)?;
        self.flat.push(v);
        Ok(v)
    }

    fn ln(&mut self, p: &'p LayerNormParams<T>) -> Result<BoundLn> {
        Ok(BoundLn {
            gain: self.leaf(&p.gain)?,
            bias: self.leaf(&p.bias)?,
        })
    }

    fn affine(&mut self, p: &'p AffineParams<T>) -> Result<BoundAffine> {
        Ok(BoundAffine {
            w: self.leaf(&p.w)?,
            b: self.leaf(&p.b)?,
        })
    }

    fn attn(&mut self, p: &'p AttentionParams<T>) -> Result<BoundAttn> {
        Ok(BoundAttn {
            wq: self.affine(&p.wq)?,
            wk: self.affine(&p.wk)?,
            wv: self.affine(&p.wv)?,
            wo: self.affine(&p.wo)?,
        })
    }

    fn block(&mut self, p: &'p BlockParams<T>) -> Result<BoundBlock> {
        Ok(BoundBlock {
            ln1: self.ln(&p.ln1)?,
            attn: self.attn(&p.attn)?,
            ln2: self.ln(&p.ln2)?,
            ffn_in: self.affine(&p.ffn_in)?,
            ffn_out: self.affine(&p.ffn_out)?,
        })
    }

    fn cross(&mut self, p: &'p CrossBlockParams<T>) -> Result<BoundCross> {
        Ok(BoundCross {
            ln_q: self.ln(&p.ln_q)?,
            ln_kv: self.ln(&p.ln_kv)?,
            attn: self.attn(&p.attn)?,
            ln_ffn: self.ln(&p.ln_ffn)?,
            ffn_in: self.affine(&p.ffn_in)?,
            ffn_out: self.affine(&p.ffn_out)?,
        })
    }
}

/// Binds every parameter tensor onto the tape as a borrowed leaf.
pub fn bind<'p, T: Scalar>(
    tape: &mut Tape<'p, T>,
    params: &'p ModelParams<T>,
) -> Result<BoundParams> {
    let mut b = Binder {
        tape,
        flat: Vec::new(),
    };
    let depth_proj = b.affine(&params.depth_proj)?;
    let mut stage1 = Vec::with_capacity(params.stage1.len());
    for block in &params.stage1 {
        stage1.push(b.block(block)?);
    }
    let mut fusion = Vec::with_capacity(params.fusion.len());
    for stage in &params.fusion {
        let query = b.leaf(&stage.query)?;
        let agg = b.cross(&stage.agg)?;
        let refine = match &stage.refine {
            Some(r) => Some(b.block(r)?),
            None => None,
        };
        let fuse = b.cross(&stage.fuse)?;
        fusion.push(BoundStage {
            query,
            agg,
            refine,
            fuse,
        });
    }
    let mut head = Vec::with_capacity(params.head.len());
    for a in &params.head {
        head.push(b.affine(a)?);
    }
    Ok(BoundParams {
        flat: b.flat,
        depth_proj,
        stage1,
        fusion,
        head,
    })
}

// --- forward pass -----------------------------------------------------------

fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, ln: &BoundLn) -> Result<Var> {
    let n = tape.layer_norm_rows(x)?;
    let g = tape.mul_rowvec(n, ln.gain)?;
    tape.add_rowvec(g, ln.bias)
}

fn mha<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    attn: &BoundAttn,
    n_heads: usize,
) -> Result<Var> {
    let qp = tape.affine(q, attn.wq.w, attn.wq.b)?;
    let kp = tape.affine(k, attn.wk.w, attn.wk.b)?;
    let vp = tape.affine(v, attn.wv.w, attn.wv.b)?;
    let mixed = tape.scaled_dot_attention(qp, kp, vp, n_heads)?;
    tape.affine(mixed, attn.wo.w, attn.wo.b)
}

fn ffn<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    fin: &BoundAffine,
    fout: &BoundAffine,
) -> Result<Var> {
    let h = tape.affine(x, fin.w, fin.b)?;
    let h = tape.relu(h)?;
    tape.affine(h, fout.w, fout.b)
}

/// Standard pre-norm transformer block with residuals around both halves.
fn standard_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    block: &BoundBlock,
    n_heads: usize,
) -> Result<Var> {
    let xn = layer_norm(tape, x, &block.ln1)?;
    let a = mha(tape, xn, xn, xn, &block.attn, n_heads)?;
    let h = tape.add(x, a)?;
    let hn = layer_norm(tape, h, &block.ln2)?;
    let f = ffn(tape, hn, &block.ffn_in, &block.ffn_out)?;
    tape.add(h, f)
}

/// Cross-attention block: the query token count differs from the key/value
/// count, so only the FFN keeps a residual.
fn cross_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q_tokens: Var,
    kv: Var,
    cb: &BoundCross,
    n_heads: usize,
) -> Result<Var> {
    let qn = layer_norm(tape, q_tokens, &cb.ln_q)?;
    let kvn = layer_norm(tape, kv, &cb.ln_kv)?;
    let a = mha(tape, qn, kvn, kvn, &cb.attn, n_heads)?;
    let an = layer_norm(tape, a, &cb.ln_ffn)?;
    let f = ffn(tape, an, &cb.ffn_in, &cb.ffn_out)?;
    tape.add(a, f)
}

/// Stage-1 transformer stack producing the intermediate token map H.
pub fn stage1_hidden<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for block in &bound.stage1 {
        h = standard_block(tape, h, block, cfg.n_heads())?;
    }
    Ok(h)
}

/// Runs every fusion stage and returns each stage's output (the last one is
/// the 1 x D representation). Stage k attends with its learnable query over
/// the previous stage's output, optionally refines, then re-attends over
/// the original H.
pub fn fuse_stages<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    h: Var,
) -> Result<Vec<Var>> {
    if bound.fusion.is_empty() {
        return Err(NarError::InvalidSpec("fusion stage list is empty".into()));
    }
    let heads = cfg.n_heads();
    let mut outputs = Vec::with_capacity(bound.fusion.len());
    let mut kv = h;
    for stage in &bound.fusion {
        let agg = cross_block(tape, stage.query, kv, &stage.agg, heads)?;
        let refined = match &stage.refine {
            Some(block) => standard_block(tape, agg, block, heads)?,
            None => agg,
        };
        let fused = cross_block(tape, refined, h, &stage.fuse, heads)?;
        outputs.push(fused);
        kv = fused;
    }
    Ok(outputs)
}

/// Cascades the fusion stages down to the single-token representation e.
pub fn multi_stage_fuse<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    h: Var,
) -> Result<Var> {
    let outputs = fuse_stages(tape, bound, cfg, h)?;
    let e = *outputs.last().unwrap();
    let (rows, _) = tape.dims(e);
    debug_assert_eq!(rows, 1);
    Ok(e)
}

/// Binds a token sequence (always tokenized in f64) as a non-trainable leaf.
pub fn tokens_leaf<'p, T: Scalar>(tape: &mut Tape<'p, T>, tokens: &TokenSequence) -> Result<Var> {
    let data = tokens.as_slice().iter().map(|&v| T::from_f64(v)).collect();
    tape.leaf_owned(tokens.rows(), tokens.cols(), data, false)
}

/// Full forward pass: depth-token projection, stage-1 blocks, multi-stage
/// fusion, prediction head. Returns the scalar prediction node.
pub fn forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    tokens: Var,
) -> Result<Var> {
    let (rows, width) = tape.dims(tokens);
    if width != cfg.token_width {
        return Err(NarError::ShapeMismatch {
            op: "forward",
            detail: format!("token width {width} vs model width {}", cfg.token_width),
        });
    }
    if rows < 3 {
        return Err(NarError::ShapeMismatch {
            op: "forward",
            detail: format!("need at least 3 rows (1 node + end + depth), got {rows}"),
        });
    }
    let main = tape.slice_rows(tokens, 0, rows - 1)?;
    let dep_raw = tape.slice_rows(tokens, rows - 1, rows)?;
    let dep_aff = tape.affine(dep_raw, bound.depth_proj.w, bound.depth_proj.b)?;
    let dep = tape.relu(dep_aff)?;
    let x = tape.concat_rows(&[main, dep])?;

    let h = stage1_hidden(tape, bound, cfg, x)?;
    let e = multi_stage_fuse(tape, bound, cfg, h)?;

    let mut y = e;
    let last = bound.head.len() - 1;
    for (i, layer) in bound.head.iter().enumerate() {
        y = tape.affine(y, layer.w, layer.b)?;
        if i < last {
            y = tape.relu(y)?;
        }
    }
    if cfg.sigmoid_output {
        y = tape.sigmoid(y)?;
    }
    Ok(y)
}

/// Inference convenience: one architecture in, one prediction out.
pub fn predict_one<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
) -> Result<f64> {
    let mut tape: Tape<'_, T> = Tape::inference();
    let bound = bind(&mut tape, params)?;
    let t = tokens_leaf(&mut tape, tokens)?;
    let y = forward(&mut tape, &bound, cfg, t)?;
    let v = tape.scalar_value(y)?;
    if !v.is_finite() {
        return Err(NarError::NonFinite { op: "forward" });
    }
    Ok(v.to_f64())
}
