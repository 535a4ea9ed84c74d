//! Four-stage backbone: stem, two convolutional stages, two attention stages,
//! and a pooled classifier head.

mod config;
pub mod weights;

pub use config::{EarlyStageKind, ModelConfig, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    join, Downsample, DwConvBlock, Elrf, Init, Module, RgmaBlock, Stem, TensorKind,
};
use crate::error::{config_err, Result};
use crate::graph::{Eager, Ops};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stage-level block of either family.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum StageBlock<T: Scalar = f32> {
    Elrf(Elrf<T>),
    DwConv(DwConvBlock<T>),
    Rgma(RgmaBlock<T>),
}

impl<T: Scalar> StageBlock<T> {
    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        match self {
            Self::Elrf(b) => b.forward(g, x),
            Self::DwConv(b) => b.forward(g, x),
            Self::Rgma(b) => b.forward(g, x),
        }
    }
}

impl<T: Scalar> Module<T> for StageBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        match self {
            Self::Elrf(b) => b.visit(prefix, f),
            Self::DwConv(b) => b.visit(prefix, f),
            Self::Rgma(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        match self {
            Self::Elrf(b) => b.visit_mut(prefix, f),
            Self::DwConv(b) => b.visit_mut(prefix, f),
            Self::Rgma(b) => b.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T: Scalar = f32> {
    /// Absent for the first stage, which follows the stem directly.
    pub downsample: Option<Downsample<T>>,
    pub blocks: Vec<StageBlock<T>>,
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        if let Some(d) = &self.downsample {
            d.visit(&join(prefix, "downsample"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        if let Some(d) = &mut self.downsample {
            d.visit_mut(&join(prefix, "downsample"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// Dense layer on row vectors: `x · weight + bias`, weight `in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn new<R: rand::Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::trunc_normal(&[d_in, d_out], std, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let y = g.matmul_param(x, &self.weight)?;
        g.add_row_bias(&y, &self.bias)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "weight"), &self.weight, TensorKind::Param);
        f(&join(prefix, "bias"), &self.bias, TensorKind::Param);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "weight"), &mut self.weight, TensorKind::Param);
        f(&join(prefix, "bias"), &mut self.bias, TensorKind::Param);
    }
}

/// Global average pool, optional hidden layer with GELU, class projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Scalar = f32> {
    pub hidden: Option<Linear<T>>,
    pub out: Linear<T>,
}

impl<T: Scalar> Head<T> {
    pub fn forward<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let tokens = g.flatten_spatial(x)?;
        let mut h = g.mean_rows(&tokens)?;
        if let Some(hidden) = &self.hidden {
            h = hidden.forward(g, &h)?;
            h = g.gelu(&h);
        }
        let logits = self.out.forward(g, &h)?;
        let n = g.value(&logits).len();
        g.reshape(&logits, &[n])
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        if let Some(h) = &self.hidden {
            h.visit(&join(prefix, "hidden"), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        if let Some(h) = &mut self.hidden {
            h.visit_mut(&join(prefix, "hidden"), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub stem: Stem<T>,
    pub stages: Vec<Stage<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Logits plus the output of every stage.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub stage_features: Vec<Tensor<T>>,
    /// Largest scratch footprint of one linear-attention call, in bytes
    /// (zero unless the counting allocator is installed).
    pub attention_peak_bytes: usize,
    /// Largest token count of one attention call.
    pub attention_max_tokens: usize,
    /// Attention calls that allocated beyond their linear budget.
    pub attention_budget_violations: usize,
}

/// Learnable-scalar counts, total and per top-level module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub stem: usize,
    pub stages: [usize; 4],
    pub head: usize,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with weights drawn from a ChaCha stream seeded by `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, seed, Init::default())
    }

    pub fn build_with(config: &ModelConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels;
        let r = config.ffn_expansion;
        let stem = Stem::new(config.in_channels, ch[0], init, &mut rng);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let downsample = (s > 0).then(|| Downsample::new(ch[s - 1], ch[s], init, &mut rng));
            let mut blocks = Vec::with_capacity(config.blocks[s]);
            for _ in 0..config.blocks[s] {
                let c = ch[s];
                let b = if s < 2 {
                    match config.early_stage_kind {
                        EarlyStageKind::Elrf => StageBlock::Elrf(Elrf::new(c, r, init, &mut rng)?),
                        EarlyStageKind::Conv7 => {
                            StageBlock::DwConv(DwConvBlock::new(c, 7, r, init, &mut rng)?)
                        }
                        EarlyStageKind::Conv9 => {
                            StageBlock::DwConv(DwConvBlock::new(c, 9, r, init, &mut rng)?)
                        }
                    }
                } else {
                    StageBlock::Rgma(RgmaBlock::new(
                        c,
                        config.gate_variant,
                        config.post_attn,
                        r,
                        init,
                        &mut rng,
                    )?)
                };
                blocks.push(b);
            }
            stages.push(Stage { downsample, blocks });
        }
        let c4 = ch[3];
        let std = init.weight_std;
        let head = if config.head_expansion > 0.0 {
            let hidden = crate::blocks::hidden_width(c4, config.head_expansion)?;
            Head {
                hidden: Some(Linear::new(c4, hidden, std, &mut rng)),
                out: Linear::new(hidden, config.num_classes, std, &mut rng),
            }
        } else {
            Head {
                hidden: None,
                out: Linear::new(c4, config.num_classes, std, &mut rng),
            }
        };
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            head,
        })
    }

    /// Spatial side of each stage output for a square input.
    pub fn stage_resolutions(&self, input: usize) -> [usize; 4] {
        stage_resolutions(input)
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.chw()?;
        if c != self.config.in_channels {
            return config_err(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return config_err(format!("input {h}×{w} is not divisible by 32"));
        }
        Ok(())
    }

    /// Runs the backbone under any executor, returning the four stage outputs.
    pub fn features_in<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<Vec<G::Var>> {
        self.check_input(g.value(x))?;
        let mut h = self.stem.forward(g, x)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                h = d.forward(g, &h)?;
            }
            for b in &stage.blocks {
                h = b.forward(g, &h)?;
            }
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// Logits and stage features under any executor.
    pub fn forward_in<G: Ops<T>>(&self, g: &mut G, x: &G::Var) -> Result<(G::Var, Vec<G::Var>)> {
        let feats = self.features_in(g, x)?;
        let logits = self.head.forward(g, &feats[3])?;
        Ok((logits, feats))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut g = Eager::new();
        let (logits, stage_features) = self.forward_in(&mut g, x)?;
        Ok(ForwardOutput {
            logits,
            stage_features,
            attention_peak_bytes: g.attention_peak_bytes,
            attention_max_tokens: g.attention_max_tokens,
            attention_budget_violations: g.attention_budget_violations,
        })
    }

    pub fn count_params(&self) -> ParamCount {
        let stages = std::array::from_fn(|i| self.stages[i].param_count());
        let stem = self.stem.param_count();
        let head = self.head.param_count();
        ParamCount {
            total: stem + stages.iter().sum::<usize>() + head,
            stem,
            stages,
            head,
        }
    }

    /// All named tensors in traversal order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, _| {
            out.push((name.to_string(), t.clone()))
        });
        out
    }

    pub fn block_counts(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.stages[i].blocks.len())
    }
}

/// Spatial side of each stage output for a square input of side `input`.
pub fn stage_resolutions(input: usize) -> [usize; 4] {
    [input / 4, input / 8, input / 16, input / 32]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GateVariant;
    use crate::blocks::PostAttnKind;
    use crate::error::Error;

    #[test]
    fn resolutions_and_block_counts() {
        let m = Model::<f32>::build(&ModelConfig::variant(Variant::M), 0).unwrap();
        assert_eq!(m.stage_resolutions(224), [56, 28, 14, 7]);
        let t = Model::<f32>::build(&ModelConfig::variant(Variant::T), 0).unwrap();
        assert_eq!(t.block_counts(), [2, 2, 16, 6]);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::variant(Variant::T);
        let a = Model::<f32>::build(&cfg, 9).unwrap();
        let b = Model::<f32>::build(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::<f32>::build(&cfg, 10).unwrap());
    }

    #[test]
    fn params_within_budget_and_monotone() {
        let mut last = 0;
        for v in Variant::ALL {
            let m = Model::<f32>::build(&ModelConfig::variant(v), 0).unwrap();
            let p = m.count_params();
            let reference = v.reference_params_m() * 1e6;
            let rel = (p.total as f64 - reference) / reference;
            assert!(
                rel.abs() <= 0.10,
                "{v}: {} vs {reference} ({rel:+.3})",
                p.total
            );
            assert!(p.total > last);
            last = p.total;
            assert_eq!(p.total, m.param_count());
        }
    }

    #[test]
    fn tiny_forward_scales_with_resolution() {
        let m = Model::<f64>::build(&ModelConfig::tiny(), 3).unwrap();
        let x = Tensor::<f64>::from_fn(&[3, 32, 64], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let out = m.forward(&x).unwrap();
        assert_eq!(out.logits.shape(), &[5]);
        assert!(out.logits.is_finite());
        let dims: Vec<_> = out
            .stage_features
            .iter()
            .map(|f| f.shape().to_vec())
            .collect();
        assert_eq!(
            dims,
            vec![vec![4, 8, 16], vec![4, 4, 8], vec![8, 2, 4], vec![8, 1, 2]]
        );

        let x2 = Tensor::<f64>::zeros(&[3, 64, 128]);
        let out2 = m.forward(&x2).unwrap();
        for (a, b) in out.stage_features.iter().zip(&out2.stage_features) {
            assert_eq!(b.dim(1), 2 * a.dim(1));
            assert_eq!(b.dim(2), 2 * a.dim(2));
        }
        assert!(matches!(
            m.forward(&Tensor::zeros(&[3, 48, 64])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_configs_build_and_run() {
        let x = Tensor::<f32>::from_fn(&[3, 64, 64], |i| (i % 17) as f32 / 17.0);
        for kind in [
            EarlyStageKind::Elrf,
            EarlyStageKind::Conv7,
            EarlyStageKind::Conv9,
        ] {
            for gate in GateVariant::ALL {
                for post in PostAttnKind::ALL {
                    let cfg = ModelConfig {
                        early_stage_kind: kind,
                        gate_variant: gate,
                        post_attn: post,
                        ..ModelConfig::tiny()
                    };
                    let m = Model::<f32>::build(&cfg, 0).unwrap();
                    assert!(m.forward(&x).unwrap().logits.is_finite());
                }
            }
        }
    }
}
