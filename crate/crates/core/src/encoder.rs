//! Image encoder: residual trunk at output stride 16, dilated context module,
//! compression, ×2 bilinear upsampling and a stride-8 skip.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::{Conv, ConvNormRelu, Init, Mode, NormKind};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Width of the first stage; stage `i` has `base_channels << i` channels.
    pub base_channels: usize,
    pub stage_strides: Vec<usize>,
    /// Residual blocks after each strided convolution.
    pub stage_blocks: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub global_pool: bool,
    pub embed_channels: usize,
    pub norm: NormKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            stage_strides: vec![2, 2, 2, 2],
            stage_blocks: 1,
            aspp_rates: vec![1, 2, 3],
            aspp_channels: 32,
            global_pool: true,
            embed_channels: 64,
            norm: NormKind::default(),
        }
    }
}

impl EncoderConfig {
    /// Full-scale widths for 473 px crops.
    pub fn full_scale() -> Self {
        Self {
            base_channels: 64,
            stage_blocks: 3,
            aspp_rates: vec![1, 6, 12, 18],
            aspp_channels: 256,
            embed_channels: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_channels == 0 || self.base_channels == 0 || self.aspp_channels == 0 {
            return bad("encoder widths must be positive".into());
        }
        if self.stage_strides.iter().product::<usize>() != 16 || self.stage_strides.contains(&0) {
            return bad(format!("stage strides {:?} must multiply to 16", self.stage_strides));
        }
        if self.skip_stage().is_none() {
            return bad(format!("no stage of {:?} ends at stride 8", self.stage_strides));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad(format!("aspp rates {:?}", self.aspp_rates));
        }
        Ok(())
    }

    /// Index of the stage whose output is the stride-8 skip tap.
    pub fn skip_stage(&self) -> Option<usize> {
        let mut s = 1;
        self.stage_strides.iter().position(|&st| {
            s *= st;
            s == 8
        })
    }

    pub fn stage_width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Spatial side of `h_I` for a `K × K` input.
    ///
    /// Every strided layer is a 3×3 convolution with padding 1, whose output
    /// length is `floor((L + 2 - 3) / s) + 1 = ceil(L / s)`. Nested ceilings of
    /// exact divisions collapse, so the stride-8 tap has side `ceil(K / 8)`, and
    /// the upsampled context features are resized to exactly that side.
    pub fn output_size(&self, k: usize) -> usize {
        k.div_ceil(8)
    }
}

#[derive(Clone, Debug)]
struct Residual {
    a: ConvNormRelu,
    b_conv: Conv,
    b_norm: crate::nn::Norm,
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvNormRelu,
    blocks: Vec<Residual>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stages: Vec<Stage>,
    aspp: Vec<ConvNormRelu>,
    global: Option<Conv>,
    compress: ConvNormRelu,
    skip: Conv,
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer.to_string()))
    }
}

impl Encoder {
    pub fn new<T: Scalar>(init: &mut Init<T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let norm = config.norm;
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &stride) in config.stage_strides.iter().enumerate() {
            let w = config.stage_width(i);
            let geom = ConvGeom { stride, pad: 1, dilation: 1 };
            let down = ConvNormRelu::new(init, &format!("encoder.stage{i}.down"), cin, w, 3, geom, norm);
            let blocks = (0..config.stage_blocks)
                .map(|b| {
                    let name = format!("encoder.stage{i}.block{b}");
                    Residual {
                        a: ConvNormRelu::new(init, &format!("{name}.a"), w, w, 3, ConvGeom::same3(1), norm),
                        b_conv: Conv::new(init, &format!("{name}.b.conv"), w, w, 3, ConvGeom::same3(1), matches!(norm, NormKind::None)),
                        b_norm: crate::nn::Norm::new(init, &format!("{name}.b.norm"), w, norm),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
            cin = w;
        }
        let deep = cin;
        let ac = config.aspp_channels;
        let aspp = config
            .aspp_rates
            .iter()
            .map(|&r| {
                let (k, geom) = (3, ConvGeom::same3(r));
                ConvNormRelu::new(init, &format!("encoder.aspp.rate{r}"), deep, ac, k, geom, norm)
            })
            .collect();
        let global = config
            .global_pool
            .then(|| Conv::new(init, "encoder.aspp.global", deep, ac, 1, ConvGeom::PLAIN, true));
        let branches = config.aspp_rates.len() + usize::from(config.global_pool);
        let c = config.embed_channels;
        let compress = ConvNormRelu::new(init, "encoder.compress", ac * branches, c, 1, ConvGeom::PLAIN, norm);
        let tap = config.stage_width(config.skip_stage().expect("validated"));
        let skip = Conv::new(init, "encoder.skip", tap, c, 1, ConvGeom::PLAIN, true);
        Ok(Self { config: config.clone(), stages, aspp, global, compress, skip })
    }

    /// Parallel dilated branches plus the optional global branch, concatenated
    /// and projected to the embedding width.
    pub fn context_module<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let [_, _, h, w] = g.value(x).shape();
        let mut outs = Vec::new();
        for branch in &self.aspp {
            outs.push(branch.forward(g, store, x, mode)?);
        }
        if let Some(global) = &self.global {
            let pooled = g.spatial_mean(x);
            let y = global.forward(g, store, pooled)?;
            let y = g.relu(y);
            outs.push(g.resize(y, h, w));
        }
        let cat = g.concat(&outs)?;
        self.compress.forward(g, store, cat, mode)
    }

    /// `x` is `[n, 3, K, K]`; returns `h_I` as `[n, c, k, k]`.
    pub fn encode_image<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let tap_stage = self.config.skip_stage().expect("validated");
        let mut y = x;
        let mut tap = None;
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.down.forward(g, store, y, mode)?;
            for block in &stage.blocks {
                let a = block.a.forward(g, store, y, mode)?;
                let b = block.b_conv.forward(g, store, a)?;
                let b = block.b_norm.forward(g, store, b, mode)?;
                let s = g.add(y, b)?;
                y = g.relu(s);
            }
            check_finite(g, y, &format!("encoder.stage{i}"))?;
            if i == tap_stage {
                tap = Some(y);
            }
        }
        let tap = tap.expect("validated");
        let ctx = self.context_module(g, store, y, mode)?;
        check_finite(g, ctx, "encoder.context")?;
        let [_, _, th, tw] = g.value(tap).shape();
        let up = g.resize(ctx, th, tw);
        let skip = self.skip.forward(g, store, tap)?;
        let out = g.add(up, skip)?;
        check_finite(g, out, "encoder.output")?;
        Ok(out)
    }
}
