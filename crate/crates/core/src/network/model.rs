use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cst::CstLayer;
use crate::error::{shape_err, Result};
use crate::layers::{to_nchw, to_nhwc, Conv, Linear, Norm};
use crate::params::{Bound, Builder, ParamStore};
use crate::tensor::{Scalar, Var};

use super::ModelConfig;

/// Image `[N, C_in, H, W]` to tokens `[N, H/4, W/4, C]`.
#[derive(Debug, Clone)]
pub enum Embedding {
    /// Four overlapping 3x3 convs (strides 1, 2, 1, 2) with a norm after the second.
    Conv {
        convs: [Conv; 4],
        norm: Norm,
    },
    /// Non-overlapping 4x4 patches followed by a norm.
    Patch { proj: Conv, norm: Norm },
}

impl Embedding {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let (c_in, c) = (cfg.in_channels, cfg.base_dim);
        if cfg.conv_embedding {
            let h = c / 2;
            let plan = [(c_in, h, 1), (h, h, 2), (h, c, 1), (c, c, 2)];
            let mut convs = Vec::with_capacity(4);
            let mut norm = None;
            for (i, &(ci, co, stride)) in plan.iter().enumerate() {
                convs.push(Conv::build(&mut b.sub(format!("conv{}", i + 1)), ci, co, 3, stride, 1, 1, true)?);
                if i == 1 {
                    norm = Some(Norm::build(&mut b.sub("norm"), h)?);
                }
            }
            Ok(Embedding::Conv {
                convs: convs.try_into().expect("four convs"),
                norm: norm.expect("norm after second conv"),
            })
        } else {
            Ok(Embedding::Patch {
                proj: Conv::build(&mut b.sub("proj"), c_in, c, 4, 4, 0, 1, true)?,
                norm: Norm::build(&mut b.sub("norm"), c)?,
            })
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Embedding::Conv { convs, norm } => {
                let x = convs[0].forward(p, img)?.gelu()?;
                let x = convs[1].forward(p, x)?.gelu()?;
                let x = to_nchw(norm.forward(p, to_nhwc(x)?)?)?;
                let x = convs[2].forward(p, x)?.gelu()?;
                to_nhwc(convs[3].forward(p, x)?.gelu()?)
            }
            Embedding::Patch { proj, norm } => norm.forward(p, to_nhwc(proj.forward(p, img)?)?),
        }
    }
}

/// Gathers each 2x2 neighbourhood into channels: `[N, h, w, c] -> [N, h/2, w/2, 4c]`.
///
/// Channel blocks are ordered (even row, even col), (odd, even), (even, odd), (odd, odd).
pub fn space_to_depth<T: Scalar>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    let s = x.shape();
    if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(shape_err!("patch merging needs an even [N, h, w, c] map, got {s:?}"));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    x.reshape([n, h / 2, 2, w / 2, 2, c])?
        .permute(&[0, 1, 3, 4, 2, 5])?
        .reshape([n, h / 2, w / 2, 4 * c])
}

/// Spreads channel blocks over an `f x f` sub-grid: `[N, h, w, f*f*c] -> [N, f*h, f*w, c]`.
///
/// Block `(i * f + j)` lands at row offset `i`, column offset `j`.
pub fn depth_to_space<T: Scalar>(x: Var<'_, T>, factor: usize) -> Result<Var<'_, T>> {
    let s = x.shape();
    let ff = factor * factor;
    if s.len() != 4 || !s[3].is_multiple_of(ff) {
        return Err(shape_err!("depth_to_space x{factor} on {s:?}"));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3] / ff);
    x.reshape([n, h, w, factor, factor, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([n, h * factor, w * factor, c])
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub layer: CstLayer,
    /// `4c -> 2c`, no bias.
    pub merge: Linear,
}

/// Decoder up-sampling `[N, h, w, d] -> [N, 2h, 2w, d/2]`.
#[derive(Debug, Clone)]
pub enum Upsample {
    /// Norm, 2x2 stride-2 transposed conv, GELU.
    Conv { norm: Norm, deconv: Conv },
    /// Linear `d -> 2d`, 2x depth-to-space, norm.
    Expand { proj: Linear, norm: Norm },
}

impl Upsample {
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Upsample::Conv { norm, deconv } => {
                let y = deconv.forward_transposed(p, to_nchw(norm.forward(p, x)?)?)?;
                to_nhwc(y.gelu()?)
            }
            Upsample::Expand { proj, norm } => {
                norm.forward(p, depth_to_space(proj.forward(p, x)?, 2)?)
            }
        }
    }
}

/// Merges the up-sampled map with the encoder skip: `2c -> c`.
#[derive(Debug, Clone)]
pub enum SkipFusion {
    /// Two 3x3 convs with GELU.
    Conv([Conv; 2]),
    Linear(Linear),
}

impl SkipFusion {
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        up: Var<'t, T>,
        skip: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if up.shape() != skip.shape() {
            return Err(shape_err!(
                "skip fusion of {:?} with {:?}",
                up.shape(),
                skip.shape()
            ));
        }
        let x = Var::concat(&[up, skip], 3)?;
        match self {
            SkipFusion::Conv([a, b]) => {
                let y = a.forward(p, to_nchw(x)?)?.gelu()?;
                to_nhwc(b.forward(p, y)?.gelu()?)
            }
            SkipFusion::Linear(lin) => lin.forward(p, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Upsample,
    pub fuse: SkipFusion,
    pub layer: CstLayer,
}

/// 4x up-sampling and per-pixel classifier.
#[derive(Debug, Clone)]
pub struct Head {
    /// `C -> 16C`, no bias.
    pub expand: Linear,
    pub norm: Norm,
    pub classifier: Linear,
}

impl Head {
    /// `[N, h, w, C] -> [N, 4h, 4w, K]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = depth_to_space(self.expand.forward(p, x)?, 4)?;
        self.classifier.forward(p, self.norm.forward(p, x)?)
    }
}

/// The U-shaped segmentation network. Holds parameter handles only; values
/// live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CsUnet {
    pub config: ModelConfig,
    pub embed: Embedding,
    pub encoder: Vec<EncoderStage>,
    pub bottleneck: CstLayer,
    pub decoder: Vec<DecoderStage>,
    pub head: Head,
}

/// Encoder outputs.
pub struct Encoded<'t, T: Scalar> {
    pub bottleneck: Var<'t, T>,
    /// Pre-merge features, finest first.
    pub skips: Vec<Var<'t, T>>,
}

impl CsUnet {
    /// Builds the architecture and freshly initialised parameters.
    pub fn new<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(CsUnet, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut Builder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn build<T: Scalar>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<CsUnet> {
        cfg.validate()?;
        let opts = cfg.block_options();
        let m = cfg.window_size;
        let embed = Embedding::build(&mut b.sub("embed"), cfg)?;
        let mut encoder = Vec::with_capacity(cfg.stages());
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let mut sb = b.sub(format!("encoder.{s}"));
            let d = cfg.dim(s);
            encoder.push(EncoderStage {
                layer: CstLayer::build(&mut sb.sub("layer"), d, cfg.heads[s], m, depth, true, opts)?,
                merge: Linear::build(&mut sb.sub("merge"), 4 * d, 2 * d, false)?,
            });
        }
        let s = cfg.stages();
        let bottleneck = CstLayer::build(
            &mut b.sub("bottleneck"),
            cfg.dim(s),
            cfg.heads[s],
            m,
            cfg.bottleneck_depth,
            false,
            opts,
        )?;
        let mut decoder = Vec::with_capacity(s);
        for (i, stage) in (0..s).rev().enumerate() {
            let mut sb = b.sub(format!("decoder.{i}"));
            let (d, c) = (cfg.dim(stage + 1), cfg.dim(stage));
            let (up, fuse) = if cfg.use_sc {
                let up = Upsample::Conv {
                    norm: Norm::build(&mut sb.sub("up.norm"), d)?,
                    deconv: Conv::transposed(&mut sb.sub("up.deconv"), d, c, 2, 2)?,
                };
                let fuse = SkipFusion::Conv([
                    Conv::build(&mut sb.sub("fuse.conv1"), 2 * c, c, 3, 1, 1, 1, true)?,
                    Conv::build(&mut sb.sub("fuse.conv2"), c, c, 3, 1, 1, 1, true)?,
                ]);
                (up, fuse)
            } else {
                let up = Upsample::Expand {
                    proj: Linear::build(&mut sb.sub("up.proj"), d, 2 * d, false)?,
                    norm: Norm::build(&mut sb.sub("up.norm"), c)?,
                };
                (up, SkipFusion::Linear(Linear::build(&mut sb.sub("fuse"), 2 * c, c, true)?))
            };
            let layer = CstLayer::build(
                &mut sb.sub("layer"),
                c,
                cfg.heads[stage],
                m,
                cfg.depths[stage],
                true,
                opts,
            )?;
            decoder.push(DecoderStage { up, fuse, layer });
        }
        let c = cfg.base_dim;
        let head = Head {
            expand: Linear::build(&mut b.sub("head.expand"), c, 16 * c, false)?,
            norm: Norm::build(&mut b.sub("head.norm"), c)?,
            classifier: Linear::build(&mut b.sub("head.classifier"), c, cfg.num_classes, true)?,
        };
        Ok(CsUnet {
            config: cfg.clone(),
            embed,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    fn check_input<T: Scalar>(&self, img: &Var<'_, T>) -> Result<()> {
        let s = img.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2..] != c.input_size {
            return Err(shape_err!(
                "model expects [N, {}, {}, {}] input, got {s:?}; resize images to {}x{}",
                c.in_channels,
                c.input_size[0],
                c.input_size[1],
                c.input_size[0],
                c.input_size[1]
            ));
        }
        Ok(())
    }

    pub fn encode<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Encoded<'t, T>> {
        self.check_input(&img)?;
        let mut x = self.embed.forward(p, img)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            x = stage.layer.forward(p, x)?;
            skips.push(x);
            x = stage.merge.forward(p, space_to_depth(x)?)?;
        }
        Ok(Encoded {
            bottleneck: self.bottleneck.forward(p, x)?,
            skips,
        })
    }

    /// Per-pixel class scores, channels-last `[N, H, W, K]`.
    pub fn forward_nhwc<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let Encoded { bottleneck, skips } = self.encode(p, img)?;
        let mut x = bottleneck;
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = stage.up.forward(p, x)?;
            x = stage.layer.forward(p, stage.fuse.forward(p, up, *skip)?)?;
        }
        self.head.forward(p, x)
    }

    /// Logits `[N, K, H, W]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
        to_nchw(self.forward_nhwc(p, img)?)
    }
}

/// Scalar counts grouped by component (`embed`, `encoder.0`, ..., `head`),
/// in parameter order.
pub fn param_breakdown<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, t) in store.iter() {
        let mut parts = name.split('.');
        let first = parts.next().unwrap_or_default();
        let group = match first {
            "encoder" | "decoder" => format!("{first}.{}", parts.next().unwrap_or_default()),
            _ => first.to_string(),
        };
        match out.last_mut() {
            Some((g, n)) if *g == group => *n += t.numel(),
            _ => out.push((group, t.numel())),
        }
    }
    out
}
