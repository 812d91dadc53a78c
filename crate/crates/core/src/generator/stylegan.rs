//! Style-based generator (StyleGAN2 config-f layout) for pretrained weights.
//!
//! Tensor names follow the widely used PyTorch port's `g_ema` state dict:
//! `style.{1..n_mlp}.{weight,bias}`, `input.input`, `conv1.*`, `to_rgb1.*`,
//! `convs.{i}.*`, `to_rgbs.{i}.*`, `noises.noise_{i}`. Noise inputs are the
//! fixed buffers from the checkpoint, so synthesis is deterministic.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis, Ix1, Ix2, IxDyn};

use super::{Synthesis, LATENT_ROWS};
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{self, expect_shape, Checkpoint, Manifest, ParamMap};
use crate::error::{Error, Result};

pub const STYLEGAN2_FORMAT: &str = "stylegan2";

const LRELU_SLOPE: f64 = 0.2;
const MAPPING_LR_MUL: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct StyleGan2Config {
    pub resolution: usize,
    pub style_dim: usize,
    pub n_mlp: usize,
    /// Channels at resolutions 4, 8, …, `resolution`.
    pub channels: Vec<usize>,
}

impl StyleGan2Config {
    /// Default channel table with a channel multiplier (2 for config-f).
    pub fn standard(resolution: usize, channel_multiplier: usize) -> Result<Self> {
        let log = log2_exact(resolution)?;
        let channels = (2..=log)
            .map(|l| match 1usize << l {
                4..=32 => 512,
                64 => 256 * channel_multiplier,
                128 => 128 * channel_multiplier,
                256 => 64 * channel_multiplier,
                512 => 32 * channel_multiplier,
                _ => 16 * channel_multiplier,
            })
            .collect();
        Ok(StyleGan2Config { resolution, style_dim: 512, n_mlp: 8, channels })
    }

    pub fn n_latent(&self) -> usize {
        2 * log2_exact(self.resolution).unwrap_or(0) - 2
    }

    fn from_manifest(m: &Manifest) -> Result<Self> {
        let resolution: usize = m.parse_key("resolution")?;
        let mut cfg = StyleGan2Config::standard(resolution, m.parse_or("channel_multiplier", 2)?)?;
        cfg.style_dim = m.parse_or("latent_width", 512)?;
        cfg.n_mlp = m.parse_or("n_mlp", 8)?;
        if let Some(ch) = m.parse_list::<usize>("channels")? {
            if ch.len() != cfg.channels.len() {
                return Err(Error::VersionMismatch(format!(
                    "`channels` lists {} entries, resolution {resolution} needs {}",
                    ch.len(),
                    cfg.channels.len()
                )));
            }
            cfg.channels = ch;
        }
        let rows: usize = m.parse_or("latent_rows", LATENT_ROWS)?;
        if cfg.n_latent() != LATENT_ROWS || rows != LATENT_ROWS {
            return Err(Error::VersionMismatch(format!(
                "resolution {resolution} gives {} latent rows; this toolkit works on {LATENT_ROWS}",
                cfg.n_latent()
            )));
        }
        Ok(cfg)
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(STYLEGAN2_FORMAT, 1);
        m.set("resolution", self.resolution);
        m.set("latent_rows", self.n_latent());
        m.set("latent_width", self.style_dim);
        m.set("n_mlp", self.n_mlp);
        m.set(
            "channels",
            self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        m
    }

    /// Tensor names and shapes expected in a checkpoint.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let sd = self.style_dim;
        let mut out = Vec::new();
        for l in 1..=self.n_mlp {
            out.push((format!("style.{l}.weight"), vec![sd, sd]));
            out.push((format!("style.{l}.bias"), vec![sd]));
        }
        let c4 = self.channels[0];
        out.push(("input.input".into(), vec![1, c4, 4, 4]));
        let styled = |out: &mut Vec<(String, Vec<usize>)>, p: &str, cin: usize, cout: usize| {
            out.push((format!("{p}.conv.weight"), vec![1, cout, cin, 3, 3]));
            out.push((format!("{p}.conv.modulation.weight"), vec![cin, sd]));
            out.push((format!("{p}.conv.modulation.bias"), vec![cin]));
            out.push((format!("{p}.noise.weight"), vec![1]));
            out.push((format!("{p}.activate.bias"), vec![cout]));
        };
        let rgb = |out: &mut Vec<(String, Vec<usize>)>, p: &str, cin: usize| {
            out.push((format!("{p}.conv.weight"), vec![1, 3, cin, 1, 1]));
            out.push((format!("{p}.conv.modulation.weight"), vec![cin, sd]));
            out.push((format!("{p}.conv.modulation.bias"), vec![cin]));
            out.push((format!("{p}.bias"), vec![1, 3, 1, 1]));
        };
        styled(&mut out, "conv1", c4, c4);
        rgb(&mut out, "to_rgb1", c4);
        for (i, pair) in self.channels.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            styled(&mut out, &format!("convs.{}", 2 * i), cin, cout);
            styled(&mut out, &format!("convs.{}", 2 * i + 1), cout, cout);
            rgb(&mut out, &format!("to_rgbs.{i}"), cout);
        }
        for layer in 0..self.n_latent() - 1 {
            let res = 1usize << ((layer + 5) / 2);
            out.push((format!("noises.noise_{layer}"), vec![1, 1, res, res]));
        }
        out
    }
}

fn log2_exact(r: usize) -> Result<usize> {
    if r < 4 || !r.is_power_of_two() {
        return Err(Error::VersionMismatch(format!("resolution {r} is not a power of two ≥ 4")));
    }
    Ok(r.trailing_zeros() as usize)
}

/// Prepared modulated-convolution layer.
struct ModConv {
    /// `out × in × k × k`, equalized-lr scale applied; flipped for upsampling.
    weight: Arc<Tensor>,
    /// `in × out` sums of squared scaled weights, for demodulation.
    weight_sq: Arc<Tensor>,
    mod_weight: Arc<Tensor>,
    mod_bias: Arc<Tensor>,
    kernel: usize,
    upsample: bool,
    demodulate: bool,
}

struct StyledLayer {
    conv: ModConv,
    /// `noise.weight * noise buffer`, broadcast over channels at run time.
    noise: Arc<Tensor>,
    bias: Arc<Tensor>,
    channels: usize,
}

struct RgbLayer {
    conv: ModConv,
    bias: Arc<Tensor>,
}

pub struct StyleGan2 {
    cfg: StyleGan2Config,
    mapping: Vec<(Array2<f64>, Array1<f64>)>,
    input: Arc<Tensor>,
    convs: Vec<StyledLayer>,
    rgbs: Vec<RgbLayer>,
    blur: Array2<f64>,
}

fn blur_kernel(gain: f64) -> Array2<f64> {
    let k = [1.0, 3.0, 3.0, 1.0];
    Array2::from_shape_fn((4, 4), |(i, j)| k[i] * k[j] / 64.0 * gain)
}

impl ModConv {
    fn new(ck: &Checkpoint, prefix: &str, style_dim: usize, upsample: bool, demodulate: bool) -> Result<Self> {
        let w = ck.tensor(&format!("{prefix}.weight"))?;
        let s = w.shape().to_vec();
        let (cout, cin, k) = (s[1], s[2], s[3]);
        let scale = 1.0 / ((cin * k * k) as f64).sqrt();
        let mut w4 = w
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
            .map_err(|e| Error::CorruptWeights(e.to_string()))?
            .mapv(|v| v * scale);
        let sq = w4
            .mapv(|v| v * v)
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .reversed_axes()
            .as_standard_layout()
            .into_owned();
        if upsample {
            w4.invert_axis(Axis(2));
            w4.invert_axis(Axis(3));
            w4 = w4.as_standard_layout().into_owned();
        }
        let mod_scale = 1.0 / (style_dim as f64).sqrt();
        let mod_weight = ck.tensor(&format!("{prefix}.modulation.weight"))?.mapv(|v| v * mod_scale);
        Ok(ModConv {
            weight: Arc::new(w4),
            weight_sq: Arc::new(sq.into_dyn()),
            mod_weight: Arc::new(mod_weight),
            mod_bias: ck.tensor(&format!("{prefix}.modulation.bias"))?,
            kernel: k,
            upsample,
            demodulate,
        })
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, style: Var<'t>, blur: &Array2<f64>) -> Var<'t> {
        let s = style.linear(
            tape.constant_arc(self.mod_weight.clone()),
            Some(tape.constant_arc(self.mod_bias.clone())),
        );
        let xm = x.scale_channels(s);
        let w = tape.constant_arc(self.weight.clone());
        let mut y = if self.upsample {
            let p = self.kernel - 1;
            xm.zero_upsample2()
                .pad2d(p, p - 1, p, p - 1)
                .conv2d(w, 1, 0)
                .pad2d(1, 1, 1, 1)
                .depthwise_fir(blur)
        } else {
            xm.conv2d(w, 1, self.kernel / 2)
        };
        if self.demodulate {
            let d = s
                .square()
                .matmul(tape.constant_arc(self.weight_sq.clone()))
                .add_scalar(1e-8)
                .powf(-0.5);
            y = y.scale_channels(d);
        }
        y
    }
}

impl StyleGan2 {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = checkpoint::read_checkpoint(path, STYLEGAN2_FORMAT, 1)?;
        let cfg = StyleGan2Config::from_manifest(&ck.manifest)?;
        let g = Self::from_checkpoint(&ck, cfg)?;
        Ok((g, ck.id))
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: StyleGan2Config) -> Result<Self> {
        for (name, shape) in cfg.expected_tensors() {
            expect_shape(&name, &*ck.tensor(&name)?, &shape)?;
        }
        let sd = cfg.style_dim;
        let lin_scale = MAPPING_LR_MUL / (sd as f64).sqrt();
        let mapping = (1..=cfg.n_mlp)
            .map(|l| {
                let w = ck.tensor(&format!("style.{l}.weight"))?;
                let b = ck.tensor(&format!("style.{l}.bias"))?;
                Ok((
                    w.view().into_dimensionality::<Ix2>().unwrap().mapv(|v| v * lin_scale),
                    b.view().into_dimensionality::<Ix1>().unwrap().mapv(|v| v * MAPPING_LR_MUL),
                ))
            })
            .collect::<Result<Vec<_>>>()?;

        let styled = |prefix: &str, upsample: bool, noise_idx: usize| -> Result<StyledLayer> {
            let conv = ModConv::new(ck, &format!("{prefix}.conv"), sd, upsample, true)?;
            let nw = *ck.tensor(&format!("{prefix}.noise.weight"))?.iter().next().unwrap();
            let noise = ck.tensor(&format!("noises.noise_{noise_idx}"))?.mapv(|v| v * nw);
            let bias = ck.tensor(&format!("{prefix}.activate.bias"))?;
            Ok(StyledLayer { channels: bias.len(), conv, noise: Arc::new(noise), bias })
        };
        let rgb = |prefix: &str| -> Result<RgbLayer> {
            let conv = ModConv::new(ck, &format!("{prefix}.conv"), sd, false, false)?;
            let bias = ck.tensor(&format!("{prefix}.bias"))?;
            let bias = Arc::new(bias.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[3])).unwrap());
            Ok(RgbLayer { conv, bias })
        };

        let mut convs = vec![styled("conv1", false, 0)?];
        let mut rgbs = vec![rgb("to_rgb1")?];
        for i in 0..cfg.channels.len() - 1 {
            convs.push(styled(&format!("convs.{}", 2 * i), true, 2 * i + 1)?);
            convs.push(styled(&format!("convs.{}", 2 * i + 1), false, 2 * i + 2)?);
            rgbs.push(rgb(&format!("to_rgbs.{i}"))?);
        }
        Ok(StyleGan2 {
            input: ck.tensor("input.input")?,
            cfg,
            mapping,
            convs,
            rgbs,
            blur: blur_kernel(4.0),
        })
    }

    pub fn config(&self) -> &StyleGan2Config {
        &self.cfg
    }

    fn styled_forward<'t>(&self, tape: &'t Tape, layer: &StyledLayer, x: Var<'t>, style: Var<'t>) -> Var<'t> {
        let y = layer.conv.forward(tape, x, style, &self.blur);
        let shape = y.shape();
        let noise = layer
            .noise
            .broadcast(IxDyn(&[1, layer.channels, shape[2], shape[3]]))
            .expect("noise buffer matches layer resolution")
            .to_owned();
        y.add_const(&noise)
            .add_channel_bias(tape.constant_arc(layer.bias.clone()))
            .leaky_relu(LRELU_SLOPE)
            .scale(std::f64::consts::SQRT_2)
    }

    fn rgb_forward<'t>(&self, tape: &'t Tape, layer: &RgbLayer, x: Var<'t>, style: Var<'t>, skip: Option<Var<'t>>) -> Var<'t> {
        let y = layer
            .conv
            .forward(tape, x, style, &self.blur)
            .add_channel_bias(tape.constant_arc(layer.bias.clone()));
        match skip {
            None => y,
            Some(s) => y.add(s.zero_upsample2().pad2d(2, 1, 2, 1).depthwise_fir(&self.blur)),
        }
    }
}

impl Synthesis for StyleGan2 {
    fn resolution(&self) -> usize {
        self.cfg.resolution
    }

    fn latent_width(&self) -> usize {
        self.cfg.style_dim
    }

    fn map_noise(&self, z: &[f64]) -> Array2<f64> {
        let mut x = Array1::from(z.to_vec());
        let norm = (x.mapv(|v| v * v).mean().unwrap() + 1e-8).sqrt();
        x /= norm;
        for (w, b) in &self.mapping {
            x = (w.dot(&x) + b).mapv(|v| {
                let a = if v >= 0.0 { v } else { v * LRELU_SLOPE };
                a * std::f64::consts::SQRT_2
            });
        }
        Array2::from_shape_fn((LATENT_ROWS, self.cfg.style_dim), |(_, j)| x[j])
    }

    fn synthesize<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        let mut x = tape.constant_arc(self.input.clone());
        x = self.styled_forward(tape, &self.convs[0], x, w.row(0));
        let mut skip = self.rgb_forward(tape, &self.rgbs[0], x, w.row(1), None);
        let mut i = 1;
        for (pair, rgb) in self.convs[1..].chunks(2).zip(&self.rgbs[1..]) {
            x = self.styled_forward(tape, &pair[0], x, w.row(i));
            x = self.styled_forward(tape, &pair[1], x, w.row(i + 1));
            skip = self.rgb_forward(tape, rgb, x, w.row(i + 2), Some(skip));
            i += 2;
        }
        skip.clamp(-1.0, 1.0)
    }
}

/// Writes a randomly initialized checkpoint for `cfg`; used for testing the
/// loader and architecture without the published weights.
pub fn write_random_stylegan2(path: &Path, cfg: &StyleGan2Config, seed: u64) -> Result<String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    for (name, shape) in cfg.expected_tensors() {
        let t = if name.ends_with("modulation.bias") {
            Tensor::ones(IxDyn(&shape))
        } else if name.ends_with(".bias") {
            Tensor::zeros(IxDyn(&shape))
        } else if name.ends_with("noise.weight") {
            Tensor::from_elem(IxDyn(&shape), 0.1)
        } else {
            crate::nn::normal_tensor(&mut rng, &shape, 1.0)
        };
        params.insert(name, Arc::new(t));
    }
    checkpoint::write_checkpoint(path, &cfg.manifest(), &params)
}

