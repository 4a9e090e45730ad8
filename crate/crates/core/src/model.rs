//! The full network: a six-stage encoder, text fusion at the bottleneck, a
//! five-stage decoder with skip connections and a 1x1 segmentation head.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::blocks::{ConvStage, FusionBlock, ShiftedMlpBlock};
use crate::data::dtf::{dtf_read, dtf_write, DtfTensor};
use crate::error::{shape_err, Error, Result};
use crate::nn::{
    channel_linear, conv2d, maxpool2, upsample2, Bound, ConvGeometry, ConvParams, LinearParams, Mode, ParamStore,
};
use crate::tensor::{ops, Real, Tape, Tensor, Var};
use crate::util::mix_seed;

pub const STAGES: usize = 6;
/// Total downsampling factor between the input and the bottleneck.
pub const REDUCTION: usize = 32;
pub const CONFIG_RECORD: &str = "__config__";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; STAGES],
    pub in_channels: usize,
    pub num_classes: usize,
    /// `(height, width)` of training crops.
    pub crop: (usize, usize),
    pub heads: usize,
    pub dropout: f64,
    /// 1-based encoder stages built as shifted-MLP blocks.
    pub mlp_stages: BTreeSet<usize>,
    pub embed_dim: usize,
    pub seed: u64,
    /// Hidden width of decoder levels 1..=5 (level 1 is full resolution).
    pub decoder_mid: [usize; 5],
    pub shift_groups: usize,
    /// Hidden expansion of the shifted-MLP blocks.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64, 128, 256, 320],
            in_channels: 3,
            num_classes: 5,
            crop: (256, 256),
            heads: 4,
            dropout: 0.1,
            mlp_stages: [4, 5, 6].into_iter().collect(),
            embed_dim: 768,
            seed: 0,
            decoder_mid: [32, 64, 128, 128, 256],
            shift_groups: 5,
            mlp_ratio: 2,
        }
    }
}

fn join<I: IntoIterator<Item = usize>>(v: I) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("`{key}`: `{s}` is not a non-negative integer"))))
        .collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    parse_list(key, v)?
        .try_into()
        .map_err(|l: Vec<usize>| Error::Config(format!("`{key}` needs {N} values, got {}", l.len())))
}

pub(crate) fn parse_num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 12] = [
        "channels",
        "in_channels",
        "num_classes",
        "crop",
        "heads",
        "dropout",
        "mlp_stages",
        "embed_dim",
        "seed",
        "decoder_mid",
        "shift_groups",
        "mlp_ratio",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (h, w) = self.crop;
        if h == 0 || w == 0 || h % REDUCTION != 0 || w % REDUCTION != 0 {
            return bad(format!("crop {h}x{w} must be a positive multiple of {REDUCTION}"));
        }
        if self.channels.iter().chain(&self.decoder_mid).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        for v in [self.in_channels, self.num_classes, self.embed_dim, self.shift_groups, self.mlp_ratio] {
            if v == 0 {
                return bad("in_channels, num_classes, embed_dim, shift_groups and mlp_ratio must be positive".into());
            }
        }
        if self.heads == 0 || self.channels[STAGES - 1] % self.heads != 0 {
            return bad(format!("bottleneck width {} is not divisible by {} heads", self.channels[STAGES - 1], self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(s) = self.mlp_stages.iter().find(|s| !(1..=STAGES).contains(*s)) {
            return bad(format!("mlp stage {s} outside 1..={STAGES}"));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "channels" => join(self.channels),
            "in_channels" => self.in_channels.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "crop" => format!("{}x{}", self.crop.0, self.crop.1),
            "heads" => self.heads.to_string(),
            "dropout" => self.dropout.to_string(),
            "mlp_stages" => join(self.mlp_stages.iter().copied()),
            "embed_dim" => self.embed_dim.to_string(),
            "seed" => self.seed.to_string(),
            "decoder_mid" => join(self.decoder_mid),
            "shift_groups" => self.shift_groups.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            _ => return None,
        })
    }

    /// Sets one key from its text form. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse_array(key, v)?,
            "in_channels" => self.in_channels = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "crop" => {
                self.crop = match v.split_once('x') {
                    Some((a, b)) => (parse_num(key, a)?, parse_num(key, b)?),
                    None => {
                        let s = parse_num(key, v)?;
                        (s, s)
                    }
                }
            }
            "heads" => self.heads = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "mlp_stages" => self.mlp_stages = parse_list(key, v)?.into_iter().collect(),
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "decoder_mid" => self.decoder_mid = parse_array(key, v)?,
            "shift_groups" => self.shift_groups = parse_num(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("own key"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown model key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// First key whose value differs, ignoring `seed` (initialization only).
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        Self::KEYS.into_iter().filter(|&k| k != "seed").find(|k| self.get(k) != other.get(k))
    }
}

/// Channel projection followed by a shifted-MLP block.
#[derive(Clone, Debug)]
pub struct MlpStage {
    pub proj: LinearParams,
    pub block: ShiftedMlpBlock,
}

#[derive(Clone, Debug)]
pub enum EncoderStage {
    Conv(ConvStage),
    Mlp(MlpStage),
}

pub struct DocParseNet<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Vec<EncoderStage>,
    pub fusion: FusionBlock,
    /// Decoder levels ordered 1..=5 (index 0 is full resolution).
    pub decoder: Vec<ConvStage>,
    pub head: ConvParams,
}

/// Intermediate handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits: Var,
    pub bottleneck: Var,
    /// Pre-residual attention output `[B, h*w, C6]`.
    pub attended: Var,
    pub fused: Var,
}

impl<T: Real> DocParseNet<T> {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let seed = cfg.seed;
        let c = cfg.channels;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in c.iter().enumerate() {
            let name = format!("enc{}", i + 1);
            let stage = if cfg.mlp_stages.contains(&(i + 1)) {
                EncoderStage::Mlp(MlpStage {
                    proj: LinearParams::new(&mut params, &format!("{name}.proj"), c_in, c_out, seed)?,
                    block: ShiftedMlpBlock::new(
                        &mut params,
                        &format!("{name}.mlp"),
                        c_out,
                        c_out * cfg.mlp_ratio,
                        cfg.shift_groups,
                        cfg.dropout,
                        seed,
                    )?,
                })
            } else {
                EncoderStage::Conv(ConvStage::new(&mut params, &name, c_in, c_out, c_out, seed)?)
            };
            encoder.push(stage);
            c_in = c_out;
        }
        let fusion = FusionBlock::new(&mut params, "fusion", c[STAGES - 1], cfg.embed_dim, cfg.heads, seed)?;
        let mut decoder = Vec::with_capacity(STAGES - 1);
        for level in 1..STAGES {
            let name = format!("dec{level}");
            let deeper = c[level];
            decoder.push(ConvStage::new(&mut params, &name, deeper + c[level - 1], cfg.decoder_mid[level - 1], c[level - 1], seed)?);
        }
        let head = ConvParams::new(&mut params, "head", c[0], cfg.num_classes, 1, ConvGeometry::POINTWISE, seed)?;
        Ok(DocParseNet { cfg: cfg.clone(), params, encoder, fusion, decoder, head })
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// `image [B, C_in, H, W]` with `H`, `W` multiples of 32 and
    /// `embed [B, L, embed_dim]` to logits `[B, num_classes, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bound, image: Var, embed: Var, mode: Mode) -> Result<ForwardOut> {
        let [n, ci, h, w] = tape.value(image).dims4()?;
        if ci != self.cfg.in_channels || h % REDUCTION != 0 || w % REDUCTION != 0 {
            return Err(shape_err!(
                "image must be [B, {}, H, W] with H, W multiples of {REDUCTION}, got {:?}",
                self.cfg.in_channels,
                tape.shape(image)
            ));
        }
        let es = tape.shape(embed);
        if es.len() != 3 || es[0] != n || es[2] != self.cfg.embed_dim {
            return Err(shape_err!("embedding must be [{n}, L, {}], got {es:?}", self.cfg.embed_dim));
        }
        let mut skips = Vec::with_capacity(STAGES - 1);
        let mut x = image;
        for (i, stage) in self.encoder.iter().enumerate() {
            x = match stage {
                EncoderStage::Conv(s) => s.forward(tape, b, x)?,
                EncoderStage::Mlp(s) => {
                    let y = channel_linear(tape, x, s.proj.vars(b))?;
                    let m = match mode {
                        Mode::Train { seed } => Mode::Train { seed: mix_seed(seed, i as u64) },
                        Mode::Eval => Mode::Eval,
                    };
                    s.block.forward(tape, b, y, m)?
                }
            };
            if i + 1 < STAGES {
                skips.push(x);
                x = maxpool2(tape, x)?;
            }
        }
        let bottleneck = x;
        let fusion = self.fusion.forward(tape, b, bottleneck, embed)?;
        let mut y = fusion.fused;
        for (level, stage) in self.decoder.iter().enumerate().rev() {
            let up = upsample2(tape, y)?;
            let cat = ops::concat(tape, &[up, skips[level]], 1)?;
            y = stage.forward(tape, b, cat)?;
        }
        let logits = conv2d(tape, y, b.var(self.head.weight), Some(b.var(self.head.bias)), self.head.geom)?;
        Ok(ForwardOut { logits, bottleneck, attended: fusion.attended, fused: fusion.fused })
    }

    /// Convenience forward on a fresh tape; returns the logits tensor.
    pub fn infer(&self, image: &Tensor<T>, embed: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let e = tape.constant(embed.clone());
        let out = self.forward(&mut tape, &b, x, e, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.cfg.to_text().into_bytes();
        let mut items = vec![(CONFIG_RECORD.to_string(), DtfTensor::from_u8(vec![text.len()], text)?)];
        items.extend(self.params.iter().map(|(name, t)| (name.to_string(), DtfTensor::from_tensor(t))));
        dtf_write(path, &items)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let items = dtf_read(path)?;
        let schema = |field: &str, reason: &str| Error::Schema { field: field.into(), reason: reason.into() };
        let (_, cfg_rec) = items
            .iter()
            .find(|(n, _)| n == CONFIG_RECORD)
            .ok_or_else(|| schema(CONFIG_RECORD, "missing model config record"))?;
        let text = cfg_rec.as_u8().ok_or_else(|| schema(CONFIG_RECORD, "config record must be u8 text"))?;
        let text = std::str::from_utf8(text).map_err(|_| schema(CONFIG_RECORD, "config is not utf-8"))?;
        let cfg = ModelConfig::from_text(text).map_err(|e| schema(CONFIG_RECORD, &e.to_string()))?;
        let mut model = Self::build(&cfg)?;
        let mut seen = 0;
        for (name, rec) in items.iter().filter(|(n, _)| n != CONFIG_RECORD) {
            let id = model.params.find(name).ok_or_else(|| schema(name, "not a parameter of this model"))?;
            model.params.set(id, rec.to_tensor()?)?;
            seen += 1;
        }
        if seen != model.params.len() {
            let missing = model
                .params
                .ids()
                .map(|id| model.params.name(id).to_string())
                .find(|n| !items.iter().any(|(m, _)| m == n))
                .unwrap_or_default();
            return Err(schema(&missing, "missing from checkpoint"));
        }
        Ok(model)
    }
}

/// Sigmoid then threshold at 0.5, ties positive; equivalently `logit >= 0`.
pub fn predict_masks<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let data = logits.data().iter().map(|&v| if v >= T::zero() { T::one() } else { T::zero() }).collect();
    Tensor::new(logits.shape(), data).expect("same shape")
}
