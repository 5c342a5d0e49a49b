//! The four convolutional mappings: two residual generators and two PatchGAN
//! discriminators.
//!
//! Generators subsample by 4, run a stack of residual blocks, then upsample
//! back with learnt filters and squash through tanh. Discriminators are
//! strided patch classifiers emitting an unbounded score map. Every
//! normalization layer is instance normalization (batch size is one
//! throughout). All networks are fully convolutional, so they accept varying
//! input sizes.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{container, Error, Result};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

/// Which of the four mappings a handle plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "G_A")]
    GenA,
    #[serde(rename = "G_I")]
    GenI,
    #[serde(rename = "D_A")]
    DiscA,
    #[serde(rename = "D_I")]
    DiscI,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::GenA => "G_A",
            Role::GenI => "G_I",
            Role::DiscA => "D_A",
            Role::DiscI => "D_I",
        }
    }

    pub fn is_generator(&self) -> bool {
        matches!(self, Role::GenA | Role::GenI)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
}

impl GeneratorSpec {
    /// Default geometry: two stride-2 downsampling stages (×4 subsampling),
    /// nine residual blocks, base width 64.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            base_width: 64,
            n_residual_blocks: 9,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig(
                "generator channel counts must be positive".into(),
            ));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::InvalidConfig(
                "generator needs at least one residual block".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub n_layers: usize,
}

impl DiscriminatorSpec {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_width: 64,
            n_layers: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.n_layers == 0 {
            return Err(Error::InvalidConfig(
                "discriminator channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum NetworkSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

impl From<GeneratorSpec> for NetworkSpec {
    fn from(spec: GeneratorSpec) -> Self {
        NetworkSpec::Generator(spec)
    }
}

impl From<DiscriminatorSpec> for NetworkSpec {
    fn from(spec: DiscriminatorSpec) -> Self {
        NetworkSpec::Discriminator(spec)
    }
}

/// Where layer parameters come from: fresh Gaussian draws or a stored map.
enum ParamSource<'a> {
    Random(ChaCha8Rng),
    Stored(&'a HashMap<String, Tensor>),
}

enum ParamKind {
    ConvWeight,
    Zeros,
    Ones,
}

impl ParamSource<'_> {
    fn take(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = match self {
            ParamSource::Random(rng) => {
                let data: Vec<f32> = match kind {
                    ParamKind::ConvWeight => {
                        let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
                        (0..n).map(|_| normal.sample(rng) as f32).collect()
                    }
                    ParamKind::Zeros => vec![0.0; n],
                    ParamKind::Ones => vec![1.0; n],
                };
                Tensor::from_vec(data, shape, &Device::Cpu)?
            }
            ParamSource::Stored(map) => {
                let t = map.get(name).ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("missing parameter `{name}`"))
                })?;
                if t.dims() != shape {
                    return Err(Error::CorruptCheckpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.dims(),
                        shape
                    )));
                }
                t.clone()
            }
        };
        Ok(Var::from_tensor(&t)?)
    }
}

struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    fn new(
        src: &mut ParamSource,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        vars: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let weight = src.take(&wname, &[out_c, in_c, k, k], ParamKind::ConvWeight)?;
        let bias = src.take(&bname, &[out_c], ParamKind::Zeros)?;
        vars.push((wname, weight.clone()));
        vars.push((bname, bias.clone()));
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    fn new(
        src: &mut ParamSource,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        vars: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let weight = src.take(&wname, &[in_c, out_c, k, k], ParamKind::ConvWeight)?;
        let bias = src.take(&bname, &[out_c], ParamKind::Zeros)?;
        vars.push((wname, weight.clone()));
        vars.push((bname, bias.clone()));
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(
            self.weight.as_tensor(),
            self.padding,
            self.output_padding,
            self.stride,
            1,
        )?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

struct InstanceNorm {
    gamma: Var,
    beta: Var,
}

impl InstanceNorm {
    fn new(
        src: &mut ParamSource,
        name: &str,
        channels: usize,
        vars: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        let gname = format!("{name}.gamma");
        let bname = format!("{name}.beta");
        let gamma = src.take(&gname, &[channels], ParamKind::Ones)?;
        let beta = src.take(&bname, &[channels], ParamKind::Zeros)?;
        vars.push((gname, gamma.clone()));
        vars.push((bname, beta.clone()));
        Ok(Self { gamma, beta })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = instance_normalize(x)?;
        let c = self.gamma.dims1()?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Per-sample, per-channel normalization over the spatial dims (pre-affine).
pub fn instance_normalize(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Reflection padding of `p` pixels on both spatial dims of a `(1,C,H,W)`
/// tensor, built from index selects so gradients flow through.
fn reflect_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for dim in [2usize, 3] {
        let n = out.dims()[dim];
        let mut idx: Vec<u32> = Vec::with_capacity(n + 2 * p);
        for i in (1..=p).rev() {
            idx.push(i as u32);
        }
        idx.extend(0..n as u32);
        for i in 0..p {
            idx.push((n - 2 - i) as u32);
        }
        let idx = Tensor::from_vec(idx, (n + 2 * p,), out.device())?;
        out = out.index_select(&idx, dim)?;
    }
    Ok(out)
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm,
    conv2: Conv2d,
    norm2: InstanceNorm,
}

impl ResBlock {
    fn new(
        src: &mut ParamSource,
        name: &str,
        channels: usize,
        vars: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(
                src,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                0,
                vars,
            )?,
            norm1: InstanceNorm::new(src, &format!("{name}.norm1"), channels, vars)?,
            conv2: Conv2d::new(
                src,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                0,
                vars,
            )?,
            norm2: InstanceNorm::new(src, &format!("{name}.norm2"), channels, vars)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(&reflect_pad(x, 1)?)?)?;
        let y = self.norm2.forward(&self.conv2.forward(&reflect_pad(&y.relu()?, 1)?)?)?;
        // no activation after the addition
        Ok((x + y)?)
    }
}

struct Generator {
    spec: GeneratorSpec,
    stem: Conv2d,
    stem_norm: InstanceNorm,
    down: Vec<(Conv2d, InstanceNorm)>,
    blocks: Vec<ResBlock>,
    up: Vec<(ConvTranspose2d, InstanceNorm)>,
    head: Conv2d,
}

impl Generator {
    fn new(spec: GeneratorSpec, src: &mut ParamSource, vars: &mut Vec<(String, Var)>) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let stem = Conv2d::new(src, "stem", spec.in_channels, w, 7, 1, 0, vars)?;
        let stem_norm = InstanceNorm::new(src, "stem_norm", w, vars)?;
        let mut down = Vec::new();
        for i in 0..2 {
            let (ic, oc) = (w << i, w << (i + 1));
            down.push((
                Conv2d::new(src, &format!("down{i}"), ic, oc, 3, 2, 1, vars)?,
                InstanceNorm::new(src, &format!("down{i}_norm"), oc, vars)?,
            ));
        }
        let mid = w * 4;
        let mut blocks = Vec::new();
        for i in 0..spec.n_residual_blocks {
            blocks.push(ResBlock::new(src, &format!("block{i:02}"), mid, vars)?);
        }
        let mut up = Vec::new();
        for i in 0..2 {
            let (ic, oc) = (mid >> i, mid >> (i + 1));
            up.push((
                ConvTranspose2d::new(src, &format!("up{i}"), ic, oc, 3, 2, 1, 1, vars)?,
                InstanceNorm::new(src, &format!("up{i}_norm"), oc, vars)?,
            ));
        }
        let head = Conv2d::new(src, "head", w, spec.out_channels, 7, 1, 0, vars)?;
        Ok(Self {
            spec,
            stem,
            stem_norm,
            down,
            blocks,
            up,
            head,
        })
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.dims3()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.spec.in_channels),
                got: format!("{c} channels"),
            });
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::IndivisibleDims {
                what: "generator input",
                multiple: 4,
                h,
                w,
            });
        }
        let mut x = input.unsqueeze(0)?;
        x = self
            .stem_norm
            .forward(&self.stem.forward(&reflect_pad(&x, 3)?)?)?
            .relu()?;
        for (conv, norm) in &self.down {
            x = norm.forward(&conv.forward(&x)?)?.relu()?;
        }
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        for (convt, norm) in &self.up {
            x = norm.forward(&convt.forward(&x)?)?.relu()?;
        }
        let out = self.head.forward(&reflect_pad(&x, 3)?)?.tanh()?;
        Ok(out.squeeze(0)?)
    }
}

struct Discriminator {
    spec: DiscriminatorSpec,
    layers: Vec<(Conv2d, Option<InstanceNorm>)>,
    head: Conv2d,
}

impl Discriminator {
    fn new(
        spec: DiscriminatorSpec,
        src: &mut ParamSource,
        vars: &mut Vec<(String, Var)>,
    ) -> Result<Self> {
        spec.validate()?;
        let w = spec.base_width;
        let mut layers = Vec::new();
        let mut in_c = spec.in_channels;
        for i in 0..spec.n_layers {
            let out_c = w << i;
            let conv = Conv2d::new(src, &format!("layer{i}"), in_c, out_c, 4, 2, 1, vars)?;
            // the first layer is raw conv + leaky activation
            let norm = if i == 0 {
                None
            } else {
                Some(InstanceNorm::new(src, &format!("layer{i}_norm"), out_c, vars)?)
            };
            layers.push((conv, norm));
            in_c = out_c;
        }
        let wide = w << spec.n_layers;
        let conv = Conv2d::new(src, "wide", in_c, wide, 4, 1, 1, vars)?;
        let norm = Some(InstanceNorm::new(src, "wide_norm", wide, vars)?);
        layers.push((conv, norm));
        let head = Conv2d::new(src, "score", wide, 1, 4, 1, 1, vars)?;
        Ok(Self { spec, layers, head })
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (c, h, w) = input.dims3()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", self.spec.in_channels),
                got: format!("{c} channels"),
            });
        }
        if h < 16 || w < 16 {
            return Err(Error::InputTooSmall { h, w });
        }
        let mut x = input.unsqueeze(0)?;
        for (conv, norm) in &self.layers {
            x = conv.forward(&x)?;
            if let Some(norm) = norm {
                x = norm.forward(&x)?;
            }
            x = leaky_relu(&x, 0.2)?;
        }
        // unbounded patch scores, no squashing
        Ok(self.head.forward(&x)?.squeeze(0)?.squeeze(0)?)
    }
}

enum Net {
    Gen(Generator),
    Disc(Discriminator),
}

/// One of the four networks: role tag, spec, and its parameter set.
pub struct NetworkHandle {
    role: Role,
    net: Net,
    vars: Vec<(String, Var)>,
}

impl NetworkHandle {
    pub fn build_generator(role: Role, spec: GeneratorSpec, rng_seed: u64) -> Result<Self> {
        let mut src = ParamSource::Random(ChaCha8Rng::seed_from_u64(rng_seed));
        let mut vars = Vec::new();
        let net = Net::Gen(Generator::new(spec, &mut src, &mut vars)?);
        Ok(Self { role, net, vars })
    }

    pub fn build_discriminator(role: Role, spec: DiscriminatorSpec, rng_seed: u64) -> Result<Self> {
        let mut src = ParamSource::Random(ChaCha8Rng::seed_from_u64(rng_seed));
        let mut vars = Vec::new();
        let net = Net::Disc(Discriminator::new(spec, &mut src, &mut vars)?);
        Ok(Self { role, net, vars })
    }

    fn from_stored(
        role: Role,
        spec: NetworkSpec,
        stored: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        let mut src = ParamSource::Stored(stored);
        let mut vars = Vec::new();
        let net = match spec {
            NetworkSpec::Generator(s) => Net::Gen(Generator::new(s, &mut src, &mut vars)?),
            NetworkSpec::Discriminator(s) => Net::Disc(Discriminator::new(s, &mut src, &mut vars)?),
        };
        Ok(Self { role, net, vars })
    }

    /// Deterministic forward pass. Generators require spatial dims divisible
    /// by 4 and emit values strictly inside (-1, 1); discriminators require
    /// at least 16x16 and emit an unbounded score map.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match &self.net {
            Net::Gen(g) => g.forward(input),
            Net::Disc(d) => d.forward(input),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn spec(&self) -> NetworkSpec {
        match &self.net {
            Net::Gen(g) => NetworkSpec::Generator(g.spec),
            Net::Disc(d) => NetworkSpec::Discriminator(d.spec),
        }
    }

    /// Named parameters in construction order. The `Var`s share storage with
    /// the network, so optimizer updates through them are visible to
    /// `forward`.
    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn param_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Flat copy of all parameters, for change tracking in tests.
    pub fn snapshot(&self) -> Result<Vec<Vec<f32>>> {
        self.vars
            .iter()
            .map(|(_, v)| Ok(v.flatten_all()?.to_vec1::<f32>()?))
            .collect()
    }

    /// Overwrites every parameter with zero (test fixture: tanh(0) = 0).
    pub fn zero_parameters(&self) -> Result<()> {
        for (_, v) in &self.vars {
            v.set(&Tensor::zeros(v.dims(), DType::F32, v.device())?)?;
        }
        Ok(())
    }

    /// Writes a single checkpoint file: role tag, spec, named parameters.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "role": self.role,
            "spec": self.spec(),
        });
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        container::save(path, "network", meta, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = container::load(path)?;
        if c.kind != "network" {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a network checkpoint, found kind `{}`",
                c.kind
            )));
        }
        let role: Role = serde_json::from_value(c.meta["role"].clone())?;
        let spec: NetworkSpec = serde_json::from_value(c.meta["spec"].clone())?;
        Self::from_stored(role, spec, &c.tensors)
    }

    pub(crate) fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(n, v)| (format!("{prefix}{n}"), v.as_tensor().clone()))
            .collect()
    }

    pub(crate) fn from_prefixed(
        role: Role,
        spec: NetworkSpec,
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
    ) -> Result<Self> {
        let stripped: HashMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone()))
            })
            .collect();
        Self::from_stored(role, spec, &stripped)
    }
}
