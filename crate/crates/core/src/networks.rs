//! Generator `G = [G_enc, G_dec]` and discriminator `D = [D_enc, D_dec]` with
//! heads `D^a`, `D^d`, `D^c` attached to the discriminator's code layer.
//!
//! Encoders are lists of conv layers (each followed by batch norm and ELU)
//! ending in global average pooling. Decoders mirror the encoder with
//! transposed convolutions after a linear projection of the code.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Graph, Real, RngStream, Tensor, Var};

pub const ELU_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { out_channels, kernel, stride, padding }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// `N^f`; the generator encoder's last layer must output this many channels.
    pub feature_dim: usize,
    /// `N^z`.
    pub noise_dim: usize,
    /// Discriminator code width; the discriminator encoder's last layer
    /// outputs this many channels.
    pub code_dim: usize,
    /// Encoder layers, shared by both networks except for the last width.
    pub encoder: Vec<ConvSpec>,
    pub init_std: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArchConfig {
    /// 32x32 inputs, four conv layers, `N^f = 64`, `N^z = 16`.
    pub fn desk() -> Self {
        ArchConfig {
            image_channels: 3,
            image_size: 32,
            feature_dim: 64,
            noise_dim: 16,
            code_dim: 64,
            encoder: vec![
                ConvSpec::new(32, 4, 2, 1),
                ConvSpec::new(64, 4, 2, 1),
                ConvSpec::new(128, 4, 2, 1),
                ConvSpec::new(64, 3, 1, 1),
            ],
            init_std: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// 96x96 inputs, one double-convolution block then four
    /// triple-convolution blocks (each opening with a stride-2 layer),
    /// `N^f = 320`, `N^z = 50`.
    pub fn paper() -> Self {
        let c3 = |c| ConvSpec::new(c, 3, 1, 1);
        let down = |c| ConvSpec::new(c, 4, 2, 1);
        ArchConfig {
            image_channels: 3,
            image_size: 96,
            feature_dim: 320,
            noise_dim: 50,
            code_dim: 320,
            encoder: vec![
                c3(32),
                c3(64),
                down(64),
                c3(64),
                c3(128),
                down(128),
                c3(96),
                c3(192),
                down(192),
                c3(128),
                c3(256),
                down(256),
                c3(160),
                c3(320),
            ],
            init_std: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Spatial size after every encoder layer; errors if a layer does not tile.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut s = self.image_size;
        let mut out = Vec::with_capacity(self.encoder.len());
        for (i, l) in self.encoder.iter().enumerate() {
            let padded = s + 2 * l.padding;
            if l.stride == 0 || padded < l.kernel || (padded - l.kernel) % l.stride != 0 {
                return Err(Error::Config(format!("encoder layer {i} does not tile a {s}x{s} input exactly")));
            }
            s = (padded - l.kernel) / l.stride + 1;
            out.push(s);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.image_channels == 0 || self.feature_dim == 0 || self.code_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.encoder.iter().any(|l| l.out_channels == 0 || l.kernel == 0) {
            return Err(Error::Config("encoder layers need positive widths and kernels".into()));
        }
        if !(self.init_std > 0.0) || !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("init_std, bn_eps must be positive and bn_momentum in (0,1]".into()));
        }
        self.spatial_sizes().map(|_| ())
    }

    fn widths(&self, last: usize) -> Vec<usize> {
        let mut w: Vec<usize> = self.encoder.iter().map(|l| l.out_channels).collect();
        *w.last_mut().unwrap() = last;
        w
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.feature_dim + 1 + self.noise_dim
    }
}

/// Output of the pose head: a scalar regression or logits over pose classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseHead {
    Regression,
    Classification(usize),
}

impl PoseHead {
    pub fn outputs(self) -> usize {
        match self {
            PoseHead::Regression => 1,
            PoseHead::Classification(k) => k,
        }
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

/// Batch-norm running statistics, one entry per normalised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffers<T> {
    pub names: Vec<String>,
    pub mean: Vec<Vec<T>>,
    pub var: Vec<Vec<T>>,
}

impl<T: Real> ParamSet<T> {
    fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

impl<T: Real> BnBuffers<T> {
    fn new() -> Self {
        BnBuffers { names: Vec::new(), mean: Vec::new(), var: Vec::new() }
    }

    fn push(&mut self, name: String, channels: usize) -> usize {
        self.names.push(name);
        self.mean.push(vec![T::zero(); channels]);
        self.var.push(vec![T::one(); channels]);
        self.names.len() - 1
    }

    /// `running = (1 - momentum) running + momentum batch`.
    pub fn update(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        if stats.len() != self.mean.len() {
            return Err(Error::dim(format!("{} batch statistics for {} buffers", stats.len(), self.mean.len())));
        }
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (i, s) in stats.iter().enumerate() {
            for (r, &b) in self.mean[i].iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.var[i].iter_mut().zip(&s.var) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BnBuffers<U> {
        let c = |v: &Vec<Vec<T>>| v.iter().map(|x| x.iter().map(|&y| U::from_f64_lossy(y.as_f64())).collect()).collect();
        BnBuffers { names: self.names.clone(), mean: c(&self.mean), var: c(&self.var) }
    }
}

/// Whether batch norm uses batch statistics (and reports them) or the
/// running buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct NormLayer {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    spec: ConvSpec,
    norm: NormLayer,
}

/// Parameter indices of an encoder.
#[derive(Clone, Debug, PartialEq)]
struct EncoderLayout {
    layers: Vec<ConvLayer>,
}

/// Parameter indices of a decoder: linear projection, hidden transposed
/// convs (with norm), and the output transposed conv with bias.
#[derive(Clone, Debug, PartialEq)]
struct DecoderLayout {
    input_dim: usize,
    base_channels: usize,
    base_size: usize,
    project: NormLayer,
    hidden: Vec<ConvLayer>,
    out_spec: ConvSpec,
    out_weight: usize,
    out_bias: usize,
}

struct Builder<'a, T: Real> {
    prefix: &'static str,
    params: ParamSet<T>,
    bn: BnBuffers<T>,
    rng: &'a mut RngStream,
    std: f64,
}

impl<T: Real> Builder<'_, T> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> usize {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.params.push(format!("{}/{name}", self.prefix), t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.params.push(format!("{}/{name}", self.prefix), Tensor::zeros(shape))
    }

    fn norm(&mut self, name: &str, weight_shape: &[usize], channels: usize) -> NormLayer {
        let weight = self.weight(&format!("{name}/w"), weight_shape);
        let gamma = self.params.push(format!("{}/{name}/bn_gamma", self.prefix), Tensor::ones(&[channels]));
        let beta = self.zeros(&format!("{name}/bn_beta"), &[channels]);
        let bn = self.bn.push(format!("{}/{name}/bn", self.prefix), channels);
        NormLayer { weight, gamma, beta, bn }
    }

    fn encoder(&mut self, arch: &ArchConfig, last_width: usize) -> EncoderLayout {
        let mut in_ch = arch.image_channels;
        let mut layers = Vec::new();
        for (i, (spec, w)) in arch.encoder.iter().zip(arch.widths(last_width)).enumerate() {
            let spec = ConvSpec { out_channels: w, ..*spec };
            let norm = self.norm(&format!("enc/{i}"), &[w, in_ch, spec.kernel, spec.kernel], w);
            layers.push(ConvLayer { spec, norm });
            in_ch = w;
        }
        EncoderLayout { layers }
    }

    fn decoder(&mut self, arch: &ArchConfig, input_dim: usize, last_width: usize) -> DecoderLayout {
        let widths = arch.widths(last_width);
        let sizes = arch.spatial_sizes().expect("validated architecture");
        let base_channels = *widths.last().unwrap();
        let base_size = *sizes.last().unwrap();
        let flat = base_channels * base_size * base_size;
        let project = self.norm("dec/project", &[flat, input_dim], base_channels);
        let mut hidden = Vec::new();
        // mirror: layer i of the encoder maps widths[i-1] -> widths[i]; its
        // decoder twin maps widths[i] -> widths[i-1]
        for i in (1..arch.encoder.len()).rev() {
            let spec = ConvSpec { out_channels: widths[i - 1], ..arch.encoder[i] };
            let k = spec.kernel;
            let norm = self.norm(&format!("dec/{i}"), &[widths[i], widths[i - 1], k, k], widths[i - 1]);
            hidden.push(ConvLayer { spec, norm });
        }
        let out_spec = ConvSpec { out_channels: arch.image_channels, ..arch.encoder[0] };
        let k = out_spec.kernel;
        let out_weight = self.weight("dec/0/w", &[widths[0], arch.image_channels, k, k]);
        let out_bias = self.zeros("dec/0/b", &[arch.image_channels]);
        DecoderLayout { input_dim, base_channels, base_size, project, hidden, out_spec, out_weight, out_bias }
    }
}

/// Records batch statistics in layer order (train mode only).
struct Ctx<'a, T: Real> {
    g: &'a mut Graph<T>,
    vars: &'a [Var],
    bn: &'a BnBuffers<T>,
    mode: Mode,
    eps: T,
    stats: Vec<BatchStats<T>>,
}

impl<T: Real> Ctx<'_, T> {
    fn norm_act(&mut self, x: Var, n: &NormLayer) -> Result<Var> {
        let running = match self.mode {
            Mode::Train => None,
            Mode::Eval => Some((self.bn.mean[n.bn].as_slice(), self.bn.var[n.bn].as_slice())),
        };
        let (y, stats) = self.g.batch_norm(x, self.vars[n.gamma], self.vars[n.beta], running, self.eps)?;
        if let Some(s) = stats {
            self.stats.push(s);
        }
        self.g.elu(y, T::from_f64_lossy(ELU_ALPHA))
    }

    fn encode(&mut self, layout: &EncoderLayout, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &layout.layers {
            h = self.g.conv2d(h, self.vars[l.norm.weight], l.spec.stride, l.spec.padding)?;
            h = self.norm_act(h, &l.norm)?;
        }
        let s = self.g.shape(h).to_vec();
        if s[2] != s[3] {
            return Err(Error::dim(format!("encoder output is not square: {s:?}")));
        }
        let pooled = self.g.avg_pool(h, s[2])?;
        self.g.reshape(pooled, &[s[0], s[1]])
    }

    fn decode(&mut self, layout: &DecoderLayout, input: Var) -> Result<Var> {
        let s = self.g.shape(input).to_vec();
        if s.len() != 2 || s[1] != layout.input_dim {
            return Err(Error::dim(format!(
                "decoder expects [N,{}] input, got {s:?}",
                layout.input_dim
            )));
        }
        let n = s[0];
        let mut h = self.g.linear(input, self.vars[layout.project.weight], None)?;
        h = self.g.reshape(h, &[n, layout.base_channels, layout.base_size, layout.base_size])?;
        h = self.norm_act(h, &layout.project)?;
        for l in &layout.hidden {
            h = self.g.conv2d_transpose(h, self.vars[l.norm.weight], l.spec.stride, l.spec.padding)?;
            h = self.norm_act(h, &l.norm)?;
        }
        h = self.g.conv2d_transpose(h, self.vars[layout.out_weight], layout.out_spec.stride, layout.out_spec.padding)?;
        h = self.g.channel_bias(h, self.vars[layout.out_bias])?;
        self.g.tanh(h)
    }
}

fn check_images<T: Real>(g: &Graph<T>, x: Var, arch: &ArchConfig) -> Result<()> {
    let s = g.shape(x);
    let want = [arch.image_channels, arch.image_size, arch.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::dim(format!("expected images [N,{},{},{}], got {s:?}", want[0], want[1], want[2])));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Real> {
    pub arch: ArchConfig,
    pub params: ParamSet<T>,
    pub bn: BnBuffers<T>,
    encoder: EncoderLayout,
    decoder: DecoderLayout,
}

/// Graph nodes produced by a generator forward pass.
pub struct GeneratorOutput<T> {
    pub features: Var,
    pub images: Var,
    pub stats: Vec<BatchStats<T>>,
}

impl<T: Real> Generator<T> {
    pub fn init(arch: &ArchConfig, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder { prefix: "g", params: ParamSet::new(), bn: BnBuffers::new(), rng, std: arch.init_std };
        let encoder = b.encoder(arch, arch.feature_dim);
        let decoder = b.decoder(arch, arch.decoder_input_dim(), arch.feature_dim);
        Ok(Generator { arch: arch.clone(), params: b.params, bn: b.bn, encoder, decoder })
    }

    /// `e = G_enc(x)`.
    pub fn encode(&self, g: &mut Graph<T>, vars: &[Var], x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats<T>>)> {
        check_images(g, x, &self.arch)?;
        let mut ctx = self.ctx(g, vars, mode);
        let e = ctx.encode(&self.encoder, x)?;
        Ok((e, ctx.stats))
    }

    /// `G_dec([e, c, z])`, with `c` of shape `[N,1]` and `z` of `[N,N^z]`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        e: Var,
        c: Var,
        z: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let n = g.shape(e)[0];
        let want = [[n, self.arch.feature_dim], [n, 1], [n, self.arch.noise_dim]];
        for (v, w, what) in [(e, want[0], "feature"), (c, want[1], "pose code"), (z, want[2], "noise")] {
            if g.shape(v) != w {
                return Err(Error::dim(format!("{what} input must be {w:?}, got {:?}", g.shape(v))));
            }
        }
        let input = g.concat(&[e, c, z])?;
        let mut ctx = self.ctx(g, vars, mode);
        let img = ctx.decode(&self.decoder, input)?;
        Ok((img, ctx.stats))
    }

    /// Full `G(x, c, z)`; statistics are encoder then decoder.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var, c: Var, z: Var, mode: Mode) -> Result<GeneratorOutput<T>> {
        let (features, mut stats) = self.encode(g, vars, x, mode)?;
        let (images, s2) = self.decode(g, vars, features, c, z, mode)?;
        stats.extend(s2);
        Ok(GeneratorOutput { features, images, stats })
    }

    fn ctx<'a>(&'a self, g: &'a mut Graph<T>, vars: &'a [Var], mode: Mode) -> Ctx<'a, T> {
        Ctx { g, vars, bn: &self.bn, mode, eps: T::from_f64_lossy(self.arch.bn_eps), stats: Vec::new() }
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            arch: self.arch.clone(),
            params: self.params.cast(),
            bn: self.bn.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Real> {
    pub arch: ArchConfig,
    pub num_identities: usize,
    pub pose_head: PoseHead,
    pub params: ParamSet<T>,
    pub bn: BnBuffers<T>,
    encoder: EncoderLayout,
    decoder: DecoderLayout,
    heads: [(usize, usize); 3],
}

/// Graph nodes of the four discriminator heads.
pub struct DiscriminatorOutput<T> {
    /// `D^a`, `[N]` real/fake probability.
    pub adversarial: Var,
    /// `D^d`, `[N, N^d]` identity probabilities.
    pub identity: Var,
    /// `D^c`, `[N]` pose estimate, or `[N, K]` class probabilities.
    pub pose: Var,
    /// `D^r`, reconstruction with the input's shape.
    pub reconstruction: Var,
    pub code: Var,
    pub stats: Vec<BatchStats<T>>,
}

impl<T: Real> Discriminator<T> {
    pub fn init(arch: &ArchConfig, num_identities: usize, pose_head: PoseHead, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        if num_identities < 2 {
            return Err(Error::Config(format!("identity head needs at least 2 classes, got {num_identities}")));
        }
        if pose_head.outputs() == 0 {
            return Err(Error::Config("pose classification needs at least one class".into()));
        }
        let mut b = Builder { prefix: "d", params: ParamSet::new(), bn: BnBuffers::new(), rng, std: arch.init_std };
        let encoder = b.encoder(arch, arch.code_dim);
        let decoder = b.decoder(arch, arch.code_dim, arch.code_dim);
        let mut head = |name: &str, out: usize| {
            let w = b.weight(&format!("head_{name}/w"), &[out, arch.code_dim]);
            (w, b.zeros(&format!("head_{name}/b"), &[out]))
        };
        let heads = [head("a", 1), head("d", num_identities), head("c", pose_head.outputs())];
        Ok(Discriminator {
            arch: arch.clone(),
            num_identities,
            pose_head,
            params: b.params,
            bn: b.bn,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var, mode: Mode) -> Result<DiscriminatorOutput<T>> {
        check_images(g, x, &self.arch)?;
        let mut ctx = Ctx { g, vars, bn: &self.bn, mode, eps: T::from_f64_lossy(self.arch.bn_eps), stats: Vec::new() };
        let code = ctx.encode(&self.encoder, x)?;
        let reconstruction = ctx.decode(&self.decoder, code)?;
        let stats = ctx.stats;
        let n = g.shape(x)[0];
        let [(aw, ab), (dw, db), (cw, cb)] = self.heads;
        let a = g.linear(code, vars[aw], Some(vars[ab]))?;
        let a = g.sigmoid(a)?;
        let adversarial = g.reshape(a, &[n])?;
        let d = g.linear(code, vars[dw], Some(vars[db]))?;
        let identity = g.softmax(d)?;
        let c = g.linear(code, vars[cw], Some(vars[cb]))?;
        let pose = match self.pose_head {
            PoseHead::Regression => g.reshape(c, &[n])?,
            PoseHead::Classification(_) => g.softmax(c)?,
        };
        Ok(DiscriminatorOutput { adversarial, identity, pose, reconstruction, code, stats })
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            arch: self.arch.clone(),
            num_identities: self.num_identities,
            pose_head: self.pose_head,
            params: self.params.cast(),
            bn: self.bn.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads,
        }
    }
}

/// Names every parameter and buffer entry with `prefix` in an archive.
pub fn write_params(a: &mut Archive, params: &ParamSet<f32>, bn: &BnBuffers<f32>) {
    for (n, t) in params.names.iter().zip(&params.tensors) {
        a.push(format!("param/{n}"), t.clone());
    }
    for (i, n) in bn.names.iter().enumerate() {
        let c = bn.mean[i].len();
        a.push(format!("buffer/{n}/mean"), Tensor::new(&[c], bn.mean[i].clone()).expect("finite running mean"));
        a.push(format!("buffer/{n}/var"), Tensor::new(&[c], bn.var[i].clone()).expect("finite running var"));
    }
}

/// Overwrites `params` and `bn` from an archive written by [`write_params`].
pub fn read_params(a: &Archive, params: &mut ParamSet<f32>, bn: &mut BnBuffers<f32>) -> Result<()> {
    for (n, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        let src = a.get(&format!("param/{n}"))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {n} has shape {:?}, architecture expects {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.clone();
    }
    for i in 0..bn.names.len() {
        let n = &bn.names[i];
        for (suffix, dst) in [("mean", &mut bn.mean[i]), ("var", &mut bn.var[i])] {
            let src = a.get(&format!("buffer/{n}/{suffix}"))?;
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!("buffer {n}/{suffix} has the wrong length")));
            }
            dst.copy_from_slice(src.data());
        }
    }
    Ok(())
}
