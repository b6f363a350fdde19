//! The multi-view fusion counting network: shared per-view feature
//! extractor, ground-plane projection and subset fusion, one decoder per
//! view cardinality, and a shared uncertainty head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[serde(alias = "concatenation")]
    Concat,
    #[serde(alias = "addition")]
    Add,
    #[serde(alias = "max-pooling")]
    Max,
}

impl FusionMode {
    /// Name used in ablation tables and CSV output.
    pub fn table_name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concatenation",
            FusionMode::Add => "addition",
            FusionMode::Max => "max-pooling",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Relu,
}

/// Architecture of the counting network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Extractor conv widths; a 2x2 pool sits after the second conv.
    pub extractor_channels: Vec<usize>,
    /// Two-scale feature pyramid: upsample the pooled scale, concatenate
    /// with the pre-pool scale, reduce back to `base_channels` by 1x1 conv.
    pub use_pyramid: bool,
    /// Fused feature width C; the last extractor width must equal it.
    pub base_channels: usize,
    pub fusion: FusionMode,
    /// Number of camera views k; one decoder per cardinality 1..=k.
    pub k: usize,
    pub decoder_depth: usize,
    pub uncertainty_depth: usize,
    pub density_activation: OutputActivation,
    pub uncertainty_activation: OutputActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor_channels: vec![16, 16, 32],
            use_pyramid: false,
            base_channels: 32,
            fusion: FusionMode::Concat,
            k: 3,
            decoder_depth: 4,
            uncertainty_depth: 3,
            density_activation: OutputActivation::Linear,
            uncertainty_activation: OutputActivation::Linear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extractor_channels.len() < 2 {
            return Err(Error::Config("extractor needs at least two conv layers".into()));
        }
        if self.extractor_channels.last() != Some(&self.base_channels) {
            return Err(Error::Config(format!(
                "last extractor width {} must equal base_channels {}",
                self.extractor_channels.last().unwrap(),
                self.base_channels
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.decoder_depth < 2 || self.uncertainty_depth < 2 {
            return Err(Error::Config("decoder and uncertainty head need depth >= 2".into()));
        }
        if self.base_channels >> (self.decoder_depth - 2) < 2 {
            return Err(Error::Config(format!(
                "base_channels {} too small for decoder depth {}",
                self.base_channels, self.decoder_depth
            )));
        }
        Ok(())
    }

    /// Image pixels per feature pixel at the extractor output.
    pub fn feature_stride(&self) -> usize {
        if self.use_pyramid {
            1
        } else {
            2
        }
    }

    /// Decoder input channels for cardinality `j`.
    pub fn decoder_in_channels(&self, j: usize) -> usize {
        match self.fusion {
            FusionMode::Concat => self.base_channels * j,
            FusionMode::Add | FusionMode::Max => self.base_channels,
        }
    }

    /// Output widths of the cardinality decoders: C, C/2, ..., 1.
    fn decoder_out_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.decoder_depth);
        for i in 0..self.decoder_depth - 1 {
            out.push((self.base_channels >> i).max(2));
        }
        out.push(1);
        out
    }

    /// Output widths of the uncertainty head: C/2, C/4, ..., 1.
    fn uncertainty_out_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.uncertainty_depth);
        for i in 0..self.uncertainty_depth - 1 {
            out.push((self.base_channels >> (i + 1)).max(2));
        }
        out.push(1);
        out
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(rng: &mut impl Rng, c_out: usize, c_in: usize, ksize: usize) -> ConvLayer {
        // Kaiming-style fan-in scaled uniform init, zero biases.
        let fan_in = (c_in * ksize * ksize) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * ksize * ksize;
        let weight = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        ConvLayer {
            weight: Tensor::new(vec![c_out, c_in, ksize, ksize], weight).unwrap(),
            bias: Tensor::zeros(vec![c_out]),
        }
    }

}

/// All learnable weights. Decoders are not shared across cardinalities; the
/// extractor and uncertainty head are shared.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub extractor: Vec<ConvLayer>,
    pub pyramid_reduce: Option<ConvLayer>,
    pub decoders: Vec<Vec<ConvLayer>>,
    pub uncertainty: Vec<ConvLayer>,
}

/// Kaiming-style deterministic initialization.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng_from(seed, &[0x1417]);

    let mut extractor = Vec::new();
    let mut c_prev = 1;
    for &c in &config.extractor_channels {
        extractor.push(ConvLayer::init(&mut rng, c, c_prev, 3));
        c_prev = c;
    }
    let pyramid_reduce = if config.use_pyramid {
        let concat_ch = config.extractor_channels[1] + config.base_channels;
        Some(ConvLayer::init(&mut rng, config.base_channels, concat_ch, 1))
    } else {
        None
    };

    let dec_out = config.decoder_out_channels();
    let mut decoders = Vec::with_capacity(config.k);
    for j in 1..=config.k {
        let mut layers = Vec::with_capacity(config.decoder_depth);
        let mut c_in = config.decoder_in_channels(j);
        for (i, &c_out) in dec_out.iter().enumerate() {
            let ksize = if i + 1 == dec_out.len() { 1 } else { 3 };
            layers.push(ConvLayer::init(&mut rng, c_out, c_in, ksize));
            c_in = c_out;
        }
        decoders.push(layers);
    }

    let unc_out = config.uncertainty_out_channels();
    let mut uncertainty = Vec::with_capacity(config.uncertainty_depth);
    let mut c_in = config.base_channels;
    for (i, &c_out) in unc_out.iter().enumerate() {
        let ksize = if i + 1 == unc_out.len() { 1 } else { 3 };
        uncertainty.push(ConvLayer::init(&mut rng, c_out, c_in, ksize));
        c_in = c_out;
    }

    Ok(ModelParams { config: config.clone(), extractor, pyramid_reduce, decoders, uncertainty })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    /// Visits every parameter in canonical order.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (i, layer) in self.extractor.iter().enumerate() {
            f(&format!("extractor.{i}.weight"), &layer.weight);
            f(&format!("extractor.{i}.bias"), &layer.bias);
        }
        if let Some(layer) = &self.pyramid_reduce {
            f("pyramid.weight", &layer.weight);
            f("pyramid.bias", &layer.bias);
        }
        for (j, layers) in self.decoders.iter().enumerate() {
            for (i, layer) in layers.iter().enumerate() {
                f(&format!("decoder{}.{i}.weight", j + 1), &layer.weight);
                f(&format!("decoder{}.{i}.bias", j + 1), &layer.bias);
            }
        }
        for (i, layer) in self.uncertainty.iter().enumerate() {
            f(&format!("uncertainty.{i}.weight"), &layer.weight);
            f(&format!("uncertainty.{i}.bias"), &layer.bias);
        }
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.extractor.iter_mut().enumerate() {
            out.push((format!("extractor.{i}.weight"), &mut layer.weight));
            out.push((format!("extractor.{i}.bias"), &mut layer.bias));
        }
        if let Some(layer) = &mut self.pyramid_reduce {
            out.push(("pyramid.weight".to_string(), &mut layer.weight));
            out.push(("pyramid.bias".to_string(), &mut layer.bias));
        }
        for (j, layers) in self.decoders.iter_mut().enumerate() {
            for (i, layer) in layers.iter_mut().enumerate() {
                out.push((format!("decoder{}.{i}.weight", j + 1), &mut layer.weight));
                out.push((format!("decoder{}.{i}.bias", j + 1), &mut layer.bias));
            }
        }
        for (i, layer) in self.uncertainty.iter_mut().enumerate() {
            out.push((format!("uncertainty.{i}.weight"), &mut layer.weight));
            out.push((format!("uncertainty.{i}.bias"), &mut layer.bias));
        }
        out
    }

    /// A copy whose tensors are registered as differentiable leaves on the
    /// tape, preserving structure.
    pub fn register_on(&self, tape: &Tape) -> ModelParams {
        let reg = |layer: &ConvLayer| ConvLayer {
            weight: tape.leaf(&layer.weight),
            bias: tape.leaf(&layer.bias),
        };
        ModelParams {
            config: self.config.clone(),
            extractor: self.extractor.iter().map(reg).collect(),
            pyramid_reduce: self.pyramid_reduce.as_ref().map(reg),
            decoders: self.decoders.iter().map(|d| d.iter().map(reg).collect()).collect(),
            uncertainty: self.uncertainty.iter().map(reg).collect(),
        }
    }

    /// Serializes every parameter into a named-tensor container.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        self.visit(|name, t| {
            c.push_tensor(name, t).expect("parameter names are unique");
        });
        c
    }

    /// Restores parameters from a container; the layout must match `config`.
    pub fn from_container(config: &ModelConfig, container: &Container) -> Result<ModelParams> {
        let mut params = init_model(config, 0)?;
        let mut missing = Vec::new();
        for (name, tensor) in params.named_mut() {
            match container.get(&name) {
                Some(entry) => {
                    if entry.dims != tensor.shape() {
                        return Err(Error::Data(format!(
                            "checkpoint entry '{}' has shape {:?}, model expects {:?}",
                            name,
                            entry.dims,
                            tensor.shape()
                        )));
                    }
                    *tensor = entry.to_tensor();
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("checkpoint is missing parameters: {missing:?}")));
        }
        Ok(params)
    }
}

/// Everything the forward pass produces for one sample, per cardinality.
pub struct ForwardCache {
    pub permutation: Vec<usize>,
    /// Per original view index.
    pub features: Vec<Tensor>,
    pub projected: Vec<Tensor>,
    /// Indexed by cardinality - 1.
    pub fused: Vec<Tensor>,
    /// Post-first-decoder-layer activations F'(C_j).
    pub hidden: Vec<Tensor>,
    /// Density predictions S_j, shape [h, w].
    pub density: Vec<Tensor>,
    /// Uncertainty maps U_j, shape [h, w]; empty unless requested.
    pub uncertainty: Vec<Tensor>,
}

impl ForwardCache {
    /// The view subset C_j: the first j entries of the permutation.
    pub fn subset(&self, j: usize) -> &[usize] {
        &self.permutation[..j]
    }

    pub fn k(&self) -> usize {
        self.permutation.len()
    }
}

fn conv_relu(tape: &Tape, layer: &ConvLayer, x: &Tensor) -> Result<Tensor> {
    tape.relu(&tape.conv2d(x, &layer.weight, &layer.bias)?)
}

fn output_activation(tape: &Tape, act: OutputActivation, x: &Tensor) -> Result<Tensor> {
    match act {
        OutputActivation::Linear => Ok(x.clone()),
        OutputActivation::Relu => tape.relu(x),
    }
}

/// Bilinear 2x upsampling grid with clamped (edge-replicating) coordinates.
fn upsample2_grid(h: usize, w: usize) -> Tensor {
    let (oh, ow) = (h * 2, w * 2);
    let mut data = Vec::with_capacity(oh * ow * 2);
    for r in 0..oh {
        for c in 0..ow {
            let sr = ((r as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
            let sc = ((c as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
            data.push(sr);
            data.push(sc);
        }
    }
    Tensor::new(vec![oh, ow, 2], data).unwrap()
}

/// Shared single-view feature extraction: conv stack with relu, one 2x2
/// pool after the second conv, optional two-scale pyramid.
pub fn extract_features(tape: &Tape, params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    if image.shape().len() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape("extract_features", format!("want [1,H,W], got {:?}", image.shape())));
    }
    let mut x = conv_relu(tape, &params.extractor[0], image)?;
    x = conv_relu(tape, &params.extractor[1], &x)?;
    let full_scale = x.clone();
    x = tape.max_pool2(&x)?;
    for layer in &params.extractor[2..] {
        x = conv_relu(tape, layer, &x)?;
    }
    if let Some(reduce) = &params.pyramid_reduce {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let up = tape.grid_sample(&x, &upsample2_grid(h, w))?;
        let cat = tape.concat_channels(&[&full_scale, &up])?;
        x = conv_relu(tape, reduce, &cat)?;
    }
    Ok(x)
}

fn run_decoder(
    tape: &Tape,
    params: &ModelParams,
    j: usize,
    fused: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let layers = &params.decoders[j - 1];
    let hidden = conv_relu(tape, &layers[0], fused)?;
    let mut x = hidden.clone();
    for layer in &layers[1..layers.len() - 1] {
        x = conv_relu(tape, layer, &x)?;
    }
    let last = layers.last().unwrap();
    let out = tape.conv2d(&x, &last.weight, &last.bias)?;
    let out = output_activation(tape, params.config.density_activation, &out)?;
    let (h, w) = (out.shape()[1], out.shape()[2]);
    Ok((hidden, tape.reshape(&out, vec![h, w])?))
}

fn run_uncertainty(tape: &Tape, params: &ModelParams, hidden: &Tensor) -> Result<Tensor> {
    let layers = &params.uncertainty;
    let mut x = hidden.clone();
    for layer in &layers[..layers.len() - 1] {
        x = conv_relu(tape, layer, &x)?;
    }
    let last = layers.last().unwrap();
    let out = tape.conv2d(&x, &last.weight, &last.bias)?;
    let out = output_activation(tape, params.config.uncertainty_activation, &out)?;
    let (h, w) = (out.shape()[1], out.shape()[2]);
    tape.reshape(&out, vec![h, w])
}

/// Runs the full pipeline for every prefix subset of `permutation`:
/// features, projection, fusion, cardinality decoders, and (optionally) the
/// uncertainty head.
pub fn forward_all(
    tape: &Tape,
    params: &ModelParams,
    views: &[Tensor],
    sampling_grids: &[Tensor],
    permutation: &[usize],
    with_uncertainty: bool,
) -> Result<ForwardCache> {
    let k = params.config.k;
    if views.len() != k {
        return Err(Error::shape(
            "forward_all",
            format!("model expects {} views, sample has {}", k, views.len()),
        ));
    }
    if sampling_grids.len() != k {
        return Err(Error::shape(
            "forward_all",
            format!("need {} sampling grids, got {}", k, sampling_grids.len()),
        ));
    }
    let mut seen = vec![false; k];
    for &v in permutation {
        if v >= k || seen[v] {
            return Err(Error::Config(format!("invalid view permutation {permutation:?}")));
        }
        seen[v] = true;
    }
    if permutation.len() != k {
        return Err(Error::Config(format!("permutation must cover all {k} views")));
    }

    let features: Vec<Tensor> = views
        .iter()
        .map(|v| extract_features(tape, params, v))
        .collect::<Result<_>>()?;
    let projected: Vec<Tensor> = features
        .iter()
        .zip(sampling_grids)
        .map(|(f, g)| tape.grid_sample(f, g))
        .collect::<Result<_>>()?;

    let mut fused_all = Vec::with_capacity(k);
    let mut hidden_all = Vec::with_capacity(k);
    let mut density_all = Vec::with_capacity(k);
    let mut uncertainty_all = Vec::new();
    for j in 1..=k {
        let members: Vec<&Tensor> = permutation[..j].iter().map(|&v| &projected[v]).collect();
        let fused = match params.config.fusion {
            FusionMode::Concat => tape.concat_channels(&members)?,
            FusionMode::Add => {
                let mut acc = members[0].clone();
                for m in &members[1..] {
                    acc = tape.add(&acc, m)?;
                }
                acc
            }
            FusionMode::Max => {
                let mut acc = members[0].clone();
                for m in &members[1..] {
                    acc = tape.maximum(&acc, m)?;
                }
                acc
            }
        };
        let (hidden, density) = run_decoder(tape, params, j, &fused)?;
        if with_uncertainty {
            uncertainty_all.push(run_uncertainty(tape, params, &hidden)?);
        }
        fused_all.push(fused);
        hidden_all.push(hidden);
        density_all.push(density);
    }

    Ok(ForwardCache {
        permutation: permutation.to_vec(),
        features,
        projected,
        fused: fused_all,
        hidden: hidden_all,
        density: density_all,
        uncertainty: uncertainty_all,
    })
}

/// Predicted crowd count: the sum of a density map.
pub fn count(density: &Tensor) -> f64 {
    density.sum_value()
}
