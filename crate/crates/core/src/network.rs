//! Layered convolutional feature extractor.
//!
//! A [`NetworkSpec`] is an ordered stack of circular convolutions,
//! rectifiers and 2x2 pools with named taps ("relu1_1", ...) on rectifier
//! outputs. It can come from a serialized weight file or from a seeded random
//! filter bank; the synthesis code never assumes a particular topology.
//!
//! # Weight file layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        b"HTXW"
//! version      u32 (currently 1)
//! mean         3 x f32        per-channel value subtracted from input images
//! layer_count  u32
//! layers       kind u8: 0 = conv, 1 = rectifier, 2 = average pool, 3 = max pool
//!              conv: out, in, kh, kw as u32, weights f32 [out][in][kh][kw], bias f32 [out]
//! tag_count    u32
//! tags         name_len u8, name bytes (utf-8), layer index u32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, ParseError, Result};
use crate::scalar::{sum_squares, Scalar};
use crate::tensor::{
    conv2d_circular, conv2d_circular_backward, pool2, pool2_backward, rectify, rectify_backward,
    FilterKernels, PoolMode, Tensor,
};

pub const WEIGHT_MAGIC: &[u8; 4] = b"HTXW";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

/// Channel widths of the default desk-scale bank: four blocks with the same
/// tag structure as the VGG prefix.
pub const DESK_TOPOLOGY: [usize; 5] = [3, 8, 16, 32, 64];

/// Activation maps keyed by tag name.
pub type ActivationSet<S> = BTreeMap<String, Tensor<S>>;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S> {
    Conv(FilterKernels<S>),
    Rectifier,
    Pool(PoolMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec<S> {
    layers: Vec<Layer<S>>,
    tags: BTreeMap<String, usize>,
    input_mean: Vec<S>,
    input_channels: usize,
}

impl<S: Scalar> NetworkSpec<S> {
    pub fn new(
        layers: Vec<Layer<S>>,
        tags: BTreeMap<String, usize>,
        input_mean: Vec<S>,
    ) -> Result<Self> {
        let input_channels = match layers.iter().find_map(|l| match l {
            Layer::Conv(k) => Some(k.in_channels()),
            _ => None,
        }) {
            Some(c) => c,
            None => return Err(Error::config("network has no convolution layer")),
        };
        if input_mean.len() != input_channels {
            return Err(Error::config(format!(
                "input mean has {} entries for {input_channels} input channels",
                input_mean.len()
            )));
        }
        let mut channels = input_channels;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Conv(k) = layer {
                if k.in_channels() != channels {
                    return Err(Error::config(format!(
                        "layer {i} expects {} channels but receives {channels}",
                        k.in_channels()
                    )));
                }
                channels = k.out_channels();
            }
        }
        for (name, &idx) in &tags {
            if name.is_empty() || name.len() > u8::MAX as usize {
                return Err(Error::config(format!("invalid tag name {name:?}")));
            }
            match layers.get(idx) {
                Some(Layer::Rectifier) => {}
                _ => {
                    return Err(Error::config(format!(
                        "tag {name} must point at a rectifier layer (index {idx})"
                    )))
                }
            }
        }
        Ok(NetworkSpec {
            layers,
            tags,
            input_mean,
            input_channels,
        })
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn tags(&self) -> &BTreeMap<String, usize> {
        &self.tags
    }

    pub fn input_mean(&self) -> &[S] {
        &self.input_mean
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn tag_index(&self, tag: &str) -> Result<usize> {
        self.tags
            .get(tag)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown layer tag {tag:?}")))
    }

    /// Number of feature channels at a tag.
    pub fn tag_channels(&self, tag: &str) -> Result<usize> {
        let idx = self.tag_index(tag)?;
        let mut channels = self.input_channels;
        for layer in &self.layers[..=idx] {
            if let Layer::Conv(k) = layer {
                channels = k.out_channels();
            }
        }
        Ok(channels)
    }

    /// Spatial downsampling factor between the image and a tag.
    pub fn tag_stride(&self, tag: &str) -> Result<usize> {
        let idx = self.tag_index(tag)?;
        Ok(self.stride_before(idx + 1))
    }

    fn stride_before(&self, end: usize) -> usize {
        let pools = self.layers[..end]
            .iter()
            .filter(|l| matches!(l, Layer::Pool(_)))
            .count();
        1 << pools
    }

    /// Checks that an image of `height x width` can pass through every layer
    /// up to and including `depth`.
    pub fn check_input_size(&self, height: usize, width: usize, depth: usize) -> Result<()> {
        let (mut h, mut w) = (height, width);
        for (i, layer) in self.layers[..=depth.min(self.layers.len() - 1)]
            .iter()
            .enumerate()
        {
            match layer {
                Layer::Conv(k) => {
                    if h < k.kernel_height() || w < k.kernel_width() {
                        return Err(Error::config(format!(
                            "input {height}x{width} shrinks to {h}x{w} at layer {i}, below kernel size"
                        )));
                    }
                }
                Layer::Pool(_) => {
                    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                        return Err(Error::config(format!(
                            "input {height}x{width} is {h}x{w} at pooling layer {i}; must be even"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Rectifier => {}
            }
        }
        Ok(())
    }

    fn deepest(&self, tags: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Option<usize>> {
        let mut deepest = None;
        for t in tags {
            let idx = self.tag_index(t.as_ref())?;
            deepest = Some(deepest.map_or(idx, |d: usize| d.max(idx)));
        }
        Ok(deepest)
    }

    /// Runs layers `0..=depth`, keeping every intermediate output.
    pub fn trace(&self, image: &Tensor<S>, depth: usize) -> Result<ForwardTrace<'_, S>> {
        if image.channels() != self.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, image has {}",
                self.input_channels,
                image.channels()
            )));
        }
        if depth >= self.layers.len() {
            return Err(Error::config(format!("depth {depth} beyond network")));
        }
        let mut input = image.clone();
        for c in 0..image.channels() {
            let m = self.input_mean[c];
            input.plane_mut(c).iter_mut().for_each(|v| *v -= m);
        }
        let mut outputs: Vec<Tensor<S>> = Vec::with_capacity(depth + 1);
        for layer in &self.layers[..=depth] {
            let x = outputs.last().unwrap_or(&input);
            let y = match layer {
                Layer::Conv(k) => conv2d_circular(x, k)?,
                Layer::Rectifier => rectify(x),
                Layer::Pool(mode) => pool2(x, *mode)?,
            };
            outputs.push(y);
        }
        Ok(ForwardTrace {
            net: self,
            input,
            outputs,
        })
    }

    /// Trace deep enough to reach every tag in `tags`.
    pub fn trace_tags<T: AsRef<str>>(&self, image: &Tensor<S>, tags: &[T]) -> Result<ForwardTrace<'_, S>> {
        let depth = self.deepest(tags)?.unwrap_or(0);
        self.trace(image, depth)
    }

    /// Activations at the requested tags.
    pub fn forward<T: AsRef<str>>(&self, image: &Tensor<S>, tags: &[T]) -> Result<ActivationSet<S>> {
        let trace = self.trace_tags(image, tags)?;
        trace.activations(tags)
    }

    /// Gradient with respect to the image of a loss whose gradients with
    /// respect to tagged activations are `activation_grads`.
    pub fn backward_to_image(
        &self,
        image: &Tensor<S>,
        activation_grads: &ActivationSet<S>,
    ) -> Result<Tensor<S>> {
        let trace = self.trace_tags(image, &activation_grads.keys().collect::<Vec<_>>())?;
        trace.backward(activation_grads)
    }

    /// Serializes to the binary weight format. Weights are stored as `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.input_mean.len() != 3 {
            return Err(Error::config(
                "weight format stores exactly three input channel means",
            ));
        }
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        for m in &self.input_mean {
            out.extend_from_slice(&(m.as_f64() as f32).to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            match layer {
                Layer::Conv(k) => {
                    out.push(0);
                    for d in [
                        k.out_channels(),
                        k.in_channels(),
                        k.kernel_height(),
                        k.kernel_width(),
                    ] {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in k.weights().iter().chain(k.bias()) {
                        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                    }
                }
                Layer::Rectifier => out.push(1),
                Layer::Pool(PoolMode::Average) => out.push(2),
                Layer::Pool(PoolMode::Maximum) => out.push(3),
            }
        }
        out.extend_from_slice(&(self.tags.len() as u32).to_le_bytes());
        for (name, &idx) in &self.tags {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(idx as u32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != WEIGHT_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(ParseError::BadMagic(found).into());
        }
        let version = r.u32("version")?;
        if version != WEIGHT_FORMAT_VERSION {
            return Err(ParseError::VersionMismatch {
                found: version,
                expected: WEIGHT_FORMAT_VERSION,
            }
            .into());
        }
        let mut input_mean = Vec::with_capacity(3);
        for _ in 0..3 {
            input_mean.push(S::lit(r.f32("preprocessing mean")? as f64));
        }
        let layer_count = r.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(layer_count.min(1 << 16));
        for _ in 0..layer_count {
            let kind = r.u8("layer kind")?;
            let layer = match kind {
                0 => {
                    let o = r.u32("conv header")? as usize;
                    let i = r.u32("conv header")? as usize;
                    let kh = r.u32("conv header")? as usize;
                    let kw = r.u32("conv header")? as usize;
                    let count = o
                        .checked_mul(i)
                        .and_then(|v| v.checked_mul(kh))
                        .and_then(|v| v.checked_mul(kw))
                        .ok_or_else(|| {
                            ParseError::InconsistentDims(format!("{o}x{i}x{kh}x{kw} overflows"))
                        })?;
                    if count.saturating_add(o).saturating_mul(4) > r.remaining() {
                        return Err(ParseError::UnexpectedEof("layer weights").into());
                    }
                    let mut weights = Vec::with_capacity(count);
                    for _ in 0..count {
                        weights.push(S::lit(r.f32("layer weights")? as f64));
                    }
                    let mut bias = Vec::with_capacity(o);
                    for _ in 0..o {
                        bias.push(S::lit(r.f32("layer biases")? as f64));
                    }
                    let k = FilterKernels::new(o, i, kh, kw, weights, bias)
                        .map_err(|e| ParseError::InconsistentDims(e.to_string()))?;
                    Layer::Conv(k)
                }
                1 => Layer::Rectifier,
                2 => Layer::Pool(PoolMode::Average),
                3 => Layer::Pool(PoolMode::Maximum),
                other => return Err(ParseError::UnknownLayerKind(other).into()),
            };
            layers.push(layer);
        }
        let tag_count = r.u32("tag count")? as usize;
        let mut tags = BTreeMap::new();
        for _ in 0..tag_count {
            let len = r.u8("tag name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tag name")?)
                .map_err(|_| ParseError::InvalidTag("name is not utf-8".into()))?
                .to_string();
            let idx = r.u32("tag layer index")? as usize;
            tags.insert(name, idx);
        }
        NetworkSpec::new(layers, tags, input_mean).map_err(|e| match e {
            Error::Config(msg) | Error::Shape(msg) => ParseError::InconsistentDims(msg).into(),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads a weight file.
pub fn load_network<S: Scalar>(path: impl AsRef<Path>) -> Result<NetworkSpec<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    NetworkSpec::from_bytes(&bytes)
}

/// Seeded random filter bank: one 3x3 convolution + rectifier per block,
/// average pooling between blocks, tags `relu{block}_1`. Filters are
/// standard Gaussian draws rescaled to unit Frobenius norm; biases are zero
/// and inputs are centred by subtracting 0.5.
pub fn random_filter_bank<S: Scalar>(seed: u64, topology: &[usize]) -> Result<NetworkSpec<S>> {
    random_filter_bank_with(seed, topology, 3, PoolMode::Average)
}

pub fn random_filter_bank_with<S: Scalar>(
    seed: u64,
    topology: &[usize],
    kernel: usize,
    pool: PoolMode,
) -> Result<NetworkSpec<S>> {
    if topology.len() < 2 {
        return Err(Error::config(
            "topology needs an input width and at least one block",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut tags = BTreeMap::new();
    for (block, pair) in topology.windows(2).enumerate() {
        let (cin, cout) = (pair[0], pair[1]);
        if block > 0 {
            layers.push(Layer::Pool(pool));
        }
        let per_filter = cin * kernel * kernel;
        let mut weights = Vec::with_capacity(cout * per_filter);
        for _ in 0..cout {
            let raw: Vec<f64> = (0..per_filter)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = sum_squares(&raw).sqrt();
            weights.extend(raw.iter().map(|v| S::lit(v / norm)));
        }
        let k = FilterKernels::new(cout, cin, kernel, kernel, weights, vec![S::zero(); cout])?;
        layers.push(Layer::Conv(k));
        layers.push(Layer::Rectifier);
        tags.insert(format!("relu{}_1", block + 1), layers.len() - 1);
    }
    NetworkSpec::new(layers, tags, vec![S::lit(0.5); topology[0]])
}

/// Intermediate outputs of one forward pass, enough to backpropagate.
pub struct ForwardTrace<'n, S> {
    net: &'n NetworkSpec<S>,
    input: Tensor<S>,
    outputs: Vec<Tensor<S>>,
}

impl<S: Scalar> ForwardTrace<'_, S> {
    pub fn depth(&self) -> usize {
        self.outputs.len() - 1
    }

    pub fn activation(&self, tag: &str) -> Result<&Tensor<S>> {
        let idx = self.net.tag_index(tag)?;
        self.outputs
            .get(idx)
            .ok_or_else(|| Error::config(format!("tag {tag} beyond traced depth")))
    }

    pub fn activations<T: AsRef<str>>(&self, tags: &[T]) -> Result<ActivationSet<S>> {
        tags.iter()
            .map(|t| Ok((t.as_ref().to_string(), self.activation(t.as_ref())?.clone())))
            .collect()
    }

    /// Backpropagates tagged activation gradients to the image.
    pub fn backward(&self, grads: &ActivationSet<S>) -> Result<Tensor<S>> {
        let mut at_layer: BTreeMap<usize, Vec<&Tensor<S>>> = BTreeMap::new();
        for (tag, g) in grads {
            let idx = self.net.tag_index(tag)?;
            let act = self
                .outputs
                .get(idx)
                .ok_or_else(|| Error::config(format!("tag {tag} beyond traced depth")))?;
            act.expect_shape(g, &format!("gradient for {tag}"))?;
            at_layer.entry(idx).or_default().push(g);
        }
        let Some((&deepest, _)) = at_layer.iter().next_back() else {
            return Ok(Tensor::zeros(
                self.input.channels(),
                self.input.height(),
                self.input.width(),
            ));
        };
        let mut g = at_layer[&deepest][0].clone();
        for extra in &at_layer[&deepest][1..] {
            g.add_assign(extra);
        }
        for i in (0..=deepest).rev() {
            if i < deepest {
                if let Some(list) = at_layer.get(&i) {
                    for extra in list {
                        g.add_assign(extra);
                    }
                }
            }
            let x = if i == 0 { &self.input } else { &self.outputs[i - 1] };
            g = match &self.net.layers[i] {
                Layer::Conv(k) => conv2d_circular_backward(x, k, &g)?,
                Layer::Rectifier => rectify_backward(&self.outputs[i], &g)?,
                Layer::Pool(mode) => pool2_backward(x, *mode, &g)?,
            };
        }
        Ok(g)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::UnexpectedEof(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ParseError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ParseError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, ParseError> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_gradient, relative_error};
    use rand::Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn bank_is_deterministic_and_normalized() {
        let a = random_filter_bank::<f64>(11, &[3, 4, 6]).unwrap();
        let b = random_filter_bank::<f64>(11, &[3, 4, 6]).unwrap();
        let c = random_filter_bank::<f64>(12, &[3, 4, 6]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in a.layers() {
            if let Layer::Conv(k) = layer {
                for o in 0..k.out_channels() {
                    let n = sum_squares(k.filter(o)).sqrt();
                    assert!((n - 1.0).abs() < 1e-12);
                }
                assert!(k.bias().iter().all(|&b| b == 0.0));
            }
        }
        assert_eq!(a.tag_index("relu1_1").unwrap(), 1);
        assert_eq!(a.tag_index("relu2_1").unwrap(), 4);
        assert_eq!(a.tag_stride("relu2_1").unwrap(), 2);
        assert_eq!(a.tag_channels("relu2_1").unwrap(), 6);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_activations() {
        let mut net = random_filter_bank::<f64>(3, &[3, 4, 5]).unwrap();
        net.input_mean = vec![0.0; 3];
        let acts = net
            .forward(&Tensor::zeros(3, 8, 8), &["relu1_1", "relu2_1"])
            .unwrap();
        for t in acts.values() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_block_equals_direct_composition() {
        let net = random_filter_bank::<f64>(5, &[3, 4]).unwrap();
        let img = random_image(1, 3, 6, 6);
        let acts = net.forward(&img, &["relu1_1"]).unwrap();
        let Layer::Conv(k) = &net.layers()[0] else {
            panic!()
        };
        let centred = img.map(|v| v - 0.5);
        let direct = rectify(&conv2d_circular(&centred, k).unwrap());
        assert_eq!(acts["relu1_1"], direct);
    }

    #[test]
    fn pool_free_net_is_shift_equivariant() {
        for seed in 0..10 {
            let net = random_filter_bank_with::<f64>(seed, &[3, 5, 4], 3, PoolMode::Average)
                .unwrap();
            // drop the pool to get a purely convolutional stack
            let layers: Vec<_> = net
                .layers()
                .iter()
                .filter(|l| !matches!(l, Layer::Pool(_)))
                .cloned()
                .collect();
            let mut tags = BTreeMap::new();
            tags.insert("relu1_1".to_string(), 1);
            tags.insert("relu2_1".to_string(), 3);
            let net = NetworkSpec::new(layers, tags, vec![0.5; 3]).unwrap();
            let img = random_image(seed + 100, 3, 8, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (dy, dx) = (rng.random_range(-8i32..8) as isize, rng.random_range(-10i32..10) as isize);
            let a = net.forward(&img.cyclic_shift(dy, dx), &["relu2_1"]).unwrap();
            let b = net.forward(&img, &["relu2_1"]).unwrap();
            assert_eq!(a["relu2_1"], b["relu2_1"].cyclic_shift(dy, dx));
        }
    }

    #[test]
    fn unknown_tag_is_config_error() {
        let net = random_filter_bank::<f64>(1, &[3, 4]).unwrap();
        let err = net
            .forward(&Tensor::zeros(3, 4, 4), &["relu9_1"])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backward_zero_and_linear() {
        let net = random_filter_bank::<f64>(2, &[3, 4, 6]).unwrap();
        let img = random_image(2, 3, 8, 8);
        let acts = net.forward(&img, &["relu1_1", "relu2_1"]).unwrap();
        let zero: ActivationSet<f64> = acts
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.channels(), v.height(), v.width())))
            .collect();
        let g = net.backward_to_image(&img, &zero).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_set = || -> ActivationSet<f64> {
            acts.iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        Tensor::from_fn(v.channels(), v.height(), v.width(), |_, _, _| {
                            rng.random_range(-1.0..1.0)
                        }),
                    )
                })
                .collect()
        };
        let g1 = rand_set();
        let g2 = rand_set();
        let sum: ActivationSet<f64> = g1
            .iter()
            .map(|(k, v)| {
                let mut t = v.clone();
                t.add_assign(&g2[k]);
                (k.clone(), t)
            })
            .collect();
        let mut lhs = net.backward_to_image(&img, &g1).unwrap();
        lhs.add_assign(&net.backward_to_image(&img, &g2).unwrap());
        let rhs = net.backward_to_image(&img, &sum).unwrap();
        assert!(relative_error(&lhs, &rhs, 1e-300) < 1e-10);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_filter_bank::<f64>(4, &[3, 4, 6]).unwrap();
        let img = random_image(4, 3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let acts = net.forward(&img, &["relu1_1", "relu2_1"]).unwrap();
        let weights: ActivationSet<f64> = acts
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    Tensor::from_fn(v.channels(), v.height(), v.width(), |_, _, _| {
                        rng.random_range(-1.0..1.0)
                    }),
                )
            })
            .collect();
        // loss = sum_tags <w, a> + 0.5‖a‖²
        let loss = |x: &Tensor<f64>| {
            let a = net.forward(x, &["relu1_1", "relu2_1"]).unwrap();
            a.iter()
                .map(|(k, t)| t.dot(&weights[k]) + 0.5 * t.dot(t))
                .sum::<f64>()
        };
        let grads: ActivationSet<f64> = acts
            .iter()
            .map(|(k, a)| {
                let mut g = weights[k].clone();
                g.add_assign(a);
                (k.clone(), g)
            })
            .collect();
        let analytic = net.backward_to_image(&img, &grads).unwrap();
        let numeric = finite_diff_gradient(loss, &img, 1e-5);
        assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-4);
    }

    #[test]
    fn weight_file_round_trip() {
        let net = random_filter_bank::<f32>(7, &[3, 4, 5]).unwrap();
        let bytes = net.to_bytes().unwrap();
        let back = NetworkSpec::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(net, back);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let wide = random_filter_bank::<f64>(7, &[3, 4, 5]).unwrap();
        let back = NetworkSpec::<f64>::from_bytes(&wide.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), wide.to_bytes().unwrap());
    }

    #[test]
    fn weight_file_errors() {
        let net = random_filter_bank::<f32>(7, &[3, 4, 5]).unwrap();
        let bytes = net.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            NetworkSpec::<f32>::from_bytes(&bad),
            Err(Error::Parse(ParseError::BadMagic(_)))
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            NetworkSpec::<f32>::from_bytes(&bad),
            Err(Error::Parse(ParseError::VersionMismatch { found: 9, .. }))
        ));

        // header (4 + 4 + 12 + 4) + kind + conv dims (16) + a few weights
        let cut = &bytes[..24 + 1 + 16 + 20];
        assert_eq!(
            NetworkSpec::<f32>::from_bytes(cut).unwrap_err().to_string(),
            "weight file: unexpected end of file while reading layer weights"
        );

        // second conv declares 7 input channels but receives 4
        let mut layers = net.layers().to_vec();
        layers[3] = Layer::Conv(FilterKernels::new(5, 7, 3, 3, vec![0.0; 315], vec![0.0; 5]).unwrap());
        let mut bad = Vec::new();
        bad.extend_from_slice(&bytes[..20]);
        bad.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        // re-encode by hand via a permissive copy of the serializer
        for layer in &layers {
            match layer {
                Layer::Conv(k) => {
                    bad.push(0);
                    for d in [k.out_channels(), k.in_channels(), k.kernel_height(), k.kernel_width()] {
                        bad.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in k.weights().iter().chain(k.bias()) {
                        bad.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Layer::Rectifier => bad.push(1),
                Layer::Pool(_) => bad.push(2),
            }
        }
        bad.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            NetworkSpec::<f32>::from_bytes(&bad),
            Err(Error::Parse(ParseError::InconsistentDims(_)))
        ));
    }

    #[test]
    fn input_size_validation() {
        let net = random_filter_bank::<f64>(1, &DESK_TOPOLOGY).unwrap();
        let deepest = net.tag_index("relu4_1").unwrap();
        assert!(net.check_input_size(24, 24, deepest).is_ok());
        assert!(net.check_input_size(16, 16, deepest).is_err());
        assert!(net.check_input_size(20, 24, deepest).is_err());
    }
}
