//! Optimization driver: loss assembly, gradient clamping, Adam updates and
//! the coarse-to-fine pyramid.
//!
//! Every loss term (Gram, histogram, mean activation, content, total
//! variation) is backpropagated to the image on its own, its image-space
//! gradient is rescaled to at most the term's threshold, and the clamped
//! gradients are summed in a fixed order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localized::{
    build_region_stats, downsample_mask, localized_gram_loss, localized_histogram_loss,
    IndexedMask, RegionStats,
};
use crate::network::{ActivationSet, NetworkSpec};
use crate::scalar::Scalar;
use crate::stats::{
    content_loss, gram_loss_to_targets, histogram_loss_to_targets, mean_activation_loss_to_targets,
    target_stats, tv_loss, LayerWeights, TargetStats, DEFAULT_HISTOGRAM_BINS,
};
use crate::tensor::{pool2, upsample_bilinear2, PoolMode, Tensor};

/// Maximum gradient norm per loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClampThresholds {
    pub gram: f64,
    pub histogram: f64,
    pub mean: f64,
    pub content: f64,
    pub tv: f64,
}

impl Default for ClampThresholds {
    fn default() -> Self {
        ClampThresholds {
            gram: 100.0,
            histogram: 1.0,
            mean: 1.0,
            content: 1.0,
            tv: 1.0,
        }
    }
}

impl ClampThresholds {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Gram => self.gram,
            Term::Histogram => self.histogram,
            Term::Mean => self.mean,
            Term::Content => self.content,
            Term::Tv => self.tv,
        }
    }
}

fn weights_for(tags: &[&str], w: f64) -> BTreeMap<String, f64> {
    tags.iter().map(|t| (t.to_string(), w)).collect()
}

// Default term weights. With images in [0, 1] and unit-norm filters every
// term's raw gradient at a white-noise start is then well above its clamp
// threshold, so the thresholds, not the weights, set the balance between
// terms. With unit weights the Gram and histogram gradients would be orders
// of magnitude below their thresholds and the TV term would dominate.
pub const DEFAULT_GRAM_WEIGHT: f64 = 1e8;
pub const DEFAULT_HISTOGRAM_WEIGHT: f64 = 1e3;
pub const DEFAULT_CONTENT_WEIGHT: f64 = 1e4;
pub const DEFAULT_TV_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// α per tag.
    pub gram_weights: BTreeMap<String, f64>,
    /// γ per tag.
    pub histogram_weights: BTreeMap<String, f64>,
    /// β per tag; used by style transfer only.
    pub content_weights: BTreeMap<String, f64>,
    /// Weights of the optional mean-activation loss.
    pub mean_weights: BTreeMap<String, f64>,
    /// ω.
    pub tv_weight: f64,
    pub clamp_thresholds: ClampThresholds,
    pub pyramid_levels: usize,
    /// Total iteration budget, split equally across pyramid levels.
    pub iterations: usize,
    /// Output size; defaults to the exemplar (texture) or content (transfer) size.
    pub output_width: Option<usize>,
    pub output_height: Option<usize>,
    /// Seeds the white-noise initialization.
    pub seed: u64,
    pub step_size: f64,
    pub histogram_bins: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            gram_weights: weights_for(&["relu1_1", "relu2_1", "relu3_1", "relu4_1"], DEFAULT_GRAM_WEIGHT),
            histogram_weights: weights_for(&["relu1_1", "relu4_1"], DEFAULT_HISTOGRAM_WEIGHT),
            content_weights: weights_for(&["relu4_1"], DEFAULT_CONTENT_WEIGHT),
            mean_weights: BTreeMap::new(),
            tv_weight: DEFAULT_TV_WEIGHT,
            clamp_thresholds: ClampThresholds::default(),
            pyramid_levels: 3,
            iterations: 700,
            output_width: None,
            output_height: None,
            seed: 0,
            step_size: 0.02,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let maps = [
            ("gram_weights", &self.gram_weights),
            ("histogram_weights", &self.histogram_weights),
            ("content_weights", &self.content_weights),
            ("mean_weights", &self.mean_weights),
        ];
        for (name, map) in maps {
            if let Some((tag, w)) = map.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
                return Err(Error::config(format!("{name}[{tag}] = {w} must be finite and >= 0")));
            }
        }
        if !(self.tv_weight.is_finite() && self.tv_weight >= 0.0) {
            return Err(Error::config("tv_weight must be finite and >= 0"));
        }
        for term in Term::ALL {
            let t = self.clamp_thresholds.get(term);
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config(format!("clamp threshold for {term} must be > 0")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::config("pyramid_levels must be at least 1"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("step_size must be > 0"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("histogram_bins must be at least 1"));
        }
        if self.output_width == Some(0) || self.output_height == Some(0) {
            return Err(Error::config("output size must be positive"));
        }
        Ok(())
    }

    /// Iterations spent at each level, coarsest first; the remainder of an
    /// uneven split goes to the finest level.
    pub fn iterations_per_level(&self) -> Vec<usize> {
        let l = self.pyramid_levels.max(1);
        let mut v = vec![self.iterations / l; l];
        v[l - 1] += self.iterations % l;
        v
    }

    /// Same objective with histogram, mean-activation and TV terms removed.
    pub fn gram_only(&self) -> Self {
        SynthesisConfig {
            histogram_weights: BTreeMap::new(),
            mean_weights: BTreeMap::new(),
            tv_weight: 0.0,
            ..self.clone()
        }
    }
}

fn scalar_weights<S: Scalar>(w: &BTreeMap<String, f64>) -> LayerWeights<S> {
    w.iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|(k, v)| (k.clone(), S::lit(*v)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Gram,
    Histogram,
    Mean,
    Content,
    Tv,
}

impl Term {
    /// Summation order of the clamped gradients.
    pub const ALL: [Term; 5] = [Term::Gram, Term::Histogram, Term::Mean, Term::Content, Term::Tv];

    pub fn name(self) -> &'static str {
        match self {
            Term::Gram => "gram",
            Term::Histogram => "histogram",
            Term::Mean => "mean",
            Term::Content => "content",
            Term::Tv => "tv",
        }
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rescales `g` to norm `threshold` when it is longer. Returns the result
/// and the original norm.
pub fn auto_tune_clamp<S: Scalar>(g: &Tensor<S>, threshold: S) -> (Tensor<S>, S) {
    let norm = g.norm();
    if norm <= threshold {
        return (g.clone(), norm);
    }
    let mut out = g.clone();
    out.scale(threshold / norm);
    // rounding can leave the rescaled norm a few ulps above the threshold
    while out.norm() > threshold {
        out.scale(S::one() - S::lit(4.0) * S::epsilon());
    }
    (out, norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub value: f64,
    pub grad_norm: f64,
    pub clamped_norm: f64,
    pub threshold: f64,
}

/// One optimizer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub level: usize,
    pub iteration: usize,
    pub total: f64,
    pub terms: BTreeMap<Term, TermRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rows: Vec<LossRow>,
    pub warnings: Vec<String>,
}

impl LossReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// One JSON object per iteration.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_json_lines(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Largest `clamped_norm − threshold` over all rows and terms.
    pub fn max_clamp_excess(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.terms.values())
            .map(|t| t.clamped_norm - t.threshold)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Loss value, summed clamped image gradient and per-term diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<S> {
    pub value: S,
    pub gradient: Tensor<S>,
    pub terms: BTreeMap<Term, TermRecord>,
}

/// Exemplar statistics restricted to masked regions, with the output mask
/// at the current image resolution.
#[derive(Clone, Debug)]
pub struct MaskedTargets<S> {
    pub style: RegionStats<S>,
    pub output_mask: IndexedMask,
}

/// Everything the objective compares against at one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTargets<S> {
    pub style: TargetStats<S>,
    pub regions: Option<MaskedTargets<S>>,
    pub content: Option<ActivationSet<S>>,
}

fn style_tags(cfg: &SynthesisConfig) -> Vec<String> {
    let mut tags = BTreeSet::new();
    for map in [&cfg.gram_weights, &cfg.histogram_weights, &cfg.mean_weights] {
        tags.extend(map.iter().filter(|(_, w)| **w > 0.0).map(|(k, _)| k.clone()));
    }
    tags.into_iter().collect()
}

fn content_tags(cfg: &SynthesisConfig) -> Vec<String> {
    cfg.content_weights
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, _)| k.clone())
        .collect()
}

impl<S: Scalar> LevelTargets<S> {
    /// Statistics of a texture exemplar.
    pub fn texture(net: &NetworkSpec<S>, source: &Tensor<S>, cfg: &SynthesisConfig) -> Result<Self> {
        let acts = net.forward(source, &style_tags(cfg))?;
        Ok(LevelTargets {
            style: target_stats(&acts),
            regions: None,
            content: None,
        })
    }

    /// Statistics of a style exemplar plus content activations. With
    /// masks, `(style_mask, output_mask)` must match the style and content
    /// images in size.
    pub fn transfer(
        net: &NetworkSpec<S>,
        content: &Tensor<S>,
        style: &Tensor<S>,
        cfg: &SynthesisConfig,
        masks: Option<(&IndexedMask, &IndexedMask)>,
    ) -> Result<Self> {
        let tags = style_tags(cfg);
        let acts = net.forward(style, &tags)?;
        let regions = match masks {
            Some((sm, om)) => {
                check_mask(sm, style, "style mask")?;
                check_mask(om, content, "output mask")?;
                Some(MaskedTargets {
                    style: build_region_stats(&acts, sm)?,
                    output_mask: om.clone(),
                })
            }
            None => None,
        };
        let ctags = content_tags(cfg);
        let content = if ctags.is_empty() {
            None
        } else {
            Some(net.forward(content, &ctags)?)
        };
        Ok(LevelTargets {
            style: target_stats(&acts),
            regions,
            content,
        })
    }
}

fn check_mask<S: Scalar>(mask: &IndexedMask, image: &Tensor<S>, what: &str) -> Result<()> {
    if mask.height() != image.height() || mask.width() != image.width() {
        return Err(Error::config(format!(
            "{what} is {}x{} but its image is {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Which terms an objective includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Gram, histogram, mean, content and TV terms as configured.
    Full,
    /// Gram (and content, when content targets exist) only, evaluated by a
    /// separate code path.
    GramBaseline,
}

/// A loss over images at one resolution.
pub struct Objective<'a, S> {
    pub net: &'a NetworkSpec<S>,
    pub cfg: &'a SynthesisConfig,
    pub targets: &'a LevelTargets<S>,
    pub kind: ObjectiveKind,
}

fn record<S: Scalar>(value: S, pre: S, clamped: &Tensor<S>, threshold: f64) -> TermRecord {
    TermRecord {
        value: value.as_f64(),
        grad_norm: pre.as_f64(),
        clamped_norm: clamped.norm().as_f64(),
        threshold,
    }
}

fn accumulate<S: Scalar>(acc: &mut Option<(S, Tensor<S>)>, value: S, grad: Tensor<S>) {
    match acc {
        Some((v, g)) => {
            *v += value;
            g.add_assign(&grad);
        }
        None => *acc = Some((value, grad)),
    }
}

impl<S: Scalar> Objective<'_, S> {
    pub fn evaluate(&self, image: &Tensor<S>) -> Result<Evaluation<S>> {
        match self.kind {
            ObjectiveKind::Full => self.evaluate_full(image),
            ObjectiveKind::GramBaseline => self.evaluate_baseline(image),
        }
    }

    fn clamp_term(
        &self,
        term: Term,
        value: S,
        grad: &Tensor<S>,
        acc: &mut Option<(S, Tensor<S>)>,
        terms: &mut BTreeMap<Term, TermRecord>,
    ) {
        let t = self.cfg.clamp_thresholds.get(term);
        let (clamped, pre) = auto_tune_clamp(grad, S::lit(t));
        terms.insert(term, record(value, pre, &clamped, t));
        accumulate(acc, value, clamped);
    }

    fn finish(&self, image: &Tensor<S>, acc: Option<(S, Tensor<S>)>, terms: BTreeMap<Term, TermRecord>) -> Evaluation<S> {
        let (value, gradient) = acc.unwrap_or_else(|| {
            (
                S::zero(),
                Tensor::zeros(image.channels(), image.height(), image.width()),
            )
        });
        Evaluation {
            value,
            gradient,
            terms,
        }
    }

    fn evaluate_full(&self, image: &Tensor<S>) -> Result<Evaluation<S>> {
        let cfg = self.cfg;
        let gram_w = scalar_weights::<S>(&cfg.gram_weights);
        let hist_w = scalar_weights::<S>(&cfg.histogram_weights);
        let mean_w = scalar_weights::<S>(&cfg.mean_weights);
        let content_w = match self.targets.content {
            Some(_) => scalar_weights::<S>(&cfg.content_weights),
            None => LayerWeights::new(),
        };
        let mut tags: BTreeSet<&String> = BTreeSet::new();
        for w in [&gram_w, &hist_w, &mean_w, &content_w] {
            tags.extend(w.keys());
        }
        let tags: Vec<&String> = tags.into_iter().collect();
        let mut acc = None;
        let mut terms = BTreeMap::new();
        if !tags.is_empty() {
            let trace = self.net.trace_tags(image, &tags)?;
            let acts = trace.activations(&tags)?;
            if !gram_w.is_empty() {
                let (v, g) = match &self.targets.regions {
                    Some(m) => localized_gram_loss(&acts, &m.output_mask, &m.style, &gram_w)?,
                    None => gram_loss_to_targets(&self.targets.style, &acts, &gram_w)?,
                };
                let img = trace.backward(&g)?;
                self.clamp_term(Term::Gram, v, &img, &mut acc, &mut terms);
            }
            if !hist_w.is_empty() {
                let h = match &self.targets.regions {
                    Some(m) => localized_histogram_loss(
                        &acts,
                        &m.output_mask,
                        &m.style,
                        &hist_w,
                        cfg.histogram_bins,
                    )?,
                    None => histogram_loss_to_targets(&self.targets.style, &acts, &hist_w, cfg.histogram_bins)?,
                };
                let img = trace.backward(&h.grads)?;
                self.clamp_term(Term::Histogram, h.value, &img, &mut acc, &mut terms);
            }
            if !mean_w.is_empty() {
                let (v, g) = mean_activation_loss_to_targets(&self.targets.style, &acts, &mean_w)?;
                let img = trace.backward(&g)?;
                self.clamp_term(Term::Mean, v, &img, &mut acc, &mut terms);
            }
            if let (Some(content), false) = (&self.targets.content, content_w.is_empty()) {
                let (v, g) = content_loss(content, &acts, &content_w)?;
                let img = trace.backward(&g)?;
                self.clamp_term(Term::Content, v, &img, &mut acc, &mut terms);
            }
        }
        if cfg.tv_weight > 0.0 {
            let (v, g) = tv_loss(image, S::lit(cfg.tv_weight));
            self.clamp_term(Term::Tv, v, &g, &mut acc, &mut terms);
        }
        Ok(self.finish(image, acc, terms))
    }

    /// Gram loss plus optional content loss, nothing else.
    fn evaluate_baseline(&self, image: &Tensor<S>) -> Result<Evaluation<S>> {
        let cfg = self.cfg;
        let gram_w = scalar_weights::<S>(&cfg.gram_weights);
        let content_w = match self.targets.content {
            Some(_) => scalar_weights::<S>(&cfg.content_weights),
            None => LayerWeights::new(),
        };
        let tags: Vec<&String> = gram_w
            .keys()
            .chain(content_w.keys())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut acc = None;
        let mut terms = BTreeMap::new();
        if tags.is_empty() {
            return Ok(self.finish(image, acc, terms));
        }
        let trace = self.net.trace_tags(image, &tags)?;
        let acts = trace.activations(&tags)?;
        if !gram_w.is_empty() {
            let (v, g) = match &self.targets.regions {
                Some(m) => localized_gram_loss(&acts, &m.output_mask, &m.style, &gram_w)?,
                None => gram_loss_to_targets(&self.targets.style, &acts, &gram_w)?,
            };
            self.clamp_term(Term::Gram, v, &trace.backward(&g)?, &mut acc, &mut terms);
        }
        if let Some(content) = &self.targets.content {
            if !content_w.is_empty() {
                let (v, g) = content_loss(content, &acts, &content_w)?;
                self.clamp_term(Term::Content, v, &trace.backward(&g)?, &mut acc, &mut terms);
            }
        }
        Ok(self.finish(image, acc, terms))
    }
}

/// Texture loss of `image` against exemplar statistics.
pub fn texture_objective<S: Scalar>(
    targets: &LevelTargets<S>,
    image: &Tensor<S>,
    net: &NetworkSpec<S>,
    cfg: &SynthesisConfig,
) -> Result<Evaluation<S>> {
    let textured = LevelTargets {
        style: targets.style.clone(),
        regions: targets.regions.clone(),
        content: None,
    };
    Objective {
        net,
        cfg,
        targets: &textured,
        kind: ObjectiveKind::Full,
    }
    .evaluate(image)
}

/// Transfer loss: texture terms plus content, with masked style terms when
/// the targets carry masks.
pub fn transfer_objective<S: Scalar>(
    targets: &LevelTargets<S>,
    image: &Tensor<S>,
    net: &NetworkSpec<S>,
    cfg: &SynthesisConfig,
) -> Result<Evaluation<S>> {
    if let Some(m) = &targets.regions {
        if m.output_mask.height() != image.height() || m.output_mask.width() != image.width() {
            return Err(Error::config("output mask does not match the image size"));
        }
    }
    Objective {
        net,
        cfg,
        targets,
        kind: ObjectiveKind::Full,
    }
    .evaluate(image)
}

/// Adam moment decays and denominator offset.
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-12;

/// Runs `iterations` Adam steps on `objective` from `init`, appending one
/// report row per iteration, then clamps the image to `[0, 1]`.
pub fn optimize_level<S: Scalar>(
    init: &Tensor<S>,
    mut objective: impl FnMut(&Tensor<S>) -> Result<Evaluation<S>>,
    iterations: usize,
    step_size: f64,
    level: usize,
    report: &mut LossReport,
) -> Result<Tensor<S>> {
    if iterations == 0 {
        return Err(Error::config("iterations must be at least 1"));
    }
    let mut x = init.clone();
    let n = x.len();
    let mut m = vec![S::zero(); n];
    let mut v = vec![S::zero(); n];
    let (b1, b2, eps, lr) = (S::lit(BETA1), S::lit(BETA2), S::lit(ADAM_EPSILON), S::lit(step_size));
    let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
    let mut b1_pow = S::one();
    let mut b2_pow = S::one();
    for it in 0..iterations {
        let eval = objective(&x)?;
        if !eval.value.is_finite() || !eval.gradient.all_finite() {
            let terms: Vec<String> = eval
                .terms
                .iter()
                .map(|(t, r)| format!("{t}={} (|g|={})", r.value, r.grad_norm))
                .collect();
            return Err(Error::NumericalAbort(format!(
                "non-finite loss or gradient at level {level}, iteration {it}: total={} [{}]",
                eval.value,
                terms.join(", ")
            )));
        }
        report.rows.push(LossRow {
            level,
            iteration: it,
            total: eval.value.as_f64(),
            terms: eval.terms,
        });
        b1_pow *= b1;
        b2_pow *= b2;
        let c1 = S::one() / (S::one() - b1_pow);
        let c2 = S::one() / (S::one() - b2_pow);
        for (((xi, &gi), mi), vi) in x
            .data_mut()
            .iter_mut()
            .zip(eval.gradient.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let mhat = *mi * c1;
            let vhat = *vi * c2;
            *xi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(x.clamp(S::zero(), S::one()))
}

/// Per-channel uniform noise on `[0, 1)`.
pub fn white_noise<S: Scalar>(channels: usize, height: usize, width: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(channels, height, width);
    for c in 0..channels {
        for v in t.plane_mut(c) {
            *v = S::lit(rng.random_range(0.0..1.0));
        }
    }
    t
}

/// `[image, image/2, image/4, ...]` by 2x2 averaging, finest first.
pub fn image_pyramid<S: Scalar>(image: &Tensor<S>, levels: usize) -> Result<Vec<Tensor<S>>> {
    let mut out = vec![image.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        if prev.height() % 2 != 0 || prev.width() % 2 != 0 {
            return Err(Error::config(format!(
                "image of {}x{} cannot be halved for {levels} pyramid levels",
                image.width(),
                image.height()
            )));
        }
        out.push(pool2(prev, PoolMode::Average)?);
    }
    Ok(out)
}

fn level_size(full: (usize, usize), levels: usize, level: usize) -> Result<(usize, usize)> {
    let f = 1usize << (levels - 1 - level);
    if full.0 % f != 0 || full.1 % f != 0 {
        return Err(Error::config(format!(
            "output {}x{} is not divisible by {f} for {levels} pyramid levels",
            full.1, full.0
        )));
    }
    Ok((full.0 / f, full.1 / f))
}

fn pyramid_sizes<S: Scalar>(pyramid: &[Tensor<S>]) -> Vec<(usize, usize)> {
    pyramid.iter().map(|t| (t.height(), t.width())).collect()
}

fn check_level_sizes<S: Scalar>(
    net: &NetworkSpec<S>,
    cfg: &SynthesisConfig,
    sizes: &[(usize, usize)],
) -> Result<()> {
    let mut tags = style_tags(cfg);
    tags.extend(content_tags(cfg));
    let depth = tags
        .iter()
        .map(|t| net.tag_index(t))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    for &(h, w) in sizes {
        net.check_input_size(h, w, depth)?;
    }
    Ok(())
}

/// Coarse-to-fine optimization. `targets_at(level)` supplies the
/// statistics for each level, coarsest first.
fn run_pyramid<S: Scalar>(
    net: &NetworkSpec<S>,
    cfg: &SynthesisConfig,
    out_size: (usize, usize),
    mut targets_at: impl FnMut(usize) -> Result<LevelTargets<S>>,
    kind: ObjectiveKind,
) -> Result<(Tensor<S>, LossReport)> {
    cfg.validate()?;
    let levels = cfg.pyramid_levels;
    let sizes = (0..levels)
        .map(|l| level_size(out_size, levels, l))
        .collect::<Result<Vec<_>>>()?;
    check_level_sizes(net, cfg, &sizes)?;
    let budget = cfg.iterations_per_level();
    let mut report = LossReport::default();
    let (h0, w0) = sizes[0];
    let mut image = white_noise::<S>(net.input_channels(), h0, w0, cfg.seed);
    for level in 0..levels {
        if level > 0 {
            image = upsample_bilinear2(&image);
        }
        if budget[level] == 0 {
            continue;
        }
        let targets = targets_at(level)?;
        if let Some(m) = &targets.regions {
            report
                .warnings
                .extend(m.style.warnings.iter().map(|w| format!("level {level}: {w}")));
        }
        let objective = Objective {
            net,
            cfg,
            targets: &targets,
            kind,
        };
        image = optimize_level(
            &image,
            |x| objective.evaluate(x),
            budget[level],
            cfg.step_size,
            level,
            &mut report,
        )?;
    }
    Ok((image, report))
}

fn output_size<S: Scalar>(cfg: &SynthesisConfig, like: &Tensor<S>) -> (usize, usize) {
    (
        cfg.output_height.unwrap_or(like.height()),
        cfg.output_width.unwrap_or(like.width()),
    )
}

fn texture_run<S: Scalar>(
    net: &NetworkSpec<S>,
    source: &Tensor<S>,
    cfg: &SynthesisConfig,
    kind: ObjectiveKind,
) -> Result<(Tensor<S>, LossReport)> {
    cfg.validate()?;
    let pyramid = image_pyramid(source, cfg.pyramid_levels)?;
    let levels = cfg.pyramid_levels;
    let texture_cfg = SynthesisConfig {
        content_weights: BTreeMap::new(),
        ..cfg.clone()
    };
    check_level_sizes(net, &texture_cfg, &pyramid_sizes(&pyramid))?;
    run_pyramid(
        net,
        &texture_cfg,
        output_size(cfg, source),
        |level| LevelTargets::texture(net, &pyramid[levels - 1 - level], &texture_cfg),
        kind,
    )
}

/// Synthesizes a texture from white noise, matching the exemplar's
/// statistics at every pyramid level.
pub fn synthesize_texture<S: Scalar>(
    net: &NetworkSpec<S>,
    source: &Tensor<S>,
    cfg: &SynthesisConfig,
) -> Result<(Tensor<S>, LossReport)> {
    texture_run(net, source, cfg, ObjectiveKind::Full)
}

/// Texture synthesis with the Gram-only objective.
pub fn synthesize_texture_baseline<S: Scalar>(
    net: &NetworkSpec<S>,
    source: &Tensor<S>,
    cfg: &SynthesisConfig,
) -> Result<(Tensor<S>, LossReport)> {
    texture_run(net, source, cfg, ObjectiveKind::GramBaseline)
}

/// Exemplar and output masks for style transfer, at full resolution.
#[derive(Clone, Copy, Debug)]
pub struct TransferMasks<'a> {
    pub style: &'a IndexedMask,
    pub output: &'a IndexedMask,
}

fn transfer_run<S: Scalar>(
    net: &NetworkSpec<S>,
    content: &Tensor<S>,
    style: &Tensor<S>,
    cfg: &SynthesisConfig,
    masks: Option<TransferMasks<'_>>,
    kind: ObjectiveKind,
) -> Result<(Tensor<S>, LossReport)> {
    cfg.validate()?;
    if cfg.output_width.is_some_and(|w| w != content.width())
        || cfg.output_height.is_some_and(|h| h != content.height())
    {
        return Err(Error::config("style transfer output size is the content size"));
    }
    if let Some(m) = masks {
        check_mask(m.style, style, "style mask")?;
        check_mask(m.output, content, "output mask")?;
    }
    let levels = cfg.pyramid_levels;
    let content_pyr = image_pyramid(content, levels)?;
    let style_pyr = image_pyramid(style, levels)?;
    check_level_sizes(net, cfg, &pyramid_sizes(&style_pyr))?;
    run_pyramid(
        net,
        cfg,
        (content.height(), content.width()),
        |level| {
            let f = 1usize << (levels - 1 - level);
            let scaled = match masks {
                Some(m) => Some((downsample_mask(m.style, f)?.mask, downsample_mask(m.output, f)?.mask)),
                None => None,
            };
            LevelTargets::transfer(
                net,
                &content_pyr[levels - 1 - level],
                &style_pyr[levels - 1 - level],
                cfg,
                scaled.as_ref().map(|(s, o)| (s, o)),
            )
        },
        kind,
    )
}

/// Style transfer from white noise; `masks` enables per-region statistics.
pub fn style_transfer<S: Scalar>(
    net: &NetworkSpec<S>,
    content: &Tensor<S>,
    style: &Tensor<S>,
    cfg: &SynthesisConfig,
    masks: Option<TransferMasks<'_>>,
) -> Result<(Tensor<S>, LossReport)> {
    transfer_run(net, content, style, cfg, masks, ObjectiveKind::Full)
}

/// Style transfer with Gram and content terms only.
pub fn style_transfer_baseline<S: Scalar>(
    net: &NetworkSpec<S>,
    content: &Tensor<S>,
    style: &Tensor<S>,
    cfg: &SynthesisConfig,
    masks: Option<TransferMasks<'_>>,
) -> Result<(Tensor<S>, LossReport)> {
    transfer_run(net, content, style, cfg, masks, ObjectiveKind::GramBaseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::stripes;
    use crate::network::random_filter_bank;
    use crate::tensor::{finite_diff_gradient, relative_error};

    fn small_net() -> NetworkSpec<f64> {
        random_filter_bank(3, &[3, 4, 6]).unwrap()
    }

    fn small_cfg() -> SynthesisConfig {
        SynthesisConfig {
            gram_weights: weights_for(&["relu1_1", "relu2_1"], 1.0),
            histogram_weights: weights_for(&["relu1_1", "relu2_1"], 1.0),
            content_weights: weights_for(&["relu2_1"], 1.0),
            pyramid_levels: 1,
            iterations: 20,
            ..SynthesisConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = SynthesisConfig::default();
        assert_eq!(c.gram_weights.keys().collect::<Vec<_>>(), ["relu1_1", "relu2_1", "relu3_1", "relu4_1"]);
        assert_eq!(c.histogram_weights.keys().collect::<Vec<_>>(), ["relu1_1", "relu4_1"]);
        assert_eq!(c.content_weights.keys().collect::<Vec<_>>(), ["relu4_1"]);
        assert_eq!(c.clamp_thresholds.gram, 100.0);
        for t in [Term::Histogram, Term::Mean, Term::Content, Term::Tv] {
            assert_eq!(c.clamp_thresholds.get(t), 1.0);
        }
        assert_eq!(c.iterations, 700);
        assert_eq!(c.step_size, 0.02);
        c.validate().unwrap();
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = SynthesisConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SynthesisConfig>(&s).unwrap(), c);
        let partial: SynthesisConfig = serde_json::from_str(r#"{"iterations": 5}"#).unwrap();
        assert_eq!(partial.iterations, 5);
        assert_eq!(partial.gram_weights, c.gram_weights);
        assert!(serde_json::from_str::<SynthesisConfig>(r#"{"iteration": 5}"#).is_err());
        for bad in [
            SynthesisConfig { iterations: 0, ..c.clone() },
            SynthesisConfig { pyramid_levels: 0, ..c.clone() },
            SynthesisConfig { tv_weight: -1.0, ..c.clone() },
            SynthesisConfig { step_size: 0.0, ..c.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn iteration_split() {
        let c = SynthesisConfig { iterations: 700, pyramid_levels: 3, ..Default::default() };
        assert_eq!(c.iterations_per_level(), vec![233, 233, 234]);
        let c = SynthesisConfig { iterations: 10, pyramid_levels: 1, ..Default::default() };
        assert_eq!(c.iterations_per_level(), vec![10]);
    }

    #[test]
    fn clamp_examples() {
        let g = Tensor::from_vec(1, 1, 2, vec![3.0f64, 4.0]).unwrap();
        let (c, n) = auto_tune_clamp(&g, 10.0);
        assert_eq!((c, n), (g.clone(), 5.0));
        let (c, n) = auto_tune_clamp(&g, 2.5);
        assert_eq!(n, 5.0);
        assert!((c.norm() - 2.5).abs() < 1e-15);
        assert_eq!(c.data(), &[1.5, 2.0]);
    }

    #[test]
    fn clamped_norm_never_exceeds_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = Tensor::from_fn(3, 17, 13, |_, _, _| rng.random_range(-50.0..50.0f64));
            let t = rng.random_range(0.5..150.0);
            let (c, _) = auto_tune_clamp(&g, t);
            assert!(c.norm() <= t);
            assert!(c.norm() > t * (1.0 - 1e-14));
        }
    }

    #[test]
    fn combined_gradient_is_sum_of_clamped_terms() {
        let net = small_net();
        let src = stripes::<f64>(16, 16, 4);
        let cfg = SynthesisConfig {
            mean_weights: weights_for(&["relu2_1"], 1.0),
            ..small_cfg()
        };
        let targets = LevelTargets::texture(&net, &src, &cfg).unwrap();
        let x = white_noise(3, 16, 16, 1);
        let full = texture_objective(&targets, &x, &net, &cfg).unwrap();
        assert_eq!(full.terms.len(), 4);
        let mut sum = Tensor::zeros(3, 16, 16);
        let mut value = 0.0;
        for (term, rec) in &full.terms {
            let only = SynthesisConfig {
                gram_weights: if *term == Term::Gram { cfg.gram_weights.clone() } else { BTreeMap::new() },
                histogram_weights: if *term == Term::Histogram { cfg.histogram_weights.clone() } else { BTreeMap::new() },
                mean_weights: if *term == Term::Mean { cfg.mean_weights.clone() } else { BTreeMap::new() },
                tv_weight: if *term == Term::Tv { cfg.tv_weight } else { 0.0 },
                ..cfg.clone()
            };
            let e = texture_objective(&targets, &x, &net, &only).unwrap();
            assert_eq!(e.terms[term], *rec);
            assert!(e.gradient.norm() <= cfg.clamp_thresholds.get(*term) + 1e-12);
            sum.add_assign(&e.gradient);
            value += e.value;
        }
        assert!(relative_error(&sum, &full.gradient, 1e-300) < 1e-14);
        assert!((value - full.value).abs() <= 1e-14 * value.abs());
    }

    #[test]
    fn zero_histogram_and_tv_reproduce_baseline_bitwise() {
        let net = small_net();
        let src = stripes::<f64>(16, 16, 4);
        let cfg = SynthesisConfig { tv_weight: 0.0, histogram_weights: BTreeMap::new(), iterations: 8, ..small_cfg() };
        let (a, ra) = synthesize_texture(&net, &src, &cfg).unwrap();
        let (b, rb) = synthesize_texture_baseline(&net, &src, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn statistically_identical_output_has_near_zero_loss() {
        let net = small_net();
        let src = stripes::<f64>(16, 16, 4);
        let cfg = SynthesisConfig { tv_weight: 0.0, ..small_cfg() };
        let targets = LevelTargets::texture(&net, &src, &cfg).unwrap();
        let e = texture_objective(&targets, &src, &net, &cfg).unwrap();
        assert!(e.terms[&Term::Gram].value < 1e-20);
        assert!(e.value < 1e-4);
    }

    #[test]
    fn transfer_gradient_matches_finite_differences() {
        let net = small_net();
        let content = stripes::<f64>(16, 16, 4);
        let style = white_noise(3, 16, 16, 9);
        // unclamped: thresholds above every gradient norm
        let cfg = SynthesisConfig {
            histogram_weights: BTreeMap::new(),
            clamp_thresholds: ClampThresholds { gram: 1e9, histogram: 1e9, mean: 1e9, content: 1e9, tv: 1e9 },
            tv_weight: 0.01,
            ..small_cfg()
        };
        let targets = LevelTargets::transfer(&net, &content, &style, &cfg, None).unwrap();
        let x = white_noise(3, 16, 16, 4);
        let e = transfer_objective(&targets, &x, &net, &cfg).unwrap();
        let numeric = finite_diff_gradient(
            |t| transfer_objective(&targets, t, &net, &cfg).unwrap().value,
            &x,
            1e-5,
        );
        assert!(relative_error(&e.gradient, &numeric, 1e-12) < 1e-4);
    }

    #[test]
    fn zero_content_weight_reduces_to_texture_objective() {
        let net = small_net();
        let content = stripes::<f64>(16, 16, 4);
        let style = white_noise(3, 16, 16, 2);
        let cfg = SynthesisConfig { content_weights: BTreeMap::new(), ..small_cfg() };
        let t = LevelTargets::transfer(&net, &content, &style, &cfg, None).unwrap();
        let tex = LevelTargets::texture(&net, &style, &cfg).unwrap();
        let x = white_noise(3, 16, 16, 5);
        let a = transfer_objective(&t, &x, &net, &cfg).unwrap();
        let b = texture_objective(&tex, &x, &net, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gradient_leaves_init_unchanged() {
        let init = white_noise::<f64>(3, 4, 4, 1);
        let mut report = LossReport::default();
        let out = optimize_level(
            &init,
            |x| Ok(Evaluation { value: 0.0, gradient: Tensor::zeros(x.channels(), x.height(), x.width()), terms: BTreeMap::new() }),
            5,
            0.02,
            0,
            &mut report,
        )
        .unwrap();
        assert_eq!(out, init);
        assert_eq!(report.len(), 5);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let init = white_noise::<f64>(3, 4, 4, 1);
        let mut report = LossReport::default();
        let err = optimize_level(
            &init,
            |x| Ok(Evaluation { value: f64::NAN, gradient: x.clone(), terms: BTreeMap::new() }),
            5,
            0.02,
            0,
            &mut report,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NumericalAbort(_)));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let net = small_net();
        let src = stripes::<f64>(16, 16, 4);
        let cfg = SynthesisConfig { pyramid_levels: 2, iterations: 6, ..small_cfg() };
        let a = synthesize_texture(&net, &src, &cfg).unwrap();
        let b = synthesize_texture(&net, &src, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 6);
        let c = synthesize_texture(&net, &src, &SynthesisConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn single_level_pyramid_is_the_single_scale_path() {
        let net = small_net();
        let src = stripes::<f64>(16, 16, 4);
        let cfg = SynthesisConfig { iterations: 5, ..small_cfg() };
        let (a, ra) = synthesize_texture(&net, &src, &cfg).unwrap();
        let targets = LevelTargets::texture(&net, &src, &cfg).unwrap();
        let mut rb = LossReport::default();
        let b = optimize_level(
            &white_noise(3, 16, 16, cfg.seed),
            |x| texture_objective(&targets, x, &net, &cfg),
            5,
            cfg.step_size,
            0,
            &mut rb,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn pyramid_rejects_indivisible_sizes() {
        let net = small_net();
        let src = stripes::<f64>(12, 12, 4);
        let cfg = SynthesisConfig { pyramid_levels: 3, ..small_cfg() };
        assert!(matches!(synthesize_texture(&net, &src, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn report_json_lines() {
        let net = small_net();
        let src = stripes::<f64>(16, 16, 4);
        let cfg = SynthesisConfig { iterations: 3, ..small_cfg() };
        let (_, r) = synthesize_texture(&net, &src, &cfg).unwrap();
        let text = r.to_json_lines().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let row: LossRow = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(row, r.rows[2]);
        assert!(lines[0].contains("\"gram\""));
        assert!(r.max_clamp_excess() <= 1e-12);
    }
}
