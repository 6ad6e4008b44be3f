//! Statistic-matching losses over feature activations.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the synthesized activations (or, for total variation, the
//! image). Feature maps are viewed as `features x pixels` matrices.
//!
//! Gram matrices are compared after normalizing by their sample counts, so
//! exemplar and output may have different spatial sizes. When the sizes
//! agree this is exactly `α / |S|² · ‖G(S) − G(O)‖²`.
//!
//! The histogram loss remaps each output feature so that its marginal
//! matches the exemplar's, then penalizes `γ / n · ‖O − R(O)‖²` with `R(O)`
//! held constant during differentiation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::ActivationSet;
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_HISTOGRAM_BINS: usize = 256;

/// Per-tag loss weights.
pub type LayerWeights<S> = BTreeMap<String, S>;

/// Uncentred inner products between feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<S> {
    size: usize,
    entries: Vec<S>,
    sample_count: usize,
}

impl<S: Scalar> GramMatrix<S> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn entries(&self) -> &[S] {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> S {
        self.entries[i * self.size + j]
    }

    /// Entries divided by the sample count: the sample non-central second
    /// moment matrix. All zeros for an empty sample.
    pub fn normalized(&self) -> Vec<S> {
        if self.sample_count == 0 {
            return vec![S::zero(); self.entries.len()];
        }
        let inv = S::one() / S::lit(self.sample_count as f64);
        self.entries.iter().map(|&v| v * inv).collect()
    }
}

/// Gram matrix of a `n_features x n_pixels` row-major feature matrix.
pub fn gram_matrix<S: Scalar>(features: &[S], n_features: usize, n_pixels: usize) -> GramMatrix<S> {
    debug_assert_eq!(features.len(), n_features * n_pixels);
    let mut entries = vec![S::zero(); n_features * n_features];
    for i in 0..n_features {
        let fi = &features[i * n_pixels..(i + 1) * n_pixels];
        for j in i..n_features {
            let v = dot(fi, &features[j * n_pixels..(j + 1) * n_pixels]);
            entries[i * n_features + j] = v;
            entries[j * n_features + i] = v;
        }
    }
    GramMatrix {
        size: n_features,
        entries,
        sample_count: n_pixels,
    }
}

pub fn gram<S: Scalar>(t: &Tensor<S>) -> GramMatrix<S> {
    gram_matrix(t.data(), t.channels(), t.plane_len())
}

/// Binned marginal distribution over `[min, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram<S> {
    min: S,
    max: S,
    counts: Vec<S>,
    total: S,
}

impl<S: Scalar> Histogram<S> {
    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn range(&self) -> (S, S) {
        (self.min, self.max)
    }

    pub fn counts(&self) -> &[S] {
        &self.counts
    }

    pub fn total(&self) -> S {
        self.total
    }

    pub fn bin_width(&self) -> S {
        (self.max - self.min) / S::lit(self.counts.len() as f64)
    }

    /// Bin of `v`; values outside the range are clamped into the end bins and
    /// the top edge belongs to the last bin.
    pub fn bin_of(&self, v: S) -> usize {
        let bins = self.counts.len();
        if self.max <= self.min {
            return 0;
        }
        let pos = ((v - self.min) / (self.max - self.min) * S::lit(bins as f64)).floor();
        if !(pos > S::zero()) {
            0
        } else {
            pos.to_usize().unwrap_or(bins - 1).min(bins - 1)
        }
    }

    /// Mean of the binned distribution using bin centres.
    pub fn mean(&self) -> S {
        let w = self.bin_width();
        let half = S::lit(0.5);
        let mut acc = S::zero();
        for (b, &c) in self.counts.iter().enumerate() {
            acc += c * (self.min + (S::lit(b as f64) + half) * w);
        }
        acc / self.total
    }

    /// Histogram of `values` with the same bins as `self`.
    pub fn rebin(&self, values: &[S]) -> Histogram<S> {
        let mut counts = vec![S::zero(); self.counts.len()];
        for &v in values {
            counts[self.bin_of(v)] += S::one();
        }
        Histogram {
            min: self.min,
            max: self.max,
            counts,
            total: S::lit(values.len() as f64),
        }
    }
}

/// Counts `values` into `bin_count` equal bins over `range`, or over the
/// values' own extent when `range` is `None`.
pub fn compute_histogram<S: Scalar>(
    values: &[S],
    bin_count: usize,
    range: Option<(S, S)>,
) -> Result<Histogram<S>> {
    if values.is_empty() {
        return Err(Error::Empty("histogram of no values".into()));
    }
    if bin_count == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let (min, max) = match range {
        Some((lo, hi)) => {
            if !(lo <= hi) {
                return Err(Error::config("histogram range min exceeds max"));
            }
            (lo, hi)
        }
        None => extent(values),
    };
    let proto = Histogram {
        min,
        max,
        counts: vec![S::zero(); bin_count],
        total: S::zero(),
    };
    Ok(proto.rebin(values))
}

fn extent<S: Scalar>(values: &[S]) -> (S, S) {
    values.iter().fold((values[0], values[0]), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Indices of `values` in ascending order; equal values keep input order.
fn stable_order<S: Scalar>(values: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_order(&values[b]));
    idx
}

/// Monotone remap of `values` onto the distribution of `target`.
///
/// The value of rank `k` (of `n`) is sent to the target quantile
/// `(k + ½) / n`, found by inverting the cumulative counts and interpolating
/// uniformly inside the selected bin. Ties are ranked by input position.
pub fn histogram_match<S: Scalar>(values: &[S], target: &Histogram<S>) -> Vec<S> {
    let n = values.len();
    let mut out = vec![S::zero(); n];
    if n == 0 {
        return out;
    }
    let order = stable_order(values);
    let width = target.bin_width();
    let scale = target.total / S::lit(n as f64);
    let half = S::lit(0.5);
    let mut bin = 0usize;
    let mut below = S::zero(); // cumulative count before `bin`
    let last = target.counts.len() - 1;
    for (rank, &i) in order.iter().enumerate() {
        let q = (S::lit(rank as f64) + half) * scale;
        while bin < last && below + target.counts[bin] <= q {
            below += target.counts[bin];
            bin += 1;
        }
        let c = target.counts[bin];
        let frac = if c > S::zero() {
            ((q - below) / c).min(S::one()).max(S::zero())
        } else {
            half
        };
        out[i] = target.min + (S::lit(bin as f64) + frac) * width;
    }
    out
}

/// Exemplar statistics of one tagged layer (or one masked region of it).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTargets<S> {
    pub gram: GramMatrix<S>,
    /// Ascending activation values per feature.
    pub sorted_samples: Vec<Vec<S>>,
    pub means: Vec<S>,
}

impl<S: Scalar> LayerTargets<S> {
    pub fn from_features(features: &[S], n_features: usize, n_pixels: usize) -> Self {
        let gram = gram_matrix(features, n_features, n_pixels);
        let mut sorted_samples = Vec::with_capacity(n_features);
        let mut means = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let mut row = features[f * n_pixels..(f + 1) * n_pixels].to_vec();
            means.push(feature_mean(&row));
            row.sort_by(|a, b| a.total_order(b));
            sorted_samples.push(row);
        }
        LayerTargets {
            gram,
            sorted_samples,
            means,
        }
    }

    pub fn from_tensor(t: &Tensor<S>) -> Self {
        Self::from_features(t.data(), t.channels(), t.plane_len())
    }

    pub fn feature_count(&self) -> usize {
        self.gram.size()
    }

    pub fn pixel_count(&self) -> usize {
        self.gram.sample_count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count() == 0
    }

    /// Per-feature histograms over each feature's own value range.
    pub fn histograms(&self, bins: usize) -> Result<Vec<Histogram<S>>> {
        self.sorted_samples
            .iter()
            .map(|s| compute_histogram(s, bins, None))
            .collect()
    }
}

fn feature_mean<S: Scalar>(row: &[S]) -> S {
    if row.is_empty() {
        return S::zero();
    }
    let mut acc = S::zero();
    for &v in row {
        acc += v;
    }
    acc / S::lit(row.len() as f64)
}

/// Exemplar statistics keyed by tag.
pub type TargetStats<S> = BTreeMap<String, LayerTargets<S>>;

pub fn target_stats<S: Scalar>(acts: &ActivationSet<S>) -> TargetStats<S> {
    acts.iter()
        .map(|(k, t)| (k.clone(), LayerTargets::from_tensor(t)))
        .collect()
}

// ---- per-layer kernels -------------------------------------------------
//
// Each kernel takes a `features x pixels` block of output activations and
// returns `(weighted value, weighted gradient)` for that block. The masked
// losses call the same kernels on gathered region blocks.

pub(crate) fn gram_kernel<S: Scalar>(
    target: &GramMatrix<S>,
    features: &[S],
    n_features: usize,
    n_pixels: usize,
    weight: S,
) -> (S, Vec<S>) {
    let mut grad = vec![S::zero(); features.len()];
    if n_pixels == 0 || target.sample_count() == 0 {
        return (S::zero(), grad);
    }
    let out = gram_matrix(features, n_features, n_pixels).normalized();
    let src = target.normalized();
    let diff: Vec<S> = out.iter().zip(&src).map(|(o, s)| *o - *s).collect();
    let nf = S::lit(n_features as f64);
    let scale = weight / (nf * nf);
    let value = scale * dot(&diff, &diff);
    // d/dF of scale·‖F Fᵀ/n − Ĝ‖² = scale · 4/n · D F
    let gscale = scale * S::lit(4.0) / S::lit(n_pixels as f64);
    for i in 0..n_features {
        let row = &mut grad[i * n_pixels..(i + 1) * n_pixels];
        for j in 0..n_features {
            let d = diff[i * n_features + j] * gscale;
            if d == S::zero() {
                continue;
            }
            let fj = &features[j * n_pixels..(j + 1) * n_pixels];
            for (g, f) in row.iter_mut().zip(fj) {
                *g += d * *f;
            }
        }
    }
    (value, grad)
}

/// Matches `row` to the histogram of `sorted_samples`, binned over the
/// union of both value ranges. Returns the remapped values and the bin width.
fn remap_feature<S: Scalar>(sorted_samples: &[S], row: &[S], bins: usize) -> (Vec<S>, S) {
    let (omin, omax) = extent(row);
    let lo = sorted_samples[0].min(omin);
    let hi = sorted_samples[sorted_samples.len() - 1].max(omax);
    let target = compute_histogram(sorted_samples, bins, Some((lo, hi)))
        .expect("non-empty samples and ordered range");
    (histogram_match(row, &target), target.bin_width())
}

/// The values `R(O)` the histogram loss pulls each tagged activation
/// towards; the loss gradient treats them as constants.
pub fn histogram_remap_to_targets<S: Scalar>(
    targets: &TargetStats<S>,
    outputs: &ActivationSet<S>,
    tags: &[&str],
    bins: usize,
) -> Result<ActivationSet<S>> {
    let mut out = ActivationSet::new();
    for &tag in tags {
        let (t, o) = lookup(tag, targets, outputs)?;
        check_features(tag, t, o)?;
        let mut r = o.clone();
        for f in 0..o.channels() {
            if t.sorted_samples[f].is_empty() {
                continue;
            }
            let (remapped, _) = remap_feature(&t.sorted_samples[f], o.plane(f), bins);
            r.plane_mut(f).copy_from_slice(&remapped);
        }
        out.insert(tag.to_string(), r);
    }
    Ok(out)
}

/// Result of the histogram kernel for one block.
pub(crate) struct HistogramKernelOutput<S> {
    pub value: S,
    pub grad: Vec<S>,
    /// `‖O_f − R(O_f)‖²` per feature, unweighted.
    pub residuals: Vec<S>,
    /// Bin width used for each feature's remap.
    pub bin_widths: Vec<S>,
}

/// `normalizer` is the activation count `n` the loss is divided by.
pub(crate) fn histogram_kernel<S: Scalar>(
    sorted_samples: &[Vec<S>],
    features: &[S],
    n_features: usize,
    n_pixels: usize,
    weight: S,
    bins: usize,
    normalizer: usize,
) -> HistogramKernelOutput<S> {
    let mut out = HistogramKernelOutput {
        value: S::zero(),
        grad: vec![S::zero(); features.len()],
        residuals: vec![S::zero(); n_features],
        bin_widths: vec![S::zero(); n_features],
    };
    if n_pixels == 0 || normalizer == 0 {
        return out;
    }
    let inv_n = S::one() / S::lit(normalizer as f64);
    let two = S::lit(2.0);
    for f in 0..n_features {
        let samples = &sorted_samples[f];
        if samples.is_empty() {
            continue;
        }
        let row = &features[f * n_pixels..(f + 1) * n_pixels];
        let (remapped, bin_width) = remap_feature(samples, row, bins);
        let mut sq = S::zero();
        let grow = &mut out.grad[f * n_pixels..(f + 1) * n_pixels];
        for ((g, &o), &r) in grow.iter_mut().zip(row).zip(&remapped) {
            let d = o - r;
            sq += d * d;
            *g = two * weight * inv_n * d;
        }
        out.residuals[f] = sq;
        out.bin_widths[f] = bin_width;
        out.value += weight * inv_n * sq;
    }
    out
}

pub(crate) fn mean_kernel<S: Scalar>(
    target_means: &[S],
    features: &[S],
    n_features: usize,
    n_pixels: usize,
    weight: S,
) -> (S, Vec<S>) {
    let mut grad = vec![S::zero(); features.len()];
    if n_pixels == 0 {
        return (S::zero(), grad);
    }
    let mut value = S::zero();
    let inv_n = S::one() / S::lit(n_pixels as f64);
    for f in 0..n_features {
        let row = &features[f * n_pixels..(f + 1) * n_pixels];
        let d = feature_mean(row) - target_means[f];
        value += weight * d * d;
        let g = S::lit(2.0) * weight * d * inv_n;
        grad[f * n_pixels..(f + 1) * n_pixels].fill(g);
    }
    (value, grad)
}

fn check_features<S: Scalar>(tag: &str, target: &LayerTargets<S>, out: &Tensor<S>) -> Result<()> {
    if target.feature_count() != out.channels() {
        return Err(Error::shape(format!(
            "{tag}: exemplar has {} features, output has {}",
            target.feature_count(),
            out.channels()
        )));
    }
    Ok(())
}

fn lookup<'a, S>(
    tag: &str,
    targets: &'a TargetStats<S>,
    outputs: &'a ActivationSet<S>,
) -> Result<(&'a LayerTargets<S>, &'a Tensor<S>)> {
    let t = targets
        .get(tag)
        .ok_or_else(|| Error::config(format!("no exemplar statistics for tag {tag}")))?;
    let o = outputs
        .get(tag)
        .ok_or_else(|| Error::config(format!("no output activations for tag {tag}")))?;
    Ok((t, o))
}

fn active<S: Scalar>(weights: &LayerWeights<S>) -> impl Iterator<Item = (&String, S)> {
    weights
        .iter()
        .filter(|(_, w)| **w > S::zero())
        .map(|(k, w)| (k, *w))
}

/// Loss value and gradients with respect to the tagged activations.
pub type LossAndGrads<S> = (S, ActivationSet<S>);

/// `Σ_l α_l / N_l² · ‖Ĝ(S_l) − Ĝ(O_l)‖²` against precomputed exemplar statistics.
pub fn gram_loss_to_targets<S: Scalar>(
    targets: &TargetStats<S>,
    outputs: &ActivationSet<S>,
    weights: &LayerWeights<S>,
) -> Result<LossAndGrads<S>> {
    let mut total = S::zero();
    let mut grads = ActivationSet::new();
    for (tag, w) in active(weights) {
        let (t, o) = lookup(tag, targets, outputs)?;
        check_features(tag, t, o)?;
        let (v, g) = gram_kernel(&t.gram, o.data(), o.channels(), o.plane_len(), w);
        total += v;
        grads.insert(tag.clone(), Tensor::from_vec(o.channels(), o.height(), o.width(), g)?);
    }
    Ok((total, grads))
}

pub fn gram_loss<S: Scalar>(
    source: &ActivationSet<S>,
    outputs: &ActivationSet<S>,
    weights: &LayerWeights<S>,
) -> Result<LossAndGrads<S>> {
    gram_loss_to_targets(&target_stats(source), outputs, weights)
}

pub fn mean_activation_loss_to_targets<S: Scalar>(
    targets: &TargetStats<S>,
    outputs: &ActivationSet<S>,
    weights: &LayerWeights<S>,
) -> Result<LossAndGrads<S>> {
    let mut total = S::zero();
    let mut grads = ActivationSet::new();
    for (tag, w) in active(weights) {
        let (t, o) = lookup(tag, targets, outputs)?;
        check_features(tag, t, o)?;
        let (v, g) = mean_kernel(&t.means, o.data(), o.channels(), o.plane_len(), w);
        total += v;
        grads.insert(tag.clone(), Tensor::from_vec(o.channels(), o.height(), o.width(), g)?);
    }
    Ok((total, grads))
}

/// `Σ_l w_l Σ_f (mean(S_lf) − mean(O_lf))²`.
pub fn mean_activation_loss<S: Scalar>(
    source: &ActivationSet<S>,
    outputs: &ActivationSet<S>,
    weights: &LayerWeights<S>,
) -> Result<LossAndGrads<S>> {
    mean_activation_loss_to_targets(&target_stats(source), outputs, weights)
}

/// Per-tag detail of a histogram loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramDetail<S> {
    /// `‖O_f − R(O_f)‖² / n` per feature.
    pub normalized_residuals: Vec<S>,
    pub bin_widths: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct HistogramLoss<S> {
    pub value: S,
    pub grads: ActivationSet<S>,
    pub detail: BTreeMap<String, HistogramDetail<S>>,
}

pub fn histogram_loss_to_targets<S: Scalar>(
    targets: &TargetStats<S>,
    outputs: &ActivationSet<S>,
    weights: &LayerWeights<S>,
    bins: usize,
) -> Result<HistogramLoss<S>> {
    let mut res = HistogramLoss {
        value: S::zero(),
        grads: ActivationSet::new(),
        detail: BTreeMap::new(),
    };
    for (tag, w) in active(weights) {
        let (t, o) = lookup(tag, targets, outputs)?;
        check_features(tag, t, o)?;
        let n = o.plane_len();
        let k = histogram_kernel(&t.sorted_samples, o.data(), o.channels(), n, w, bins, n);
        res.value += k.value;
        res.grads.insert(
            tag.clone(),
            Tensor::from_vec(o.channels(), o.height(), o.width(), k.grad)?,
        );
        let inv_n = S::one() / S::lit(n as f64);
        res.detail.insert(
            tag.clone(),
            HistogramDetail {
                normalized_residuals: k.residuals.iter().map(|&r| r * inv_n).collect(),
                bin_widths: k.bin_widths,
            },
        );
    }
    Ok(res)
}

/// Histogram loss of one layer against fixed per-feature target histograms:
/// `γ / n · Σ_f ‖O_f − R(O_f)‖²` with gradient `2γ / n · (O − R(O))`.
pub fn histogram_loss<S: Scalar>(
    output: &Tensor<S>,
    targets: &[Histogram<S>],
    weight: S,
) -> Result<(S, Tensor<S>)> {
    if targets.len() != output.channels() {
        return Err(Error::shape(format!(
            "{} target histograms for {} features",
            targets.len(),
            output.channels()
        )));
    }
    let n = output.plane_len();
    let inv_n = S::one() / S::lit(n as f64);
    let mut grad = Tensor::zeros(output.channels(), output.height(), output.width());
    let mut value = S::zero();
    for (f, target) in targets.iter().enumerate() {
        let row = output.plane(f);
        let remapped = histogram_match(row, target);
        let mut sq = S::zero();
        for ((g, &o), &r) in grad.plane_mut(f).iter_mut().zip(row).zip(&remapped) {
            let d = o - r;
            sq += d * d;
            *g = S::lit(2.0) * weight * inv_n * d;
        }
        value += weight * inv_n * sq;
    }
    Ok((value, grad))
}

/// `Σ_l β_l / |C_l| · ‖C_l − O_l‖²`.
pub fn content_loss<S: Scalar>(
    content: &ActivationSet<S>,
    outputs: &ActivationSet<S>,
    weights: &LayerWeights<S>,
) -> Result<LossAndGrads<S>> {
    let mut total = S::zero();
    let mut grads = ActivationSet::new();
    for (tag, w) in active(weights) {
        let c = content
            .get(tag)
            .ok_or_else(|| Error::config(format!("no content activations for tag {tag}")))?;
        let o = outputs
            .get(tag)
            .ok_or_else(|| Error::config(format!("no output activations for tag {tag}")))?;
        c.expect_shape(o, &format!("content loss at {tag}"))?;
        let scale = w / S::lit(c.len() as f64);
        let mut sq = S::zero();
        let mut g = Tensor::zeros(o.channels(), o.height(), o.width());
        for ((gv, &ov), &cv) in g.data_mut().iter_mut().zip(o.data()).zip(c.data()) {
            let d = ov - cv;
            sq += d * d;
            *gv = S::lit(2.0) * scale * d;
        }
        total += scale * sq;
        grads.insert(tag.clone(), g);
    }
    Ok((total, grads))
}

/// `ω Σ_c Σ_{y,x} (I[y][x+1] − I[y][x])² + (I[y+1][x] − I[y][x])²` with
/// indices wrapping at the borders: every pixel contributes one horizontal
/// and one vertical difference.
pub fn tv_loss<S: Scalar>(image: &Tensor<S>, weight: S) -> (S, Tensor<S>) {
    let (c, h, w) = image.shape();
    let mut grad = Tensor::zeros(c, h, w);
    let mut value = S::zero();
    let two_w = S::lit(2.0) * weight;
    for ch in 0..c {
        let p = image.plane(ch);
        let g = grad.plane_mut(ch);
        for y in 0..h {
            let yn = if y + 1 == h { 0 } else { y + 1 };
            for x in 0..w {
                let xn = if x + 1 == w { 0 } else { x + 1 };
                let here = p[y * w + x];
                let dh = p[y * w + xn] - here;
                let dv = p[yn * w + x] - here;
                value += dh * dh + dv * dv;
                g[y * w + xn] += two_w * dh;
                g[yn * w + x] += two_w * dv;
                g[y * w + x] -= two_w * (dh + dv);
            }
        }
    }
    (weight * value, grad)
}
