//! Painting by numbers: per-region statistics driven by indexed masks.
//!
//! The exemplar and the output each carry a mask assigning every pixel a
//! region id. Statistics are collected separately for every region of the
//! exemplar, and output pixels of region `r` are compared only against
//! region `r` of the exemplar. Masks are brought to each layer's resolution
//! by top-left sampling, mirroring the 2x2 pooling in the network.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::ActivationSet;
use crate::scalar::Scalar;
use crate::stats::{
    gram_kernel, histogram_kernel, HistogramDetail, HistogramLoss, LayerTargets, LayerWeights,
    LossAndGrads,
};
use crate::tensor::Tensor;

/// Region id per pixel, ids `0..region_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedMask {
    height: usize,
    width: usize,
    indices: Vec<u32>,
    region_count: usize,
}

impl IndexedMask {
    /// Every id must be below `region_count` and occupy at least one pixel.
    pub fn new(height: usize, width: usize, indices: Vec<u32>, region_count: usize) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::shape(format!(
                "mask has {} ids for {height}x{width} pixels",
                indices.len()
            )));
        }
        if region_count == 0 {
            return Err(Error::config("mask needs at least one region"));
        }
        let mask = IndexedMask {
            height,
            width,
            indices,
            region_count,
        };
        if let Some(&bad) = mask.indices.iter().find(|&&i| i as usize >= region_count) {
            return Err(Error::config(format!(
                "mask id {bad} out of range for {region_count} regions"
            )));
        }
        if let Some(empty) = mask.pixel_counts().iter().position(|&c| c == 0) {
            return Err(Error::config(format!("mask region {empty} has no pixels")));
        }
        Ok(mask)
    }

    /// Mask covering every pixel with region 0.
    pub fn uniform(height: usize, width: usize) -> Self {
        IndexedMask {
            height,
            width,
            indices: vec![0; height * width],
            region_count: 1,
        }
    }

    /// Maps the distinct gray levels of an 8-bit image to ids in ascending order.
    pub fn from_gray_levels(height: usize, width: usize, levels: &[u8]) -> Result<Self> {
        let mut present = [false; 256];
        for &l in levels {
            present[l as usize] = true;
        }
        let mut id_of = [0u32; 256];
        let mut next = 0u32;
        for (level, &p) in present.iter().enumerate() {
            if p {
                id_of[level] = next;
                next += 1;
            }
        }
        let indices = levels.iter().map(|&l| id_of[l as usize]).collect();
        IndexedMask::new(height, width, indices, next as usize)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn id(&self, y: usize, x: usize) -> u32 {
        self.indices[y * self.width + x]
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.region_count];
        for &i in &self.indices {
            counts[i as usize] += 1;
        }
        counts
    }

    /// Pixel offsets of each region, in raster order.
    fn region_pixels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.region_count];
        for (p, &i) in self.indices.iter().enumerate() {
            out[i as usize].push(p);
        }
        out
    }

    /// Renumbers regions: pixel id `r` becomes `perm[r]`.
    pub fn relabel(&self, perm: &[u32]) -> Result<Self> {
        if perm.len() != self.region_count {
            return Err(Error::config("permutation length differs from region count"));
        }
        IndexedMask::new(
            self.height,
            self.width,
            self.indices.iter().map(|&i| perm[i as usize]).collect(),
            self.region_count,
        )
    }
}

/// A mask at reduced resolution, with the regions that lost all pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DownsampledMask {
    pub mask: IndexedMask,
    pub vanished: Vec<usize>,
}

/// Keeps the top-left id of every `factor x factor` block.
pub fn downsample_mask(mask: &IndexedMask, factor: usize) -> Result<DownsampledMask> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::config(format!("mask factor {factor} is not a power of two")));
    }
    if mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::shape(format!(
            "{}x{} mask is not divisible by {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut indices = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            indices.push(mask.id(y * factor, x * factor));
        }
    }
    let coarse = IndexedMask {
        height: h,
        width: w,
        indices,
        region_count: mask.region_count,
    };
    let vanished = coarse
        .pixel_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(r, _)| r)
        .collect();
    Ok(DownsampledMask {
        mask: coarse,
        vanished,
    })
}

/// Downsamples `mask` to the spatial size of `t`.
fn mask_for(mask: &IndexedMask, t: &Tensor<impl Scalar>, what: &str) -> Result<DownsampledMask> {
    if t.height() == 0 || mask.height % t.height() != 0 || mask.width % t.width() != 0 {
        return Err(Error::config(format!(
            "{what}: {}x{} mask does not align with {}x{} activations",
            mask.height,
            mask.width,
            t.height(),
            t.width()
        )));
    }
    let factor = mask.height / t.height();
    if mask.width / t.width() != factor {
        return Err(Error::config(format!(
            "{what}: mask and activations differ in aspect ratio"
        )));
    }
    downsample_mask(mask, factor)
}

/// Copies the region's pixels of every feature into a `features x pixels` block.
fn gather<S: Scalar>(t: &Tensor<S>, pixels: &[usize]) -> Vec<S> {
    let mut out = Vec::with_capacity(t.channels() * pixels.len());
    for c in 0..t.channels() {
        let plane = t.plane(c);
        out.extend(pixels.iter().map(|&p| plane[p]));
    }
    out
}

fn scatter_add<S: Scalar>(dst: &mut Tensor<S>, pixels: &[usize], block: &[S]) {
    let n = pixels.len();
    for c in 0..dst.channels() {
        let plane = dst.plane_mut(c);
        for (&p, &g) in pixels.iter().zip(&block[c * n..(c + 1) * n]) {
            plane[p] += g;
        }
    }
}

/// Exemplar statistics per region and tag.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats<S> {
    region_count: usize,
    /// `layers[tag][region]`
    layers: BTreeMap<String, Vec<LayerTargets<S>>>,
    /// Human-readable notes about regions without pixels at some layer.
    pub warnings: Vec<String>,
}

impl<S: Scalar> RegionStats<S> {
    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn region(&self, tag: &str, region: usize) -> Option<&LayerTargets<S>> {
        self.layers.get(tag).and_then(|r| r.get(region))
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    /// Returns a copy with region `r` renamed to `perm[r]`.
    pub fn relabel(&self, perm: &[u32]) -> Result<Self> {
        if perm.len() != self.region_count {
            return Err(Error::config("permutation length differs from region count"));
        }
        let layers = self
            .layers
            .iter()
            .map(|(tag, regions)| {
                let mut out = regions.clone();
                for (r, stats) in regions.iter().enumerate() {
                    out[perm[r] as usize] = stats.clone();
                }
                (tag.clone(), out)
            })
            .collect();
        Ok(RegionStats {
            region_count: self.region_count,
            layers,
            warnings: self.warnings.clone(),
        })
    }
}

/// Collects Gram matrices and sorted samples over each region's pixels at
/// every tagged layer. `mask` is at image resolution.
pub fn build_region_stats<S: Scalar>(acts: &ActivationSet<S>, mask: &IndexedMask) -> Result<RegionStats<S>> {
    let mut layers = BTreeMap::new();
    let mut warnings = Vec::new();
    for (tag, t) in acts {
        let coarse = mask_for(mask, t, tag)?;
        for &r in &coarse.vanished {
            warnings.push(format!("region {r} has no pixels at {tag}"));
        }
        let regions = coarse
            .mask
            .region_pixels()
            .iter()
            .map(|pixels| LayerTargets::from_features(&gather(t, pixels), t.channels(), pixels.len()))
            .collect();
        layers.insert(tag.clone(), regions);
    }
    Ok(RegionStats {
        region_count: mask.region_count,
        layers,
        warnings,
    })
}

struct RegionLayer<'a, S> {
    tag: &'a String,
    weight: S,
    output: &'a Tensor<S>,
    regions: &'a [LayerTargets<S>],
    pixels: Vec<Vec<usize>>,
}

fn region_layers<'a, S: Scalar>(
    outputs: &'a ActivationSet<S>,
    out_mask: &IndexedMask,
    style: &'a RegionStats<S>,
    weights: &'a LayerWeights<S>,
) -> Result<Vec<RegionLayer<'a, S>>> {
    if out_mask.region_count > style.region_count {
        return Err(Error::config(format!(
            "output mask uses {} regions, exemplar mask only {}",
            out_mask.region_count, style.region_count
        )));
    }
    let mut out = Vec::new();
    for (tag, &w) in weights.iter().filter(|(_, w)| **w > S::zero()) {
        let regions = style
            .layers
            .get(tag)
            .ok_or_else(|| Error::config(format!("no exemplar statistics for tag {tag}")))?;
        let o = outputs
            .get(tag)
            .ok_or_else(|| Error::config(format!("no output activations for tag {tag}")))?;
        if let Some(t) = regions.first() {
            if t.feature_count() != o.channels() {
                return Err(Error::shape(format!(
                    "{tag}: exemplar has {} features, output has {}",
                    t.feature_count(),
                    o.channels()
                )));
            }
        }
        let coarse = mask_for(out_mask, o, tag)?;
        out.push(RegionLayer {
            tag,
            weight: w,
            output: o,
            regions,
            pixels: coarse.mask.region_pixels(),
        });
    }
    Ok(out)
}

/// Sum over regions of the Gram loss between output region `r` and
/// exemplar region `r`. Regions empty on either side contribute nothing.
pub fn localized_gram_loss<S: Scalar>(
    outputs: &ActivationSet<S>,
    out_mask: &IndexedMask,
    style: &RegionStats<S>,
    weights: &LayerWeights<S>,
) -> Result<LossAndGrads<S>> {
    let mut total = S::zero();
    let mut grads = ActivationSet::new();
    for layer in region_layers(outputs, out_mask, style, weights)? {
        let o = layer.output;
        let mut g = Tensor::zeros(o.channels(), o.height(), o.width());
        for (r, pixels) in layer.pixels.iter().enumerate() {
            let block = gather(o, pixels);
            let (v, gb) = gram_kernel(
                &layer.regions[r].gram,
                &block,
                o.channels(),
                pixels.len(),
                layer.weight,
            );
            total += v;
            scatter_add(&mut g, pixels, &gb);
        }
        grads.insert(layer.tag.clone(), g);
    }
    Ok((total, grads))
}

/// Histogram loss with the remap computed separately inside each region:
/// `γ / n · Σ_r Σ_f ‖O_rf − R_r(O_rf)‖²`, `n` the layer's pixel count.
pub fn localized_histogram_loss<S: Scalar>(
    outputs: &ActivationSet<S>,
    out_mask: &IndexedMask,
    style: &RegionStats<S>,
    weights: &LayerWeights<S>,
    bins: usize,
) -> Result<HistogramLoss<S>> {
    let mut res = HistogramLoss {
        value: S::zero(),
        grads: ActivationSet::new(),
        detail: BTreeMap::new(),
    };
    for layer in region_layers(outputs, out_mask, style, weights)? {
        let o = layer.output;
        let n = o.plane_len();
        let mut g = Tensor::zeros(o.channels(), o.height(), o.width());
        let mut residuals = vec![S::zero(); o.channels()];
        let mut widths = vec![S::zero(); o.channels()];
        for (r, pixels) in layer.pixels.iter().enumerate() {
            let block = gather(o, pixels);
            let k = histogram_kernel(
                &layer.regions[r].sorted_samples,
                &block,
                o.channels(),
                pixels.len(),
                layer.weight,
                bins,
                n,
            );
            res.value += k.value;
            scatter_add(&mut g, pixels, &k.grad);
            for f in 0..o.channels() {
                residuals[f] += k.residuals[f];
                widths[f] = widths[f].max(k.bin_widths[f]);
            }
        }
        let inv_n = S::one() / S::lit(n as f64);
        res.detail.insert(
            layer.tag.clone(),
            HistogramDetail {
                normalized_residuals: residuals.iter().map(|&v| v * inv_n).collect(),
                bin_widths: widths,
            },
        );
        res.grads.insert(layer.tag.clone(), g);
    }
    Ok(res)
}
