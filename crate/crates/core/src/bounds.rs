//! Exact combinatorial certification arithmetic.
//!
//! The certified-defense analysis needs the probability that a uniform
//! k-subset of the d image pixels misses an n-pixel patch entirely
//! (`C(d-n,k) / C(d,k)`) and the worst-case probability that it lands
//! inside the patch (`C(n,k) / C(d,k)`). The worst-case values underflow
//! f64 by a hundred orders of magnitude, so everything is computed in
//! natural-log space from exact integer ratios; no Stirling
//! approximation anywhere.

use rayon::prelude::*;

use crate::defense::{ablate, sample_retention, NullEncoding};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::types::{DensityMap, ImageTensor};

/// `ln C(a, b)`, or negative infinity when the coefficient is zero
/// (`b < 0` or `b > a`). Computed as a sum of logarithms of the exact
/// integer ratios `(a - b + i) / i`.
pub fn log_choose(a: u64, b: i64) -> f64 {
    if b < 0 || b as u64 > a {
        return f64::NEG_INFINITY;
    }
    let b = (b as u64).min(a - b as u64);
    let mut total = 0.0;
    for i in 1..=b {
        total += ((a - b + i) as f64 / i as f64).ln();
    }
    total
}

/// Query geometry: image pixels `d`, patch pixels `n`, retained pixels
/// `k`, and the top-K size of the overlap metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundQuery {
    pub image_pixels: u64,
    pub patch_pixels: u64,
    pub retained: u64,
    pub top_k: usize,
}

impl BoundQuery {
    pub fn new(image_pixels: u64, patch_pixels: u64, retained: u64, top_k: usize) -> Result<Self> {
        if patch_pixels > image_pixels {
            return Err(Error::invalid(
                "bound query",
                format!("patch {patch_pixels} larger than image {image_pixels}"),
            ));
        }
        if retained > image_pixels {
            return Err(Error::invalid(
                "bound query",
                format!("retention {retained} larger than image {image_pixels}"),
            ));
        }
        if top_k < 1 {
            return Err(Error::invalid("bound query", "top_k must be >= 1"));
        }
        Ok(BoundQuery {
            image_pixels,
            patch_pixels,
            retained,
            top_k,
        })
    }
}

/// A probability held in natural-log space; exact zero is negative
/// infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProb(f64);

impl LogProb {
    pub fn from_ln(value: f64) -> Self {
        // Ratio-of-binomials arithmetic can land a rounding error above
        // zero; a true probability cannot.
        debug_assert!(value <= 1e-9, "log probability {value} above 0");
        LogProb(value.min(0.0))
    }

    pub fn ln(&self) -> f64 {
        self.0
    }

    pub fn log10(&self) -> f64 {
        self.0 / std::f64::consts::LN_10
    }

    pub fn probability(&self) -> f64 {
        self.0.exp()
    }
}

/// Probability that the retained set misses the patch entirely:
/// `C(d-n, k) / C(d, k)`. Zero when `k > d - n`.
pub fn upper_bound(q: &BoundQuery) -> LogProb {
    LogProb::from_ln(
        log_choose(q.image_pixels - q.patch_pixels, q.retained as i64)
            - log_choose(q.image_pixels, q.retained as i64),
    )
}

/// Worst-case probability that every retained pixel lands inside the
/// patch: `C(n, k) / C(d, k)`. Zero when `k > n`.
pub fn lower_bound(q: &BoundQuery) -> LogProb {
    LogProb::from_ln(
        log_choose(q.patch_pixels, q.retained as i64)
            - log_choose(q.image_pixels, q.retained as i64),
    )
}

/// Indices of the `k` largest entries, ties broken by ascending index.
/// Selection-based; the test oracle uses a full sort instead.
pub fn topk_indices(map: &DensityMap, k: usize) -> Vec<usize> {
    let data = map.tensor().data();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let compare = |&i: &usize, &j: &usize| {
        data[j]
            .total_cmp(&data[i])
            .then_with(|| i.cmp(&j))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, compare);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Size of the intersection of the two maps' top-K index sets.
pub fn topk_overlap(a: &DensityMap, b: &DensityMap, k: usize) -> Result<usize> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::invalid(
            "topk overlap",
            format!(
                "map shapes {}x{} and {}x{} differ",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    let size = a.height() * a.width();
    if k > size || k == 0 {
        return Err(Error::invalid(
            "topk overlap",
            format!("K = {k} outside [1, {size}]"),
        ));
    }
    let ia = topk_indices(a, k);
    let ib = topk_indices(b, k);
    // Both sorted ascending; count the merge intersection.
    let (mut x, mut y, mut shared) = (0, 0, 0);
    while x < ia.len() && y < ib.len() {
        match ia[x].cmp(&ib[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                x += 1;
                y += 1;
            }
        }
    }
    Ok(shared)
}

/// Monte-Carlo overlap distribution under randomized ablation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapHistogram {
    /// `counts[i]` trials produced overlap R = i, for i in [0, K].
    pub counts: Vec<u64>,
    /// Trials whose retention set was disjoint from the patch pixels.
    pub miss_events: u64,
    pub trials: u64,
    pub image_pixels: usize,
    pub patch_pixels: usize,
}

impl OverlapHistogram {
    pub fn miss_rate(&self) -> f64 {
        self.miss_events as f64 / self.trials as f64
    }
}

/// Sample retention sets, ablate both images with the same set, and
/// histogram the top-K overlap of the model's two density maps. Also
/// reports how often the retention set missed the patch entirely.
#[allow(clippy::too_many_arguments)]
pub fn empirical_overlap_bounds(
    model: &Model,
    clean: &ImageTensor,
    adversarial: &ImageTensor,
    retained: usize,
    trials: usize,
    top_k: usize,
    null: &NullEncoding,
    seed: u64,
) -> Result<OverlapHistogram> {
    if trials < 1 {
        return Err(Error::invalid("overlap histogram", "trials must be >= 1"));
    }
    let footprint = clean.differing_pixels(adversarial)?;
    let d = clean.spatial_pixels();
    let per_trial: Vec<Result<(usize, bool)>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let keep = sample_retention(d, retained, rng::mix(seed, trial as u64))?;
            let miss = keep.is_disjoint_from(&footprint);
            let a = model.predict_density(&ablate(clean, &keep, null)?)?;
            let b = model.predict_density(&ablate(adversarial, &keep, null)?)?;
            Ok((topk_overlap(&a, &b, top_k)?, miss))
        })
        .collect();
    let mut counts = vec![0u64; top_k + 1];
    let mut miss_events = 0;
    for result in per_trial {
        let (overlap, miss) = result?;
        counts[overlap] += 1;
        if miss {
            miss_events += 1;
        }
    }
    Ok(OverlapHistogram {
        counts,
        miss_events,
        trials: trials as u64,
        image_pixels: d,
        patch_pixels: footprint.len(),
    })
}

/// One row of the certification table emitted by the CLI.
pub fn bound_table_csv(d: u64, k: u64, patch_sides: &[u64]) -> Result<String> {
    let mut out = String::from("n,k,d,upper,log10_lower\n");
    for &side in patch_sides {
        let n = side * side;
        let q = BoundQuery::new(d, n, k, 1)?;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            n,
            k,
            d,
            upper_bound(&q).probability(),
            lower_bound(&q).log10(),
        ));
    }
    Ok(out)
}
