//! Randomized ablation defense and the adversarial-training baseline.
//!
//! Ablation keeps `k` uniformly chosen spatial pixels of an image (all
//! channels together) and overwrites everything else with the NULL
//! encoding, the per-channel mean pixel of the raw training set.
//! Certificate retraining re-ablates every image with a fresh retention
//! set each epoch; defended prediction averages density maps over
//! independent ablation rounds.

use rand::Rng;
use rayon::prelude::*;

use patchbench_tensor::Tensor;

use crate::attack::{run_whitebox_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::models::{
    train_core, train_with_transform, Model, ModelSpec, OptimizerState, TrainConfig, TrainItem,
};
use crate::rng;
use crate::types::{DensityMap, ImageTensor};

/// `k` unique spatial pixel indices drawn uniformly from `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetentionSet {
    total: usize,
    indices: Vec<usize>,
}

impl RetentionSet {
    pub fn d(&self) -> usize {
        self.total
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Retained indices, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.indices.binary_search(&pixel).is_ok()
    }

    pub fn is_disjoint_from(&self, pixels: &[usize]) -> bool {
        pixels.iter().all(|&p| !self.contains(p))
    }
}

/// Uniform sample from all k-subsets of `[0, d)` via a partial
/// Fisher-Yates shuffle.
pub fn sample_retention(d: usize, k: usize, seed: u64) -> Result<RetentionSet> {
    if k > d {
        return Err(Error::invalid(
            "retention",
            format!("cannot retain {k} of {d} pixels"),
        ));
    }
    let mut rng = rng::rng(seed);
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = rng.gen_range(i..d);
        pool.swap(i, j);
    }
    let mut indices: Vec<usize> = pool[..k].to_vec();
    indices.sort_unstable();
    Ok(RetentionSet { total: d, indices })
}

/// The NULL symbol written into ablated positions: per-channel means of
/// the raw training images.
#[derive(Debug, Clone, PartialEq)]
pub struct NullEncoding {
    pub per_channel: Vec<f64>,
}

impl NullEncoding {
    pub fn validate(&self) -> Result<()> {
        if self.per_channel.is_empty() || self.per_channel.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("null encoding", "needs finite per-channel values"));
        }
        Ok(())
    }
}

pub fn mean_pixel_encoding<'a>(
    images: impl IntoIterator<Item = &'a ImageTensor>,
) -> Result<NullEncoding> {
    let mut sums: Vec<f64> = Vec::new();
    let mut pixels = 0usize;
    for image in images {
        let (c_n, h, w) = image.tensor().dims3()?;
        if sums.is_empty() {
            sums = vec![0.0; c_n];
        } else if sums.len() != c_n {
            return Err(Error::invalid("null encoding", "images disagree on channels"));
        }
        let data = image.tensor().data();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += data[c * h * w..(c + 1) * h * w].iter().sum::<f64>();
        }
        pixels += h * w;
    }
    if pixels == 0 {
        return Err(Error::invalid("null encoding", "no images"));
    }
    Ok(NullEncoding {
        per_channel: sums.into_iter().map(|s| s / pixels as f64).collect(),
    })
}

/// Keep the retained spatial pixels (all channels), overwrite the rest
/// with the NULL encoding. Retained values are copied bit-exactly.
pub fn ablate(
    image: &ImageTensor,
    keep: &RetentionSet,
    null: &NullEncoding,
) -> Result<ImageTensor> {
    let (c_n, h, w) = image.tensor().dims3()?;
    if keep.d() != h * w {
        return Err(Error::invalid(
            "ablate",
            format!("retention set over {} pixels, image has {}", keep.d(), h * w),
        ));
    }
    if null.per_channel.len() != c_n {
        return Err(Error::invalid(
            "ablate",
            format!(
                "null encoding has {} channels, image has {c_n}",
                null.per_channel.len()
            ),
        ));
    }
    let src = image.tensor().data();
    let mut out = Vec::with_capacity(c_n * h * w);
    for c in 0..c_n {
        let null_c = null.per_channel[c].clamp(0.0, 1.0);
        out.extend(std::iter::repeat(null_c).take(h * w));
        let base = c * h * w;
        for &p in keep.indices() {
            out[base + p] = src[base + p];
        }
    }
    ImageTensor::new(Tensor::new(vec![c_n, h, w], out)?)
}

/// Certificate retraining: standard density training where every image
/// is re-ablated with a fresh retention set each epoch. The NULL
/// encoding is computed once from the raw training set.
pub fn certificate_retrain(
    spec: ModelSpec,
    items: &[TrainItem],
    k: usize,
    cfg: &TrainConfig,
) -> Result<(Model, NullEncoding, Vec<f64>)> {
    let null = mean_pixel_encoding(items.iter().map(|it| &it.image))?;
    let model = Model::build(spec)?;
    let (trained, trace) = train_with_transform(&model, items, cfg, |epoch, idx, image| {
        let d = image.spatial_pixels();
        let keep = sample_retention(d, k, rng::mix3(cfg.seed, 0xab1a7e ^ epoch as u64, idx as u64))?;
        ablate(image, &keep, &null)
    })?;
    Ok((trained, null, trace))
}

/// Defended inference: mean density map over `rounds` independent
/// ablations of the input.
pub fn defended_predict(
    model: &Model,
    image: &ImageTensor,
    k: usize,
    rounds: usize,
    seed: u64,
    null: &NullEncoding,
) -> Result<DensityMap> {
    if rounds < 1 {
        return Err(Error::invalid("defended predict", "rounds must be >= 1"));
    }
    null.validate()?;
    let d = image.spatial_pixels();
    let maps: Vec<Result<DensityMap>> = (0..rounds)
        .into_par_iter()
        .map(|round| {
            let keep = sample_retention(d, k, rng::mix3(seed, 0xdefe, round as u64))?;
            let ablated = ablate(image, &keep, null)?;
            model.predict_density(&ablated)
        })
        .collect();
    let mut acc: Option<Tensor> = None;
    for map in maps {
        let map = map?;
        acc = Some(match acc {
            None => map.tensor().clone(),
            Some(a) => a.zip(map.tensor(), |x, y| x + y)?,
        });
    }
    let mean = acc.expect("rounds >= 1").map(|v| v / rounds as f64);
    DensityMap::new(mean)
}

/// A certificate-retrained model bundled with its inference parameters,
/// as persisted next to the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseSidecar {
    pub k: usize,
    pub d: usize,
    pub rounds: usize,
    pub null: NullEncoding,
}

/// Loss schedule of the adversarial-training baseline:
/// 1 for the warmup, linear down to 0.5 over the ramp, then 0.5.
pub fn lambda_schedule(epoch: usize, warmup: usize, ramp: usize) -> f64 {
    if epoch < warmup {
        1.0
    } else if ramp > 0 && epoch < warmup + ramp {
        1.0 - 0.5 * (epoch - warmup + 1) as f64 / ramp as f64
    } else {
        0.5
    }
}

pub struct AdversarialTraining {
    pub model: Model,
    pub lambda_trace: Vec<f64>,
    pub loss_trace: Vec<f64>,
}

/// Adversarial-training baseline: `lambda * clean_loss + (1 - lambda) *
/// adv_loss`, with white-box patches regenerated against the current
/// model for every image each epoch past the warmup.
pub fn adversarial_train(
    spec: ModelSpec,
    items: &[TrainItem],
    cfg: &TrainConfig,
    attack_cfg: &AttackConfig,
    warmup: usize,
    ramp: usize,
) -> Result<AdversarialTraining> {
    attack_cfg.validate()?;
    let mut model = Model::build(spec)?;
    let mut state = OptimizerState::new(model.params());
    let mut lambda_trace = Vec::with_capacity(cfg.epochs);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let epoch_cfg = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };

    // One optimizer epoch at a time so the patches track the current
    // parameters; the optimizer state persists across calls.
    for epoch in 0..cfg.epochs {
        let lambda = lambda_schedule(epoch, warmup, ramp);
        lambda_trace.push(lambda);

        if lambda >= 1.0 {
            let (next, trace) = train_core(
                &model,
                items,
                &epoch_cfg,
                |_, _, image| Ok(image.clone()),
                None,
                &mut state,
                epoch,
            )?;
            model = next;
            loss_trace.push(trace[0]);
            continue;
        }

        let adversarial: Vec<ImageTensor> = items
            .par_iter()
            .enumerate()
            .map(|(idx, item)| {
                let per_image = AttackConfig {
                    seed: rng::mix3(attack_cfg.seed, epoch as u64, idx as u64),
                    ..attack_cfg.clone()
                };
                run_whitebox_attack(&model, &item.image, &item.target, &per_image)
                    .map(|outcome| outcome.adversarial)
            })
            .collect::<Result<Vec<_>>>()?;

        // `lambda*clean + (1-lambda)*adv` as one weighted pass over the
        // interleaved clean/adversarial set: weights 2*lambda and
        // 2*(1-lambda) against the doubled item count give exactly the
        // scheduled mixture of the two mean losses.
        let mut mixed = Vec::with_capacity(items.len() * 2);
        for (item, adv) in items.iter().zip(&adversarial) {
            mixed.push(TrainItem {
                image: item.image.clone(),
                target: item.target.clone(),
            });
            mixed.push(TrainItem {
                image: adv.clone(),
                target: item.target.clone(),
            });
        }
        let weights: Vec<f64> = (0..mixed.len())
            .map(|i| if i % 2 == 0 { 2.0 * lambda } else { 2.0 * (1.0 - lambda) })
            .collect();
        let (next, trace) = train_core(
            &model,
            &mixed,
            &epoch_cfg,
            |_, _, image| Ok(image.clone()),
            Some(&weights),
            &mut state,
            epoch,
        )?;
        model = next;
        loss_trace.push(trace[0]);
    }
    Ok(AdversarialTraining {
        model,
        lambda_trace,
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, synth_scene, DatasetParams, SceneStyle};
    use std::collections::HashMap;

    fn small_items(n: usize, hw: usize) -> Vec<TrainItem> {
        let params = DatasetParams {
            train: n,
            val: 0,
            test: 0,
            height: hw,
            width: hw,
            count_min: 3,
            count_max: 8,
            style: SceneStyle::Uniform,
            sigma: 2.0,
            seed: 21,
        };
        let data = generate_dataset(&params).unwrap();
        crate::models::training_items(data.train()).unwrap()
    }

    #[test]
    fn retention_k_equals_d_is_everything() {
        let set = sample_retention(10, 10, 1).unwrap();
        assert_eq!(set.indices(), (0..10).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn retention_k_zero_is_empty() {
        let set = sample_retention(10, 0, 1).unwrap();
        assert!(set.indices().is_empty());
    }

    #[test]
    fn retention_k_above_d_rejected() {
        assert!(sample_retention(5, 6, 1).is_err());
    }

    #[test]
    fn retention_subsets_are_uniform() {
        // d = 6, k = 2: each of the 15 subsets within 3 sigma of 1/15
        // over one million draws.
        let draws = 1_000_000u64;
        let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
        for t in 0..draws {
            let set = sample_retention(6, 2, rng::mix(0x5e7, t)).unwrap();
            let idx = set.indices();
            *counts.entry((idx[0], idx[1])).or_default() += 1;
        }
        assert_eq!(counts.len(), 15);
        let p = 1.0 / 15.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (&pair, &n) in &counts {
            let dev = (n as f64 - draws as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "subset {pair:?} deviates {dev:.1} (3s = {:.1})", 3.0 * sigma);
        }
    }

    #[test]
    fn ablate_k_d_is_identity_and_k_0_is_null() {
        let (image, _) = synth_scene(3, 4, 32, 32, SceneStyle::Uniform).unwrap();
        let null = mean_pixel_encoding([&image]).unwrap();
        let d = image.spatial_pixels();
        let all = sample_retention(d, d, 9).unwrap();
        assert_eq!(ablate(&image, &all, &null).unwrap(), image);
        let none = sample_retention(d, 0, 9).unwrap();
        let blank = ablate(&image, &none, &null).unwrap();
        for c in 0..image.channels() {
            let expect = null.per_channel[c];
            assert!(blank.tensor().data()[c * d..(c + 1) * d]
                .iter()
                .all(|&v| v == expect));
        }
    }

    #[test]
    fn ablate_is_idempotent() {
        let (image, _) = synth_scene(5, 6, 32, 32, SceneStyle::Clustered).unwrap();
        let null = mean_pixel_encoding([&image]).unwrap();
        let keep = sample_retention(image.spatial_pixels(), 40, 4).unwrap();
        let once = ablate(&image, &keep, &null).unwrap();
        let twice = ablate(&once, &keep, &null).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn disjoint_patches_ablate_identically() {
        // The property the certification premise rests on: if the clean
        // and adversarial images differ only inside a pixel set disjoint
        // from the retention set, their ablations are bit-identical.
        let (image, _) = synth_scene(8, 5, 32, 32, SceneStyle::Uniform).unwrap();
        let mut data = image.tensor().data().to_vec();
        let w = image.width();
        let mut patch_pixels = Vec::new();
        for y in 4..10 {
            for x in 20..26 {
                patch_pixels.push(y * w + x);
                for c in 0..image.channels() {
                    data[c * image.spatial_pixels() + y * w + x] = 0.9;
                }
            }
        }
        let adv = ImageTensor::new(Tensor::new(
            image.tensor().shape().to_vec(),
            data,
        ).unwrap())
        .unwrap();
        let null = mean_pixel_encoding([&image]).unwrap();
        let mut checked = 0;
        for trial in 0..200 {
            let keep = sample_retention(image.spatial_pixels(), 24, rng::mix(0xd15, trial)).unwrap();
            if keep.is_disjoint_from(&patch_pixels) {
                let a = ablate(&image, &keep, &null).unwrap();
                let b = ablate(&adv, &keep, &null).unwrap();
                assert_eq!(a, b);
                checked += 1;
            }
        }
        assert!(checked > 0, "no disjoint retention set sampled");
    }

    #[test]
    fn certificate_retrain_with_k_d_matches_plain_training() {
        let items = small_items(2, 32);
        let spec = ModelSpec {
            base_width: 4,
            ..ModelSpec::dilated(17)
        };
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let d = items[0].image.spatial_pixels();
        let (defended, _, _) = certificate_retrain(spec.clone(), &items, d, &cfg).unwrap();
        let plain = Model::build(spec).unwrap();
        let (plain, _) = crate::models::train(&plain, &items, &cfg).unwrap();
        assert_eq!(defended.params(), plain.params());
    }

    #[test]
    fn certificate_retrain_is_deterministic() {
        let items = small_items(2, 32);
        let spec = ModelSpec {
            base_width: 4,
            ..ModelSpec::dilated(23)
        };
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (a, _, _) = certificate_retrain(spec.clone(), &items, 64, &cfg).unwrap();
        let (b, _, _) = certificate_retrain(spec, &items, 64, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn defended_predict_round_one_k_d_equals_plain_prediction() {
        let items = small_items(1, 32);
        let image = &items[0].image;
        let model = Model::build(ModelSpec {
            base_width: 4,
            ..ModelSpec::dilated(31)
        })
        .unwrap();
        let null = mean_pixel_encoding([image]).unwrap();
        let d = image.spatial_pixels();
        let defended = defended_predict(&model, image, d, 1, 5, &null).unwrap();
        let plain = model.predict_density(image).unwrap();
        assert_eq!(defended, plain);
    }

    #[test]
    fn defended_predict_variance_shrinks_with_rounds() {
        // Count variance over disjoint retention batches should shrink
        // roughly linearly with the number of averaged rounds.
        let items = small_items(1, 32);
        let image = &items[0].image;
        let model = Model::build(ModelSpec {
            base_width: 4,
            ..ModelSpec::dilated(37)
        })
        .unwrap();
        let null = mean_pixel_encoding([image]).unwrap();
        let variance = |rounds: usize, batches: usize| {
            let counts: Vec<f64> = (0..batches)
                .map(|b| {
                    defended_predict(&model, image, 64, rounds, rng::mix(0xbeef, b as u64), &null)
                        .unwrap()
                        .count()
                })
                .collect();
            let mean = counts.iter().sum::<f64>() / counts.len() as f64;
            counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / counts.len() as f64
        };
        let v1 = variance(1, 50);
        let v10 = variance(10, 50);
        assert!(v10 > 0.0);
        let ratio = v1 / v10;
        assert!(
            (4.0..25.0).contains(&ratio),
            "variance ratio {ratio} not near the expected 10x"
        );
    }

    #[test]
    fn lambda_schedule_shapes() {
        // warmup 3, ramp 4: ones, then linear to 0.5, then flat.
        let values: Vec<f64> = (0..10).map(|e| lambda_schedule(e, 3, 4)).collect();
        assert_eq!(
            values,
            vec![1.0, 1.0, 1.0, 0.875, 0.75, 0.625, 0.5, 0.5, 0.5, 0.5]
        );
        // Degenerate ramp: step change at the warmup boundary.
        assert_eq!(lambda_schedule(2, 3, 0), 1.0);
        assert_eq!(lambda_schedule(3, 3, 0), 0.5);
        // Always within [0.5, 1].
        for e in 0..50 {
            let v = lambda_schedule(e, 7, 11);
            assert!((0.5..=1.0).contains(&v));
        }
    }
}
