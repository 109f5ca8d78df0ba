//! Adversarial patch attack with momentum.
//!
//! A patch (pixels, binary shape mask, blend tensor) is pasted into the
//! image through a differentiable pipeline: blend with the covered
//! region, mask, rotate, rescale, paste, clamp. The optimization
//! minimizes the targeted density loss plus a smoothness penalty on the
//! blend tensor, using momentum-accumulated L1-normalized gradients and
//! a signed step. White-box and black-box (substitute-ensemble,
//! universal-patch) drivers share one engine.

use rand::Rng;

use patchbench_tensor::{NodeId, Tape, Tensor};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::types::{DensityMap, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Center the patch (its largest scaled footprint) on the canvas.
    Center,
    /// Fixed top-left corner.
    At(usize, usize),
    /// Uniform random top-left corner, redrawn per restart.
    RandomPerRestart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Target factor alpha; the target map is `alpha * GT`.
    pub target_factor: f64,
    /// Weight of the blend-smoothness penalty.
    pub gamma: f64,
    /// Signed step size per iteration, in pixel units.
    pub step_size: f64,
    /// Momentum decay of the gradient accumulator.
    pub momentum: f64,
    pub iterations: usize,
    /// Patch side length in pixels.
    pub patch_side: usize,
    pub placement: Placement,
    pub restarts: usize,
    /// Images per optimization step when the patch is shared across a set.
    pub batch_size: usize,
    /// Rotation resampled per iteration, degrees.
    pub angle_range_deg: (f64, f64),
    /// Scale resampled per iteration.
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            target_factor: 10.0,
            gamma: 0.01,
            step_size: 0.01,
            momentum: 0.9,
            iterations: 300,
            patch_side: 28,
            placement: Placement::Center,
            restarts: 1,
            batch_size: 4,
            angle_range_deg: (-20.0, 20.0),
            scale_range: (0.8, 1.25),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::invalid("attack config", "gamma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("attack config", "momentum must be in [0, 1)"));
        }
        if self.step_size < 0.0 {
            return Err(Error::invalid("attack config", "step size must be >= 0"));
        }
        if self.iterations < 1 || self.restarts < 1 || self.batch_size < 1 {
            return Err(Error::invalid(
                "attack config",
                "iterations, restarts and batch size must be >= 1",
            ));
        }
        if self.patch_side < 2 {
            return Err(Error::invalid("attack config", "patch side must be >= 2"));
        }
        let (s_lo, s_hi) = self.scale_range;
        if !(s_lo > 0.0 && s_hi >= s_lo) {
            return Err(Error::invalid("attack config", "bad scale range"));
        }
        let (a_lo, a_hi) = self.angle_range_deg;
        if !(-180.0..=180.0).contains(&a_lo) || !(-180.0..=180.0).contains(&a_hi) || a_hi < a_lo {
            return Err(Error::invalid("attack config", "bad angle range"));
        }
        Ok(())
    }

    /// Largest footprint side the config can produce.
    fn max_placed_side(&self) -> usize {
        placed_side(self.patch_side, self.scale_range.1).max(self.patch_side)
    }
}

pub fn placed_side(side: usize, scale: f64) -> usize {
    ((side as f64 * scale).round() as usize).max(1)
}

/// Adversarial patch state: pixels, shape mask, placement and transform
/// parameters, and the blend tensor stored as an unconstrained
/// pre-activation (sigmoid keeps the blend strictly inside (0, 1)).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    /// `[channels, side, side]` pixel values in [0, 1].
    pub pixels: Tensor,
    /// `[side, side]` binary shape mask; 1 inside the patch shape.
    pub mask: Tensor,
    /// Top-left corner of the footprint on the canvas, `(row, col)`.
    pub location: (usize, usize),
    pub scale: f64,
    pub angle_deg: f64,
    /// `[channels, side, side]` blend pre-activations.
    pub beta_preact: Tensor,
}

impl PatchSpec {
    pub fn side(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Blend tensor, strictly inside (0, 1).
    pub fn beta(&self) -> Tensor {
        self.beta_preact.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        let s = self.side();
        if self.mask.shape() != [s, s] {
            return Err(Error::invalid("patch", "mask must be square"));
        }
        if self.pixels.shape() != [self.channels(), s, s]
            || self.beta_preact.shape() != self.pixels.shape()
        {
            return Err(Error::invalid("patch", "pixels/beta shape mismatch"));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("patch", "mask entries must be 0 or 1"));
        }
        let footprint = s.max(placed_side(s, self.scale));
        let (r, c) = self.location;
        if r + footprint > height || c + footprint > width {
            return Err(Error::invalid(
                "patch",
                format!(
                    "footprint {footprint} at ({r},{c}) exits the {height}x{width} canvas"
                ),
            ));
        }
        Ok(())
    }

    /// Spatial pixel indices of the placed footprint square.
    pub fn footprint_pixels(&self, width: usize) -> Vec<usize> {
        let side = placed_side(self.side(), self.scale);
        let (r0, c0) = self.location;
        let mut out = Vec::with_capacity(side * side);
        for y in r0..r0 + side {
            for x in c0..c0 + side {
                out.push(y * width + x);
            }
        }
        out
    }
}

fn resolve_location(
    cfg: &AttackConfig,
    height: usize,
    width: usize,
    restart_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(usize, usize)> {
    let span = cfg.max_placed_side();
    if span > height || span > width {
        return Err(Error::invalid(
            "attack config",
            format!("patch footprint {span} exceeds the {height}x{width} canvas"),
        ));
    }
    Ok(match cfg.placement {
        Placement::Center => ((height - span) / 2, (width - span) / 2),
        Placement::At(r, c) => {
            if r + span > height || c + span > width {
                return Err(Error::invalid(
                    "attack config",
                    format!("placement ({r},{c}) pushes footprint {span} off canvas"),
                ));
            }
            (r, c)
        }
        Placement::RandomPerRestart => {
            let rng = restart_rng.expect("random placement needs a restart rng");
            (
                rng.gen_range(0..=height - span),
                rng.gen_range(0..=width - span),
            )
        }
    })
}

/// Fresh patch for a restart: pixels uniform in [0, 1] from the seed,
/// full-square mask, zero blend pre-activations (beta = 0.5 everywhere).
fn init_patch_for_restart(
    cfg: &AttackConfig,
    channels: usize,
    height: usize,
    width: usize,
    restart: usize,
) -> Result<PatchSpec> {
    cfg.validate()?;
    let s = cfg.patch_side;
    let mut placement_rng = rng::rng(rng::mix3(cfg.seed, 0x10c, restart as u64));
    let location = resolve_location(cfg, height, width, Some(&mut placement_rng))?;
    let mut pix_rng = rng::rng(rng::mix3(cfg.seed, 0x1a17, restart as u64));
    let pixels: Vec<f64> = (0..channels * s * s).map(|_| pix_rng.gen_range(0.0..1.0)).collect();
    Ok(PatchSpec {
        pixels: Tensor::new(vec![channels, s, s], pixels)?,
        mask: Tensor::filled(vec![s, s], 1.0),
        location,
        scale: 1.0,
        angle_deg: 0.0,
        beta_preact: Tensor::zeros(vec![channels, s, s]),
    })
}

/// Initial patch for the configured attack (restart 0).
pub fn init_patch(
    cfg: &AttackConfig,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<PatchSpec> {
    init_patch_for_restart(cfg, channels, height, width, 0)
}

/// `1 - placed_mask`, expanded over channels: the shield that keeps the
/// canvas outside the transformed mask bit-identical to the input.
fn placed_inverse_mask(
    mask: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    location: (usize, usize),
    angle_deg: f64,
    scale: f64,
) -> Result<Tensor> {
    let (s, _) = mask.dims2()?;
    let side = placed_side(s, scale);
    let lifted = Tensor::new(vec![1, s, s], mask.data().to_vec())?;
    let transformed = lifted.rotated(angle_deg)?.bilinear_resized(side, side)?;
    let mut canvas = vec![1.0; channels * height * width];
    let m = transformed.data();
    let (r0, c0) = location;
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                canvas[(c * height + r0 + y) * width + c0 + x] = 1.0 - m[y * side + x];
            }
        }
    }
    Tensor::new(vec![channels, height, width], canvas)
}

/// Record the patch application pipeline on the tape:
/// blend with the covered region, mask, rotate, rescale, paste, clamp.
/// `pixels` and `beta` (post-sigmoid) may be gradient-carrying nodes.
#[allow(clippy::too_many_arguments)]
fn apply_patch_nodes(
    tape: &mut Tape,
    image: NodeId,
    pixels: NodeId,
    beta: NodeId,
    mask: &Tensor,
    location: (usize, usize),
    angle_deg: f64,
    scale: f64,
) -> Result<NodeId> {
    let (channels, height, width) = tape.value(image).dims3()?;
    let (s, _) = mask.dims2()?;
    let side = placed_side(s, scale);
    let (r0, c0) = location;
    if r0 + s.max(side) > height || c0 + s.max(side) > width {
        return Err(Error::invalid(
            "patch",
            format!(
                "footprint {} at ({r0},{c0}) exits the {height}x{width} canvas",
                s.max(side)
            ),
        ));
    }

    // Blend the patch with the region it covers.
    let region = tape.crop(image, r0, c0, s, s)?;
    let blended_patch = tape.mul(beta, pixels)?;
    let inverse_beta = tape.affine(beta, -1.0, 1.0)?;
    let blended_region = tape.mul(inverse_beta, region)?;
    let blended = tape.add(blended_patch, blended_region)?;

    // Mask to the patch shape, then transform.
    let mask3: Vec<f64> = std::iter::repeat(mask.data())
        .take(channels)
        .flatten()
        .copied()
        .collect();
    let mask3 = tape.constant(Tensor::new(vec![channels, s, s], mask3)?);
    let masked = tape.mul(blended, mask3)?;
    let rotated = tape.rotate(masked, angle_deg)?;
    let scaled = if side != s {
        tape.bilinear_resize(rotated, side, side)?
    } else {
        rotated
    };

    // Paste: placed patch plus the shielded original image.
    let placed = tape.embed(scaled, height, width, r0, c0)?;
    let shield = placed_inverse_mask(mask, channels, height, width, location, angle_deg, scale)?;
    let shield = tape.constant(shield);
    let kept = tape.mul(shield, image)?;
    let combined = tape.add(placed, kept)?;
    tape.clamp01(combined)
}

/// Paste the patch into an image. Pixels outside the placed footprint
/// are bit-identical to the input.
pub fn apply_patch(image: &ImageTensor, patch: &PatchSpec) -> Result<ImageTensor> {
    patch.validate_for(image.height(), image.width())?;
    if patch.channels() != image.channels() {
        return Err(Error::invalid("patch", "channel count differs from image"));
    }
    let mut tape = Tape::new();
    let image_node = tape.constant(image.tensor().clone());
    let pixels = tape.constant(patch.pixels.clone());
    let beta = tape.constant(patch.beta());
    let out = apply_patch_nodes(
        &mut tape,
        image_node,
        pixels,
        beta,
        &patch.mask,
        patch.location,
        patch.angle_deg,
        patch.scale,
    )?;
    ImageTensor::new(tape.value(out).clone())
}

/// Total squared difference of horizontal and vertical neighbours,
/// summed over channels.
pub fn smoothness_loss(beta: &Tensor) -> Result<f64> {
    let (c_n, h, w) = beta.dims3()?;
    let b = beta.data();
    let mut total = 0.0;
    for c in 0..c_n {
        let base = c * h;
        for y in 0..h {
            for x in 0..w {
                let v = b[(base + y) * w + x];
                if x + 1 < w {
                    let d = b[(base + y) * w + x + 1] - v;
                    total += d * d;
                }
                if y + 1 < h {
                    let d = b[(base + y + 1) * w + x] - v;
                    total += d * d;
                }
            }
        }
    }
    Ok(total)
}

/// Tape version of [`smoothness_loss`], built from crops and sums.
fn smoothness_node(tape: &mut Tape, beta: NodeId) -> Result<NodeId> {
    let (_, h, w) = tape.value(beta).dims3()?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    if w > 1 {
        let right = tape.crop(beta, 0, 1, h, w - 1)?;
        let left = tape.crop(beta, 0, 0, h, w - 1)?;
        let diff = tape.sub(right, left)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq)?;
        total = tape.add(total, sum)?;
    }
    if h > 1 {
        let down = tape.crop(beta, 1, 0, h - 1, w)?;
        let up = tape.crop(beta, 0, 0, h - 1, w)?;
        let diff = tape.sub(down, up)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum(sq)?;
        total = tape.add(total, sum)?;
    }
    Ok(total)
}

/// Mean squared error node between a `[1,h,w]` output and a target map.
fn mse_node(tape: &mut Tape, output: NodeId, target: &DensityMap) -> Result<NodeId> {
    let t = Tensor::new(
        vec![1, target.height(), target.width()],
        target.tensor().data().to_vec(),
    )?;
    let t = tape.constant(t);
    let diff = tape.sub(output, t)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum(sq)?;
    tape.affine(sum, 1.0 / (target.height() * target.width()) as f64, 0.0)
}

/// Attack objective value: mean over models of the targeted density MSE,
/// plus `gamma` times the blend smoothness.
pub fn patch_objective(
    models: &[&Model],
    adversarial: &ImageTensor,
    target: &DensityMap,
    gamma: f64,
    beta: &Tensor,
) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::invalid("attack objective", "no models"));
    }
    let numel = (target.height() * target.width()) as f64;
    let mut acc = 0.0;
    for model in models {
        let pred = model.predict_density(adversarial)?;
        if (pred.height(), pred.width()) != (target.height(), target.width()) {
            return Err(Error::invalid(
                "attack objective",
                "target resolution differs from model output",
            ));
        }
        let sq: f64 = pred
            .tensor()
            .data()
            .iter()
            .zip(target.tensor().data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        acc += sq / numel;
    }
    Ok(acc / models.len() as f64 + gamma * smoothness_loss(beta)?)
}

/// One momentum update: `q' = mu * q + grad / ||grad||_1`, then a signed
/// descent step `params' = params - eps * sign(q')`.
#[derive(Debug, Clone)]
pub struct MomentumStep {
    pub velocity: Tensor,
    pub params: Tensor,
    /// Gradient had zero L1 norm; velocity decayed, parameters unchanged.
    pub zero_gradient: bool,
}

pub fn momentum_step(
    velocity: &Tensor,
    grad: &Tensor,
    mu: f64,
    eps: f64,
    params: &Tensor,
) -> Result<MomentumStep> {
    if velocity.shape() != grad.shape() || params.shape() != grad.shape() {
        return Err(Error::invalid(
            "momentum step",
            format!(
                "shapes differ: velocity {:?}, grad {:?}, params {:?}",
                velocity.shape(),
                grad.shape(),
                params.shape()
            ),
        ));
    }
    let l1: f64 = grad.data().iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Ok(MomentumStep {
            velocity: velocity.map(|v| mu * v),
            params: params.clone(),
            zero_gradient: true,
        });
    }
    let next = velocity.zip(grad, |v, g| mu * v + g / l1)?;
    let stepped = params.zip(&next, |p, q| {
        // signum(0.0) is 1.0 in Rust; a zero accumulator must not step.
        let sign = if q == 0.0 { 0.0 } else { q.signum() };
        p - eps * sign
    })?;
    Ok(MomentumStep {
        velocity: next,
        params: stepped,
        zero_gradient: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub restart: usize,
    pub iteration: usize,
    pub objective: f64,
    pub predicted_count: f64,
    pub zero_gradient: bool,
}

/// Per-iteration objective and predicted count across the whole run
/// (all restarts, in order).
#[derive(Debug, Clone, Default)]
pub struct AttackTrace {
    pub records: Vec<IterationRecord>,
}

impl AttackTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// Running minimum of the objective; non-increasing by construction.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.objective);
                best
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,objective,predicted_count\n");
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i, r.objective, r.predicted_count));
        }
        out
    }
}

pub struct AttackOutcome {
    pub patch: PatchSpec,
    /// Adversarial image of the first batch item at the best iterate.
    pub adversarial: ImageTensor,
    pub trace: AttackTrace,
}

/// Shared optimization engine. `items` pair each image with its target
/// map at model-output resolution; a single shared patch is optimized
/// across all of them (mini-batched when there are more than
/// `cfg.batch_size`).
fn optimize_patch(
    models: &[&Model],
    items: &[(&ImageTensor, &DensityMap)],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::invalid("attack", "no models"));
    }
    if items.is_empty() {
        return Err(Error::invalid("attack", "no images"));
    }
    let channels = items[0].0.channels();
    let (height, width) = (items[0].0.height(), items[0].0.width());
    for (image, _) in items {
        if (image.channels(), image.height(), image.width()) != (channels, height, width) {
            return Err(Error::invalid("attack", "images must share one geometry"));
        }
    }

    let mut trace = AttackTrace::default();
    let mut best: Option<(f64, PatchSpec, ImageTensor)> = None;

    for restart in 0..cfg.restarts {
        let mut patch = init_patch_for_restart(cfg, channels, height, width, restart)?;
        let mut transform_rng = rng::rng(rng::mix3(cfg.seed, 0x7af0, restart as u64));
        let mut vel_pixels = Tensor::zeros(patch.pixels.shape().to_vec());
        let mut vel_beta = Tensor::zeros(patch.beta_preact.shape().to_vec());

        for iteration in 0..cfg.iterations {
            let (a_lo, a_hi) = cfg.angle_range_deg;
            let angle = if a_hi > a_lo {
                transform_rng.gen_range(a_lo..a_hi)
            } else {
                a_lo
            };
            let (s_lo, s_hi) = cfg.scale_range;
            let scale = if s_hi > s_lo {
                transform_rng.gen_range(s_lo..s_hi)
            } else {
                s_lo
            };

            let batch: Vec<usize> = if items.len() <= cfg.batch_size {
                (0..items.len()).collect()
            } else {
                (0..cfg.batch_size)
                    .map(|j| (iteration * cfg.batch_size + j) % items.len())
                    .collect()
            };

            let mut tape = Tape::new();
            let pixels_leaf = tape.leaf(patch.pixels.clone());
            let beta_leaf = tape.leaf(patch.beta_preact.clone());
            let beta = tape.sigmoid(beta_leaf)?;

            // Per image: mean over models of the targeted MSE; then the
            // batch mean of those. Grouping this way keeps an ensemble of
            // identical substitutes bitwise equal to a single-model run.
            let mut first_adv = None;
            let mut first_count = 0.0;
            let mut image_terms = Vec::new();
            for (slot, &idx) in batch.iter().enumerate() {
                let (image, target) = items[idx];
                let image_node = tape.constant(image.tensor().clone());
                let adv = apply_patch_nodes(
                    &mut tape,
                    image_node,
                    pixels_leaf,
                    beta,
                    &patch.mask,
                    patch.location,
                    angle,
                    scale,
                )?;
                if slot == 0 {
                    first_adv = Some(adv);
                }
                let mut model_acc = None;
                for (m, model) in models.iter().enumerate() {
                    let graph = model.forward(&mut tape, adv, false)?;
                    if slot == 0 && m == 0 {
                        first_count = tape.value(graph.output).sum();
                    }
                    let term = mse_node(&mut tape, graph.output, target)?;
                    model_acc = Some(match model_acc {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                let summed = model_acc.expect("at least one model");
                image_terms.push(tape.affine(summed, 1.0 / models.len() as f64, 0.0)?);
            }
            let mut acc = image_terms[0];
            for &term in &image_terms[1..] {
                acc = tape.add(acc, term)?;
            }
            let mean = tape.affine(acc, 1.0 / image_terms.len() as f64, 0.0)?;
            let smooth = smoothness_node(&mut tape, beta)?;
            let weighted = tape.affine(smooth, cfg.gamma, 0.0)?;
            let objective = tape.add(mean, weighted)?;
            let value = tape.value(objective).item()?;

            if best.as_ref().map_or(true, |(b, _, _)| value < *b) {
                let snapshot = PatchSpec {
                    angle_deg: angle,
                    scale,
                    ..patch.clone()
                };
                let adv_image =
                    ImageTensor::new(tape.value(first_adv.expect("batch nonempty")).clone())?;
                best = Some((value, snapshot, adv_image));
            }

            let grads = tape.backward(objective)?;
            let g_pixels = grads
                .wrt(pixels_leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(patch.pixels.shape().to_vec()));
            let g_beta = grads
                .wrt(beta_leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(patch.beta_preact.shape().to_vec()));

            let step_p = momentum_step(&vel_pixels, &g_pixels, cfg.momentum, cfg.step_size, &patch.pixels)?;
            let step_b = momentum_step(&vel_beta, &g_beta, cfg.momentum, cfg.step_size, &patch.beta_preact)?;
            trace.records.push(IterationRecord {
                restart,
                iteration,
                objective: value,
                predicted_count: first_count,
                zero_gradient: step_p.zero_gradient && step_b.zero_gradient,
            });

            vel_pixels = step_p.velocity;
            vel_beta = step_b.velocity;
            patch.pixels = step_p.params.map(|v| v.clamp(0.0, 1.0));
            patch.beta_preact = step_b.params;
        }
    }

    let (_, patch, adversarial) = best.expect("at least one iteration ran");
    Ok(AttackOutcome {
        patch,
        adversarial,
        trace,
    })
}

/// Resolve a ground-truth map (full canvas resolution or already at the
/// model output resolution) into the attack target `alpha * GT`.
fn attack_target(model: &Model, image: &ImageTensor, gt: &DensityMap, alpha: f64) -> Result<DensityMap> {
    let (oh, ow) = model.spec().output_shape(image.height(), image.width())?;
    let at_output = if (gt.height(), gt.width()) == (image.height(), image.width()) {
        gt.downsample_block(crate::models::OUTPUT_STRIDE)?
    } else if (gt.height(), gt.width()) == (oh, ow) {
        gt.clone()
    } else {
        return Err(Error::invalid(
            "attack target",
            format!(
                "ground truth {}x{} matches neither canvas nor output resolution",
                gt.height(),
                gt.width()
            ),
        ));
    };
    at_output.scaled(alpha)
}

/// White-box attack against one frozen model on one image. Returns the
/// best-objective patch, the adversarial image at that iterate, and the
/// full trace.
pub fn run_whitebox_attack(
    model: &Model,
    image: &ImageTensor,
    gt: &DensityMap,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    let target = attack_target(model, image, gt, cfg.target_factor)?;
    optimize_patch(&[model], &[(image, &target)], cfg)
}

/// Black-box driver: one universal patch optimized jointly across
/// substitute models and a set of images. Evaluation against held-out
/// architectures is the caller's job.
pub fn run_blackbox_attack(
    substitutes: &[&Model],
    items: &[(&ImageTensor, &DensityMap)],
    cfg: &AttackConfig,
) -> Result<(PatchSpec, AttackTrace)> {
    if substitutes.is_empty() {
        return Err(Error::invalid("attack", "no substitute models"));
    }
    let mut targets = Vec::with_capacity(items.len());
    for (image, gt) in items {
        targets.push(attack_target(substitutes[0], image, gt, cfg.target_factor)?);
    }
    let paired: Vec<(&ImageTensor, &DensityMap)> = items
        .iter()
        .zip(&targets)
        .map(|(&(image, _), target)| (image, target))
        .collect();
    let outcome = optimize_patch(substitutes, &paired, cfg)?;
    Ok((outcome.patch, outcome.trace))
}

/// Uniform-noise patch baseline: the initial patch, no optimization.
pub fn random_patch(
    cfg: &AttackConfig,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<PatchSpec> {
    init_patch(cfg, channels, height, width)
}
