//! Forward pass: projections, bilinear interactions, sigmoid head.
//!
//! Train mode applies inverted dropout to the input of every trainable
//! layer: the raw embeddings before their dense projections, the projected
//! activations before the bilinear layers (masked once per activation and
//! shared by both bilinear consumers, before the constant-1 augmentation),
//! and the concatenated bilinear vector before the output head. Kept
//! entries are scaled by 1/(1-rate) so inference needs no rescaling.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    ensure_config_match, leaky_relu, sigmoid, ModelConfig, ModelError, ModelParams, ParamBlock,
};
use crate::data::Sample;

/// Whether a pass is a deterministic inference pass or a training pass
/// drawing dropout masks from the supplied RNG.
pub enum ForwardMode<'r> {
    Infer,
    Train { rng: &'r mut ChaCha8Rng },
}

/// Multiplicative dropout masks for one sample. Entries are 0 (dropped) or
/// 1/(1-rate) (kept); an all-ones mask set means dropout is inactive.
#[derive(Debug, Clone)]
pub(crate) struct DropoutMasks {
    pub image_in: Vec<f64>,
    pub labels_in: Vec<Vec<f64>>,
    pub sentence_in: Vec<f64>,
    pub image_proj: Vec<f64>,
    pub labels_proj: Vec<Vec<f64>>,
    pub sentence_proj: Vec<f64>,
    pub z: Vec<f64>,
}

/// Draw dropout masks for a sample with `n_labels_used` active label slots.
///
/// Masks are drawn in a fixed order (image, labels by rank, sentence; then
/// the same order for projections; then the bilinear-output vector), so a
/// given RNG state always produces the same masks. A zero dropout rate
/// consumes no randomness.
pub(crate) fn sample_masks(
    config: &ModelConfig,
    n_labels_used: usize,
    rng: &mut ChaCha8Rng,
) -> DropoutMasks {
    let rate = config.dropout_rate;
    let mut draw = |len: usize| -> Vec<f64> {
        if rate == 0.0 {
            return vec![1.0; len];
        }
        let keep_scale = 1.0 / (1.0 - rate);
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    };
    DropoutMasks {
        image_in: draw(crate::data::IMAGE_DIM),
        labels_in: (0..n_labels_used)
            .map(|_| draw(crate::data::LABEL_DIM))
            .collect(),
        sentence_in: draw(crate::data::SENTENCE_DIM),
        image_proj: draw(config.proj_dim),
        labels_proj: (0..n_labels_used)
            .map(|_| draw(config.proj_dim))
            .collect(),
        sentence_proj: draw(config.proj_dim),
        z: draw(config.z_len()),
    }
}

/// Everything the backward pass needs from a forward pass.
pub(crate) struct ForwardTrace {
    /// Post-input-dropout embeddings, widened to f64.
    pub image_in: Array1<f64>,
    pub labels_in: Vec<Array1<f64>>,
    pub sentence_in: Array1<f64>,
    /// Dense pre-activations (before leaky-ReLU).
    pub image_pre: Array1<f64>,
    pub labels_pre: Vec<Array1<f64>>,
    pub sentence_pre: Array1<f64>,
    /// Post-activation, post-projection-dropout vectors with the trailing
    /// constant 1 appended (length P+1).
    pub image_aug: Array1<f64>,
    pub labels_aug: Vec<Array1<f64>>,
    pub sentence_aug: Array1<f64>,
    /// Concatenated bilinear outputs before z-dropout.
    pub z: Array1<f64>,
    pub z_dropped: Array1<f64>,
    pub logit: f64,
    pub score: f64,
    pub n_labels_used: usize,
}

fn widen_masked(values: &[f32], mask: Option<&[f64]>) -> Array1<f64> {
    match mask {
        Some(mask) => Array1::from_iter(
            values
                .iter()
                .zip(mask)
                .map(|(&v, &m)| f64::from(v) * m),
        ),
        None => Array1::from_iter(values.iter().map(|&v| f64::from(v))),
    }
}

/// Dense projection with leaky activation, projection dropout, and the
/// constant-1 augmentation. Returns (pre-activation, augmented output).
fn project(
    params: &ModelParams,
    w: ParamBlock,
    b: ParamBlock,
    input: &Array1<f64>,
    slope: f64,
    proj_mask: Option<&[f64]>,
) -> (Array1<f64>, Array1<f64>) {
    let pre = params.matrix(w).dot(input) + params.vector(b);
    let p = pre.len();
    let mut aug = Array1::zeros(p + 1);
    for i in 0..p {
        let act = leaky_relu(pre[i], slope);
        aug[i] = match proj_mask {
            Some(mask) => act * mask[i],
            None => act,
        };
    }
    aug[p] = 1.0;
    (pre, aug)
}

/// Run the full pipeline for one sample. `masks` of `None` is an inference
/// pass.
pub(crate) fn run_forward(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    masks: Option<&DropoutMasks>,
) -> Result<ForwardTrace, ModelError> {
    ensure_config_match(params, config)?;
    let k = config.num_labels;
    let n_labels_used = k.min(sample.labels.len());
    let slope = config.leaky_slope;

    let image_in = widen_masked(sample.image.values(), masks.map(|m| m.image_in.as_slice()));
    let sentence_in = widen_masked(
        sample.sentence.values(),
        masks.map(|m| m.sentence_in.as_slice()),
    );
    let labels_in: Vec<Array1<f64>> = (0..n_labels_used)
        .map(|j| {
            widen_masked(
                sample.labels[j].values(),
                masks.map(|m| m.labels_in[j].as_slice()),
            )
        })
        .collect();

    let (image_pre, image_aug) = project(
        params,
        ParamBlock::WImg,
        ParamBlock::BImg,
        &image_in,
        slope,
        masks.map(|m| m.image_proj.as_slice()),
    );
    let (sentence_pre, sentence_aug) = project(
        params,
        ParamBlock::WSen,
        ParamBlock::BSen,
        &sentence_in,
        slope,
        masks.map(|m| m.sentence_proj.as_slice()),
    );
    let mut labels_pre = Vec::with_capacity(n_labels_used);
    let mut labels_aug = Vec::with_capacity(n_labels_used);
    for (j, label_in) in labels_in.iter().enumerate() {
        let (pre, aug) = project(
            params,
            ParamBlock::WLbl,
            ParamBlock::BLbl,
            label_in,
            slope,
            masks.map(|m| m.labels_proj[j].as_slice()),
        );
        labels_pre.push(pre);
        labels_aug.push(aug);
    }

    // z = [label-image terms | label-sentence terms | image-sentence term];
    // absent label slots stay exactly zero.
    let bil_oi = params.matrix(ParamBlock::BilOi);
    let bil_os = params.matrix(ParamBlock::BilOs);
    let bil_is = params.matrix(ParamBlock::BilIs);
    let mut z = Array1::zeros(config.z_len());
    for (j, label_aug) in labels_aug.iter().enumerate() {
        z[j] = label_aug.dot(&bil_oi.dot(&image_aug));
        z[k + j] = label_aug.dot(&bil_os.dot(&sentence_aug));
    }
    z[2 * k] = image_aug.dot(&bil_is.dot(&sentence_aug));

    let z_dropped = match masks {
        Some(m) => &z * &Array1::from_iter(m.z.iter().copied()),
        None => z.clone(),
    };

    let w_out: ArrayView1<f64> = params.vector(ParamBlock::WOut);
    let logit = w_out.dot(&z_dropped) + params.b_out();
    if !logit.is_finite() {
        return Err(ModelError::NonFiniteIntermediate {
            sample_id: sample.sample_id.clone(),
            stage: "output logit",
        });
    }
    let score = sigmoid(logit);

    Ok(ForwardTrace {
        image_in,
        labels_in,
        sentence_in,
        image_pre,
        labels_pre,
        sentence_pre,
        image_aug,
        labels_aug,
        sentence_aug,
        z,
        z_dropped,
        logit,
        score,
        n_labels_used,
    })
}

fn trace_for_mode(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    mode: ForwardMode<'_>,
) -> Result<ForwardTrace, ModelError> {
    config.validate()?;
    match mode {
        ForwardMode::Infer => run_forward(params, config, sample, None),
        ForwardMode::Train { rng } => {
            let n_labels_used = config.num_labels.min(sample.labels.len());
            let masks = sample_masks(config, n_labels_used, rng);
            run_forward(params, config, sample, Some(&masks))
        }
    }
}

/// Quality score in (0, 1) for one sample.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    mode: ForwardMode<'_>,
) -> Result<f64, ModelError> {
    trace_for_mode(params, config, sample, mode).map(|t| t.score)
}

/// Pre-sigmoid output of the same pipeline; monotonically equivalent to
/// [`forward`] and the quantity compared during similarity pretraining.
pub fn forward_logit(
    params: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    mode: ForwardMode<'_>,
) -> Result<f64, ModelError> {
    trace_for_mode(params, config, sample, mode).map(|t| t.logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::random_sample;
    use rand::SeedableRng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            proj_dim: 8,
            num_labels: 3,
            leaky_slope: 0.01,
            dropout_rate: 0.2,
        }
    }

    #[test]
    fn zero_params_score_half() {
        let cfg = ModelConfig::default();
        let params = ModelParams::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let sample = random_sample(&mut rng, "s", "i", 4, false);
        let score = forward(&params, &cfg, &sample, ForwardMode::Infer).unwrap();
        assert_eq!(score, 0.5);
    }

    #[test]
    fn zero_label_sample_uses_only_the_image_sentence_path() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ModelParams::init(&cfg, 9);
        let sample = random_sample(&mut rng, "s", "i", 0, false);

        let trace = run_forward(&params, &cfg, &sample, None).unwrap();
        assert_eq!(trace.n_labels_used, 0);
        for j in 0..2 * cfg.num_labels {
            assert_eq!(trace.z[j], 0.0, "label slot {j} leaked");
        }

        // Scrambling the label projection and label bilinears cannot move
        // the score.
        let mut scrambled = params.clone();
        for block in [
            ParamBlock::WLbl,
            ParamBlock::BLbl,
            ParamBlock::BilOi,
            ParamBlock::BilOs,
        ] {
            for v in scrambled.block_mut(block) {
                *v += 7.0;
            }
        }
        let a = forward(&params, &cfg, &sample, ForwardMode::Infer).unwrap();
        let b = forward(&scrambled, &cfg, &sample, ForwardMode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infer_is_deterministic() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let sample = random_sample(&mut rng, "s", "i", 3, false);
        let a = forward(&params, &cfg, &sample, ForwardMode::Infer).unwrap();
        let b = forward(&params, &cfg, &sample, ForwardMode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_is_deterministic_given_the_seed() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 3);
        let mut data_rng = ChaCha8Rng::seed_from_u64(23);
        let sample = random_sample(&mut data_rng, "s", "i", 2, false);

        let mut rng_a = ChaCha8Rng::seed_from_u64(77);
        let mut rng_b = ChaCha8Rng::seed_from_u64(77);
        let a = forward(&params, &cfg, &sample, ForwardMode::Train { rng: &mut rng_a }).unwrap();
        let b = forward(&params, &cfg, &sample, ForwardMode::Train { rng: &mut rng_b }).unwrap();
        assert_eq!(a, b);

        // A different seed almost surely drops a different mask.
        let mut rng_c = ChaCha8Rng::seed_from_u64(78);
        let c = forward(&params, &cfg, &sample, ForwardMode::Train { rng: &mut rng_c }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scores_stay_strictly_inside_unit_interval() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for seed in 0..10 {
            let params = ModelParams::init(&cfg, seed);
            let sample = random_sample(&mut rng, "s", "i", 3, false);
            let score = forward(&params, &cfg, &sample, ForwardMode::Infer).unwrap();
            assert!(score > 0.0 && score < 1.0);
        }
    }

    /// Growing the label budget K by one, with the old output weights kept
    /// at their positions and arbitrary weights in the new slots, cannot
    /// change the score of a sample that leaves the new slot absent.
    #[test]
    fn adding_an_absent_label_slot_never_changes_the_score() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(25);

        let cfg_wide = ModelConfig {
            num_labels: cfg.num_labels + 1,
            ..cfg
        };
        let mut wide = ModelParams::init(&cfg_wide, 999);
        // Copy every block except the output head verbatim.
        for block in [
            ParamBlock::WImg,
            ParamBlock::BImg,
            ParamBlock::WLbl,
            ParamBlock::BLbl,
            ParamBlock::WSen,
            ParamBlock::BSen,
            ParamBlock::BilOi,
            ParamBlock::BilOs,
            ParamBlock::BilIs,
            ParamBlock::BOut,
        ] {
            wide.block_mut(block).copy_from_slice(params.block(block));
        }
        // Re-embed the output head: old label-image weights at 0..K, old
        // label-sentence weights at K+1..2K+1, image-sentence at the end.
        let k = cfg.num_labels;
        let old_out = params.block(ParamBlock::WOut).to_vec();
        {
            let wide_out = wide.block_mut(ParamBlock::WOut);
            for j in 0..k {
                wide_out[j] = old_out[j];
                wide_out[(k + 1) + j] = old_out[k + j];
            }
            wide_out[2 * (k + 1)] = old_out[2 * k];
            // Slots k and 2k+1 keep their arbitrary random values.
        }

        for n_labels in 0..=k {
            let sample = random_sample(&mut rng, "s", "i", n_labels, false);
            let narrow = forward(&params, &cfg, &sample, ForwardMode::Infer).unwrap();
            let widened = forward(&wide, &cfg_wide, &sample, ForwardMode::Infer).unwrap();
            assert!(
                (narrow - widened).abs() < 1e-12,
                "n_labels={n_labels}: {narrow} vs {widened}"
            );
        }
    }

    /// Swapping two label embeddings swaps the matching z positions exactly.
    #[test]
    fn label_swap_permutes_z_positions() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let sample = random_sample(&mut rng, "s", "i", 3, false);

        let mut swapped = sample.clone();
        swapped.labels.swap(0, 2);

        let k = cfg.num_labels;
        let a = run_forward(&params, &cfg, &sample, None).unwrap();
        let b = run_forward(&params, &cfg, &swapped, None).unwrap();
        assert_eq!(a.z[0], b.z[2]);
        assert_eq!(a.z[2], b.z[0]);
        assert_eq!(a.z[1], b.z[1]);
        assert_eq!(a.z[k], b.z[k + 2]);
        assert_eq!(a.z[k + 2], b.z[k]);
        assert_eq!(a.z[2 * k], b.z[2 * k]);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg8 = ModelConfig {
            proj_dim: 8,
            ..ModelConfig::default()
        };
        let cfg16 = ModelConfig {
            proj_dim: 16,
            ..ModelConfig::default()
        };
        let params = ModelParams::zeros(&cfg8);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let sample = random_sample(&mut rng, "s", "i", 0, false);
        assert!(matches!(
            forward(&params, &cfg16, &sample, ForwardMode::Infer),
            Err(ModelError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn mask_draw_order_is_stable() {
        let cfg = small_config();
        let mut rng_a = ChaCha8Rng::seed_from_u64(31);
        let mut rng_b = ChaCha8Rng::seed_from_u64(31);
        let a = sample_masks(&cfg, 2, &mut rng_a);
        let b = sample_masks(&cfg, 2, &mut rng_b);
        assert_eq!(a.image_in, b.image_in);
        assert_eq!(a.labels_proj, b.labels_proj);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn zero_rate_masks_are_all_ones_and_consume_no_rng() {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            ..small_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let before = rng.clone().random::<u64>();
        let masks = sample_masks(&cfg, 1, &mut rng);
        assert!(masks.image_in.iter().all(|&m| m == 1.0));
        assert!(masks.z.iter().all(|&m| m == 1.0));
        assert_eq!(rng.random::<u64>(), before);
    }
}
