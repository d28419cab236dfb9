//! Analytic gradients of the batch MSE loss, hand-derived per block.
//!
//! For each sample the chain runs sigmoid head -> z-dropout -> bilinear
//! layers -> projection dropout -> leaky-ReLU -> dense projections ->
//! input dropout. Dropout masks are sampled here (one set per batch
//! element, in batch order) and held fixed, so the returned gradients are
//! the exact partials of the realized stochastic loss.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use super::{
    ensure_config_match, leaky_relu_grad, run_forward, sample_masks, DropoutMasks, ForwardTrace,
    Gradients, ModelConfig, ModelError, ModelParams, ParamBlock,
};
use crate::data::Sample;

/// Mean-squared-error loss over a batch and its exact gradients.
///
/// Every sample must carry a target. Masks are drawn from `rng` in batch
/// order; with `dropout_rate == 0` no randomness is consumed and the loss
/// is deterministic.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[Sample],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients), ModelError> {
    config.validate()?;
    ensure_config_match(params, config)?;
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }

    let mut grads = Gradients::zeros(config);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;

    for sample in batch {
        let target = sample
            .target_value()
            .ok_or_else(|| ModelError::MissingTarget(sample.sample_id.clone()))?;
        let n_labels_used = config.num_labels.min(sample.labels.len());
        let masks = sample_masks(config, n_labels_used, rng);
        let trace = run_forward(params, config, sample, Some(&masks))?;

        let err = trace.score - target;
        loss += err * err * inv_b;
        // d loss / d logit through the sigmoid.
        let dlogit = 2.0 * err * inv_b * trace.score * (1.0 - trace.score);
        accumulate_sample(params, config, &trace, &masks, dlogit, &mut grads);
    }

    Ok((loss, grads))
}

/// Add one sample's gradient contribution (scaled by `dlogit`) to `grads`.
fn accumulate_sample(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    masks: &DropoutMasks,
    dlogit: f64,
    grads: &mut Gradients,
) {
    let k = config.num_labels;

    // Output head: logit = w_out . z_dropped + b_out.
    {
        let g_w_out = grads.block_mut(ParamBlock::WOut);
        for (g, &z) in g_w_out.iter_mut().zip(trace.z_dropped.iter()) {
            *g += dlogit * z;
        }
        grads.block_mut(ParamBlock::BOut)[0] += dlogit;
    }

    // Through z-dropout back to the raw bilinear outputs.
    let w_out = params.vector(ParamBlock::WOut);
    let dz: Vec<f64> = (0..config.z_len())
        .map(|i| dlogit * w_out[i] * masks.z[i])
        .collect();

    let bil_oi = params.matrix(ParamBlock::BilOi);
    let bil_os = params.matrix(ParamBlock::BilOs);
    let bil_is = params.matrix(ParamBlock::BilIs);
    let image_aug = &trace.image_aug;
    let sentence_aug = &trace.sentence_aug;

    // Shared matrix-vector products for the label loop.
    let oi_img = bil_oi.dot(image_aug);
    let os_sen = bil_os.dot(sentence_aug);

    // u_oi = sum_j dz[j] * label_j, u_os = sum_j dz[k+j] * label_j; by
    // linearity these collapse the per-label outer products and transposed
    // matvecs into one each.
    let aug_len = image_aug.len();
    let mut u_oi = Array1::<f64>::zeros(aug_len);
    let mut u_os = Array1::<f64>::zeros(aug_len);
    let mut d_labels_aug = Vec::with_capacity(trace.labels_aug.len());
    for (j, label_aug) in trace.labels_aug.iter().enumerate() {
        let d_lbl = &oi_img * dz[j] + &os_sen * dz[k + j];
        d_labels_aug.push(d_lbl);
        u_oi.scaled_add(dz[j], label_aug);
        u_os.scaled_add(dz[k + j], label_aug);
    }

    let dz_is = dz[2 * k];
    let d_image_aug = bil_oi.t().dot(&u_oi) + bil_is.dot(sentence_aug) * dz_is;
    let d_sentence_aug = bil_os.t().dot(&u_os) + bil_is.t().dot(image_aug) * dz_is;

    add_scaled_outer(
        grads.block_mut(ParamBlock::BilOi),
        as_slice(&u_oi),
        as_slice(image_aug),
        1.0,
    );
    add_scaled_outer(
        grads.block_mut(ParamBlock::BilOs),
        as_slice(&u_os),
        as_slice(sentence_aug),
        1.0,
    );
    add_scaled_outer(
        grads.block_mut(ParamBlock::BilIs),
        as_slice(image_aug),
        as_slice(sentence_aug),
        dz_is,
    );

    // Through the three projections.
    project_backward(
        grads,
        ParamBlock::WImg,
        ParamBlock::BImg,
        &d_image_aug,
        &trace.image_pre,
        &trace.image_in,
        Some(&masks.image_proj),
        config.leaky_slope,
    );
    project_backward(
        grads,
        ParamBlock::WSen,
        ParamBlock::BSen,
        &d_sentence_aug,
        &trace.sentence_pre,
        &trace.sentence_in,
        Some(&masks.sentence_proj),
        config.leaky_slope,
    );
    for (j, d_lbl_aug) in d_labels_aug.iter().enumerate() {
        project_backward(
            grads,
            ParamBlock::WLbl,
            ParamBlock::BLbl,
            d_lbl_aug,
            &trace.labels_pre[j],
            &trace.labels_in[j],
                Some(&masks.labels_proj[j]),
            config.leaky_slope,
        );
    }
}

/// Backprop one dense projection: d_aug covers the augmented output whose
/// final constant-1 entry carries no parameter gradient. A `proj_mask` of
/// `None` means no projection dropout was applied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn project_backward(
    grads: &mut Gradients,
    w_block: ParamBlock,
    b_block: ParamBlock,
    d_aug: &Array1<f64>,
    pre: &Array1<f64>,
    input: &Array1<f64>,
    proj_mask: Option<&[f64]>,
    slope: f64,
) {
    let p = pre.len();
    let mut d_pre = vec![0.0; p];
    for i in 0..p {
        let mask = proj_mask.map_or(1.0, |m| m[i]);
        d_pre[i] = d_aug[i] * mask * leaky_relu_grad(pre[i], slope);
    }
    {
        let g_b = grads.block_mut(b_block);
        for (g, &d) in g_b.iter_mut().zip(&d_pre) {
            *g += d;
        }
    }
    add_scaled_outer(grads.block_mut(w_block), &d_pre, as_slice(input), 1.0);
}

/// block[r, c] += scale * a[r] * b[c] over the flat row-major block.
pub(crate) fn add_scaled_outer(block: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    debug_assert_eq!(block.len(), a.len() * b.len());
    for (row, &av) in a.iter().enumerate() {
        let coeff = scale * av;
        if coeff == 0.0 {
            continue;
        }
        let out = &mut block[row * b.len()..(row + 1) * b.len()];
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += coeff * bv;
        }
    }
}

fn as_slice(v: &Array1<f64>) -> &[f64] {
    v.as_slice().expect("owned 1-D arrays are contiguous")
}
