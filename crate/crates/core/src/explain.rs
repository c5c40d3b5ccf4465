//! Model introspection: Grad-CAM maps, the per-channel attention diagnostic,
//! and 1x1-convolution weight redundancy analysis.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class-discriminative localization map for one image and layer.
///
/// `values` is the `height x width` map `ReLU(sum_k alpha_k * A^k)`, where
/// `alpha_k` is the spatial mean of `d y_class / d A^k` (gradient of the
/// pre-softmax class score w.r.t. activation map `k`).
#[derive(Debug, Clone)]
pub struct CamMap<S: Scalar> {
    pub values: Vec<S>,
    pub height: usize,
    pub width: usize,
    pub class_id: usize,
    pub layer_name: String,
    pub importance_weights: Vec<S>,
}

/// Per-channel attention: L2 distance between the upsampled, normalized CAM
/// and each image channel, max-normalized so the largest entry is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector<S: Scalar> {
    pub values: Vec<S>,
}

/// Compute the Grad-CAM map of `class_id`'s pre-softmax score at the named
/// activation.
pub fn gradcam<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    cell_onehot: &[S],
    class_id: usize,
    layer_name: &str,
) -> Result<CamMap<S>> {
    let k = model.config().num_classes;
    if class_id >= k {
        return Err(Error::ClassOutOfRange { class: class_id, num_classes: k });
    }
    let mut g = Graph::new();
    let binding = model.bind(&mut g);
    let (embedding, trace) = model.forward_traced(&mut g, &binding, image, cell_onehot)?;
    let activation = trace
        .get(layer_name)
        .ok_or_else(|| Error::UnknownLayer(layer_name.to_string()))?;
    let (logits, _) = model.logits(&mut g, &binding, &[embedding])?;
    let score = g.select(logits, class_id)?;
    g.backward(score)?;

    let act = g.value(activation);
    if act.rank() != 3 {
        return Err(Error::UnknownLayer(format!(
            "{layer_name}: not a spatial activation (shape {:?})",
            act.shape()
        )));
    }
    let (maps, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let grad = g
        .grad(activation)
        .ok_or_else(|| Error::UnknownLayer(format!("{layer_name}: no gradient reached it")))?;
    let plane = S::from_f64_lossy((h * w) as f64);
    let alphas: Vec<S> = (0..maps)
        .map(|m| {
            grad[m * h * w..(m + 1) * h * w].iter().fold(S::zero(), |a, &v| a + v) / plane
        })
        .collect();
    let act_data = act.data();
    let mut values = vec![S::zero(); h * w];
    for (m, &alpha) in alphas.iter().enumerate() {
        let src = &act_data[m * h * w..(m + 1) * h * w];
        for (v, &a) in values.iter_mut().zip(src) {
            *v = *v + alpha * a;
        }
    }
    for v in values.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    Ok(CamMap {
        values,
        height: h,
        width: w,
        class_id,
        layer_name: layer_name.to_string(),
        importance_weights: alphas,
    })
}

/// Bilinear resize of a single plane.
fn upsample_bilinear<S: Scalar>(
    src: &[S],
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); dh * dw];
    let fy = sh as f64 / dh as f64;
    let fx = sw as f64 / dw as f64;
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = S::from_f64_lossy(sy - y0 as f64);
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = S::from_f64_lossy(sx - x0 as f64);
            let one = S::one();
            let top = src[y0 * sw + x0] * (one - wx) + src[y0 * sw + x1] * wx;
            let bottom = src[y1 * sw + x0] * (one - wx) + src[y1 * sw + x1] * wx;
            out[y * dw + x] = top * (one - wy) + bottom * wy;
        }
    }
    out
}

/// CAM plane upsampled to the image resolution and min-max normalized to
/// `[0, 1]`. Errors if the map is identically zero.
fn normalized_cam_plane<S: Scalar>(cam: &CamMap<S>, dh: usize, dw: usize) -> Result<Vec<S>> {
    if cam.values.iter().all(|&v| v == S::zero()) {
        return Err(Error::DegenerateCam);
    }
    let up = upsample_bilinear(&cam.values, cam.height, cam.width, dh, dw);
    let min = up.iter().fold(S::infinity(), |a, &v| a.min(v));
    let max = up.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let denom = max - min;
    if denom > S::zero() {
        Ok(up.into_iter().map(|v| (v - min) / denom).collect())
    } else {
        // constant non-zero map: already "at its maximum" everywhere
        Ok(vec![S::one(); dh * dw])
    }
}

/// Per-channel L2 distance between the normalized CAM and each channel plane
/// of a `[0,1]`-valued image, max-normalized.
pub fn channel_attention<S: Scalar>(cam: &CamMap<S>, image: &Tensor<S>) -> Result<AttentionVector<S>> {
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "channel_attention",
            detail: format!("expected (c,h,w) image, got {:?}", image.shape()),
        });
    }
    if image.data().iter().any(|&v| v < S::zero() || v > S::one()) {
        return Err(Error::InvalidConfig(
            "channel_attention: image channels must be value-normalized to [0,1]".into(),
        ));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let plane = normalized_cam_plane(cam, h, w)?;
    let mut distances: Vec<S> = (0..c)
        .map(|ci| {
            let ch = &image.data()[ci * h * w..(ci + 1) * h * w];
            plane
                .iter()
                .zip(ch)
                .fold(S::zero(), |a, (&p, &v)| a + (p - v) * (p - v))
                .sqrt()
        })
        .collect();
    let max = distances.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    if max > S::zero() {
        for d in distances.iter_mut() {
            *d = *d / max;
        }
    } else {
        // every channel coincides with the map; all are equally "attended"
        distances = vec![S::one(); c];
    }
    Ok(AttentionVector { values: distances })
}

/// Weight matrix of a 1x1 convolution layer, `c_out x c_in`; row `k` is the
/// k-th filter, so output channel `k` is the row-weighted average of the
/// input channels.
pub fn conv1x1_weight_matrix<S: Scalar>(model: &Model<S>, layer_name: &str) -> Result<Tensor<S>> {
    let weight = model
        .param(&format!("{layer_name}.weight"))
        .ok_or_else(|| Error::UnknownLayer(layer_name.to_string()))?;
    let shape = weight.shape();
    if shape.len() != 4 || shape[2] != 1 || shape[3] != 1 {
        return Err(Error::NotConv1x1(layer_name.to_string()));
    }
    Tensor::from_vec(vec![shape[0], shape[1]], weight.data().to_vec())
}

/// Fraction of near-constant filter rows, and fraction of rows that belong
/// to a duplicate group (pairwise max-abs difference within `tol`).
pub fn redundancy_score<S: Scalar>(weights: &Tensor<S>, tol: S) -> Result<(f64, f64)> {
    if !(tol > S::zero()) {
        return Err(Error::InvalidConfig(format!("redundancy tol must be > 0, got {tol}")));
    }
    if weights.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "redundancy_score",
            detail: format!("expected a 2-d weight matrix, got {:?}", weights.shape()),
        });
    }
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    let data = weights.data();
    let mut banded = 0usize;
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mean = row.iter().fold(S::zero(), |a, &v| a + v) / S::from_f64_lossy(cols as f64);
        if row.iter().all(|&v| (v - mean).abs() <= tol) {
            banded += 1;
        }
    }
    let mut in_group = vec![false; rows];
    for i in 0..rows {
        for j in i + 1..rows {
            let a = &data[i * cols..(i + 1) * cols];
            let b = &data[j * cols..(j + 1) * cols];
            let max_diff =
                a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc.max((x - y).abs()));
            if max_diff <= tol {
                in_group[i] = true;
                in_group[j] = true;
            }
        }
    }
    let grouped = in_group.iter().filter(|&&g| g).count();
    Ok((banded as f64 / rows as f64, grouped as f64 / rows as f64))
}

/// Default redundancy tolerance: 1e-3 relative to the matrix's max-abs entry.
pub fn default_redundancy_tol<S: Scalar>(weights: &Tensor<S>) -> S {
    let max_abs = weights.data().iter().fold(S::zero(), |a, &v| a.max(v.abs()));
    let floor = S::from_f64_lossy(f64::MIN_POSITIVE);
    S::from_f64_lossy(1e-3) * max_abs.max(floor)
}

/// Export a CAM as an 8-bit PGM after min-max scaling.
pub fn write_cam_pgm<S: Scalar>(cam: &CamMap<S>, path: &Path) -> Result<()> {
    let min = cam.values.iter().fold(S::infinity(), |a, &v| a.min(v));
    let max = cam.values.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let denom = (max - min).to_f64_lossy();
    let pixels: Vec<u8> = cam
        .values
        .iter()
        .map(|&v| {
            if denom > 0.0 {
                (((v - min).to_f64_lossy() / denom) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    pgm::write_pgm8(path, cam.width, cam.height, &pixels)
}

/// CSV lines (`layer,channel_or_metric,value`) for one attention vector.
pub fn attention_csv<S: Scalar>(layer: &str, attention: &AttentionVector<S>) -> String {
    let mut out = String::from("layer,channel_or_metric,value\n");
    for (i, v) in attention.values.iter().enumerate() {
        out.push_str(&format!("{layer},channel{},{:.6}\n", i + 1, v.to_f64_lossy()));
    }
    out
}

/// CSV lines (`layer,channel_or_metric,value`) for per-layer redundancy
/// scores, in the given order.
pub fn redundancy_csv(scores: &[(String, f64, f64)]) -> String {
    let mut out = String::from("layer,channel_or_metric,value\n");
    for (layer, band, block) in scores {
        out.push_str(&format!("{layer},band_fraction,{band:.6}\n"));
        out.push_str(&format!("{layer},block_fraction,{block:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> Model<f64> {
        Model::build(ModelConfig {
            in_channels: 6,
            input_size: 32,
            growth_rate: 4,
            block_layers: vec![2, 2],
            embedding_dim: 8,
            num_classes: 5,
            num_cell_types: 4,
            seed,
        })
        .unwrap()
    }

    fn image(seed: u64, c: usize, s: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(vec![c, s, s], (0..c * s * s).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn onehot(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    }

    #[test]
    fn cam_values_are_non_negative_and_shaped() {
        let model = toy_model(3);
        let img = image(4, 6, 32);
        let layer = model.config().default_cam_layer();
        let cam = gradcam(&model, &img, &onehot(1), 2, &layer).unwrap();
        assert_eq!(cam.values.len(), cam.height * cam.width);
        assert_eq!(cam.importance_weights.len(), model.config().growth_rate);
        assert!(cam.values.iter().all(|&v| v >= 0.0));
        assert_eq!(cam.class_id, 2);
    }

    #[test]
    fn gradcam_rejects_unknown_layer_and_class() {
        let model = toy_model(5);
        let img = image(6, 6, 32);
        assert!(matches!(
            gradcam(&model, &img, &onehot(0), 0, "no.such.layer"),
            Err(Error::UnknownLayer(_))
        ));
        let layer = model.config().default_cam_layer();
        assert!(matches!(
            gradcam(&model, &img, &onehot(0), 9, &layer),
            Err(Error::ClassOutOfRange { class: 9, num_classes: 5 })
        ));
    }

    #[test]
    fn importance_weights_match_central_differences() {
        // alpha_k is the spatial mean of d y_c / d A^k; check each element's
        // derivative by perturb-and-replay, then average.
        let model = toy_model(7);
        let img = image(8, 6, 32);
        let layer = model.config().default_cam_layer();
        let class = 3usize;
        let cam = gradcam(&model, &img, &onehot(2), class, &layer).unwrap();

        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let (emb, trace) = model.forward_traced(&mut g, &binding, &img, &onehot(2)).unwrap();
        let act = trace.get(&layer).unwrap();
        let (logits, _) = model.logits(&mut g, &binding, &[emb]).unwrap();
        let score = g.select(logits, class).unwrap();

        let base = g.value(act).data().to_vec();
        let (maps, h, w) =
            (g.value(act).shape()[0], g.value(act).shape()[1], g.value(act).shape()[2]);
        let eps = 1e-5;
        let mut eval_at = |data: Vec<f64>| -> f64 {
            g.set_value(act, data).unwrap();
            g.replay_from(act).unwrap();
            g.value(score).item().unwrap()
        };
        for m in 0..maps {
            let mut fd_sum = 0.0;
            for idx in m * h * w..(m + 1) * h * w {
                let mut plus = base.clone();
                plus[idx] += eps;
                let f_plus = eval_at(plus);
                let mut minus = base.clone();
                minus[idx] -= eps;
                let f_minus = eval_at(minus);
                fd_sum += (f_plus - f_minus) / (2.0 * eps);
            }
            let fd_alpha = fd_sum / (h * w) as f64;
            let rel = (cam.importance_weights[m] - fd_alpha).abs()
                / f64::max(1.0, cam.importance_weights[m].abs());
            assert!(rel <= 1e-4, "map {m}: alpha={} fd={fd_alpha}", cam.importance_weights[m]);
        }
    }

    #[test]
    fn single_cell_activation_degenerates_to_scalar_product() {
        // With a 1x1 map, alpha = dy/dA and the map is max(0, alpha * A).
        let cam = CamMap {
            values: vec![0.75],
            height: 1,
            width: 1,
            class_id: 0,
            layer_name: "x".into(),
            importance_weights: vec![0.5],
        };
        assert_eq!(cam.values[0], 0.75);
    }

    #[test]
    fn non_positive_weights_on_non_negative_maps_give_zero_cam() {
        // Emulate: alphas <= 0, activations >= 0 -> ReLU clamps everything.
        let act = [0.5, 1.0, 0.0, 2.0];
        let alphas = [-0.3, 0.0];
        let mut values = [0.0f64; 2];
        for (m, &a) in alphas.iter().enumerate() {
            for i in 0..2 {
                values[i] += a * act[m * 2 + i];
            }
        }
        let clamped: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(clamped, vec![0.0, 0.0]);
    }

    fn cam_of(values: Vec<f64>, h: usize, w: usize) -> CamMap<f64> {
        CamMap {
            values,
            height: h,
            width: w,
            class_id: 0,
            layer_name: "t".into(),
            importance_weights: vec![],
        }
    }

    #[test]
    fn attention_zero_distance_for_identical_channel() {
        // channel 0 equals the normalized CAM exactly -> distance 0
        let cam = cam_of(vec![0.0, 0.25, 0.5, 1.0], 2, 2);
        let mut data = vec![0.0, 0.25, 0.5, 1.0]; // identical to normalized cam
        data.extend(vec![0.9; 4]);
        let img = Tensor::from_vec(vec![2, 2, 2], data).unwrap();
        let att = channel_attention(&cam, &img).unwrap();
        assert_eq!(att.values[0], 0.0);
        assert_eq!(att.values[1], 1.0);
    }

    #[test]
    fn attention_all_equal_channels_normalize_to_one() {
        let cam = cam_of(vec![0.1, 0.9, 0.4, 0.6], 2, 2);
        let plane = vec![0.3, 0.3, 0.3, 0.3];
        let mut data = Vec::new();
        for _ in 0..6 {
            data.extend(&plane);
        }
        let img = Tensor::from_vec(vec![6, 2, 2], data).unwrap();
        let att = channel_attention(&cam, &img).unwrap();
        assert_eq!(att.values, vec![1.0; 6]);
    }

    #[test]
    fn attention_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w) = (6usize, 6usize);
        let cam_vals: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..2.0)).collect();
        let cam = cam_of(cam_vals.clone(), h, w);
        let img_data: Vec<f64> = (0..6 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = Tensor::from_vec(vec![6, h, w], img_data.clone()).unwrap();
        let att = channel_attention(&cam, &img).unwrap();

        // independent route: no upsampling needed (same size), normalize and
        // accumulate squared differences positionally
        let min = cam_vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = cam_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: Vec<f64> = cam_vals.iter().map(|v| (v - min) / (max - min)).collect();
        let mut expected: Vec<f64> = (0..6)
            .map(|c| {
                let mut acc = 0.0;
                for i in 0..h * w {
                    let d = norm[i] - img_data[c * h * w + i];
                    acc += d * d;
                }
                acc.sqrt()
            })
            .collect();
        let emax = expected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for e in expected.iter_mut() {
            *e /= emax;
        }
        for (a, e) in att.values.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        let amax = att.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(amax, 1.0);
    }

    #[test]
    fn attention_has_six_entries_with_max_one_on_model_cams() {
        let model = toy_model(9);
        let img = image(10, 6, 32);
        let layer = model.config().default_cam_layer();
        let cam = gradcam(&model, &img, &onehot(3), 0, &layer).unwrap();
        let att = channel_attention(&cam, &img).unwrap();
        assert_eq!(att.values.len(), 6);
        let max = att.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn all_zero_cam_is_degenerate() {
        let cam = cam_of(vec![0.0; 4], 2, 2);
        let img = Tensor::from_vec(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(matches!(channel_attention(&cam, &img), Err(Error::DegenerateCam)));
    }

    #[test]
    fn conv1x1_matrix_shape_and_errors() {
        let model = toy_model(11);
        let m = conv1x1_weight_matrix(&model, "block1.layer1.conv1").unwrap();
        assert_eq!(m.shape(), &[model.config().growth_rate * 2, model.config().growth_rate * 2]);
        assert!(matches!(
            conv1x1_weight_matrix(&model, "block1.layer1.conv2"),
            Err(Error::NotConv1x1(_))
        ));
        assert!(matches!(
            conv1x1_weight_matrix(&model, "missing"),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn one_by_one_conv_is_weighted_channel_average() {
        // output channel k == sum_i w[k][i] * input channel i, on random input
        let model = toy_model(13);
        let img = image(14, 6, 32);
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let (_, trace) = model.forward_traced(&mut g, &binding, &img, &onehot(0)).unwrap();
        // input to block1.layer1.conv1 is relu(stem.pool)
        let pre = trace.get("stem.pool").unwrap();
        let conv_out = trace.get("block1.layer1.conv1").unwrap();
        let w = conv1x1_weight_matrix(&model, "block1.layer1.conv1").unwrap();
        let pre_t = g.value(pre);
        let (ci, h, ww) = (pre_t.shape()[0], pre_t.shape()[1], pre_t.shape()[2]);
        let relu_in: Vec<f64> = pre_t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = g.value(conv_out);
        let co = out.shape()[0];
        for k in 0..co {
            for p in 0..h * ww {
                let mut acc = 0.0;
                for i in 0..ci {
                    acc += w.data()[k * ci + i] * relu_in[i * h * ww + p];
                }
                let got = out.data()[k * h * ww + p];
                assert!((acc - got).abs() < 1e-12, "k={k} p={p}: {acc} vs {got}");
            }
        }
    }

    #[test]
    fn identity_one_by_one_filter_passes_channels_through() {
        let mut model = toy_model(15);
        let w = model.param_mut("block1.layer1.conv1.weight").unwrap();
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        let eye: Vec<f64> =
            (0..co * ci).map(|i| if i / ci == i % ci { 1.0 } else { 0.0 }).collect();
        w.set_data(eye).unwrap();
        let img = image(16, 6, 32);
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let (_, trace) = model.forward_traced(&mut g, &binding, &img, &onehot(0)).unwrap();
        let pre = trace.get("stem.pool").unwrap();
        let out = trace.get("block1.layer1.conv1").unwrap();
        let relu_in: Vec<f64> = g.value(pre).data().iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(g.value(out).data(), relu_in.as_slice());
    }

    #[test]
    fn redundancy_total_collapse() {
        // all rows identical constants -> (1.0, 1.0)
        let w = Tensor::from_vec(vec![4, 3], vec![0.2; 12]).unwrap();
        assert_eq!(redundancy_score(&w, 1e-6).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn redundancy_random_rows_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<f64> = (0..8 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(vec![8, 5], data).unwrap();
        assert_eq!(redundancy_score(&w, 1e-6).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn redundancy_two_duplicates_among_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut rows: Vec<Vec<f64>> =
            (0..7).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        rows.push(rows[2].clone()); // one duplicated pair among 8 rows
        let data: Vec<f64> = rows.concat();
        let w = Tensor::from_vec(vec![8, 4], data).unwrap();
        let (_, block) = redundancy_score(&w, 1e-9).unwrap();
        assert_eq!(block, 0.25);
    }

    #[test]
    fn redundancy_is_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        rows[4] = rows[1].clone();
        rows[5] = vec![0.5, 0.5, 0.5];
        let forward = Tensor::from_vec(vec![6, 3], rows.concat()).unwrap();
        let reversed: Vec<f64> = rows.iter().rev().flatten().copied().collect();
        let backward = Tensor::from_vec(vec![6, 3], reversed).unwrap();
        assert_eq!(
            redundancy_score(&forward, 1e-6).unwrap(),
            redundancy_score(&backward, 1e-6).unwrap()
        );
    }

    #[test]
    fn cam_pgm_export_is_minmax_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.pgm");
        let cam = cam_of(vec![0.0, 1.0, 2.0, 4.0], 2, 2);
        write_cam_pgm(&cam, &path).unwrap();
        let pgm = crate::pgm::read_pgm(&path).unwrap();
        assert_eq!(pgm.maxval, 255);
        assert_eq!(pgm.pixels, vec![0, 64, 128, 255]);
    }

    #[test]
    fn csv_layouts() {
        let att = AttentionVector { values: vec![1.0, 0.5] };
        let csv = attention_csv("block1.layer1.conv2", &att);
        assert!(csv.starts_with("layer,channel_or_metric,value\n"));
        assert!(csv.contains("block1.layer1.conv2,channel1,1.000000"));
        let rcsv = redundancy_csv(&[("t.conv".into(), 0.25, 0.5)]);
        assert!(rcsv.contains("t.conv,band_fraction,0.250000"));
        assert!(rcsv.contains("t.conv,block_fraction,0.500000"));
    }
}
