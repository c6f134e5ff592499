//! Loss terms: diffusion reconstruction, prior preservation, cross-attention
//! alignment, the masked-diffusion ablation, and the weighted total.
//!
//! Attention maps are head-averaged and max-normalized per map before the
//! comparison with the binary subject mask; raw softmax rows sum to 1 over
//! the token axis, so per-location values are far below 1 and would otherwise
//! just be pushed toward zero.

use crate::diffusion::{AttentionRecord, AttnTap};
use crate::error::{DecalError, Result};
use crate::tensor::{Graph, Var};
use crate::text::SlotPositions;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Per-step loss record; also the schema of the training-log lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ldm: f64,
    pub l_pr: Option<f64>,
    pub l_ca: Option<f64>,
    pub lambda_pr: f64,
    pub lambda_ca: f64,
    pub total: f64,
}

/// Mean squared error over all elements.
pub fn ldm_loss(eps: &Array3<f64>, eps_hat: &Array3<f64>) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(DecalError::Shape(format!(
            "eps {:?} vs eps_hat {:?}",
            eps.shape(),
            eps_hat.shape()
        )));
    }
    let n = eps.len() as f64;
    Ok(eps
        .iter()
        .zip(eps_hat.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Same formula as `ldm_loss`, applied to the regularization batch.
pub fn prior_loss(eps: &Array3<f64>, eps_hat_on_reg: &Array3<f64>) -> Result<f64> {
    ldm_loss(eps, eps_hat_on_reg)
}

/// Masked diffusion loss: || (eps - eps_hat) ⊙ M ||^2 / N with N the full
/// element count (plain norm convention).
pub fn masked_diffusion_loss(eps: &Array3<f64>, eps_hat: &Array3<f64>, mask: &Array2<f64>) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(DecalError::Shape(format!(
            "eps {:?} vs eps_hat {:?}",
            eps.shape(),
            eps_hat.shape()
        )));
    }
    if eps.shape()[1] != mask.shape()[0] || eps.shape()[2] != mask.shape()[1] {
        return Err(DecalError::Shape(format!(
            "mask {:?} vs image {:?}",
            mask.shape(),
            eps.shape()
        )));
    }
    let n = eps.len() as f64;
    let mut s = 0.0;
    for c in 0..eps.shape()[0] {
        for y in 0..eps.shape()[1] {
            for x in 0..eps.shape()[2] {
                let d = (eps[[c, y, x]] - eps_hat[[c, y, x]]) * mask[[y, x]];
                s += d * d;
            }
        }
    }
    Ok(s / n)
}

/// Weighted total: L = L_LDM + λ_pr · L_pr + λ_CA · L_CA, absent terms = 0.
pub fn total_loss(l_ldm: f64, l_pr: Option<f64>, l_ca: Option<f64>, lambda_pr: f64, lambda_ca: f64) -> Result<LossBreakdown> {
    if lambda_pr < 0.0 || lambda_ca < 0.0 {
        return Err(DecalError::Config("loss weights must be non-negative".into()));
    }
    let total = l_ldm + lambda_pr * l_pr.unwrap_or(0.0) + lambda_ca * l_ca.unwrap_or(0.0);
    if !total.is_finite() {
        return Err(DecalError::Numeric(format!(
            "non-finite loss: ldm {l_ldm}, pr {l_pr:?}, ca {l_ca:?}"
        )));
    }
    Ok(LossBreakdown { l_ldm, l_pr, l_ca, lambda_pr, lambda_ca, total })
}

// ---------------------------------------------------------------------------
// cross-attention loss
// ---------------------------------------------------------------------------

/// Downsample a binary mask by area-averaging then thresholding at 0.5,
/// keeping it binary. The source size must be an integer multiple of the
/// target size.
pub fn resample_mask(mask: &Array2<f64>, th: usize, tw: usize) -> Result<Array2<f64>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if h % th != 0 || w % tw != 0 {
        return Err(DecalError::Shape(format!(
            "mask {h}x{w} not divisible by target {th}x{tw}"
        )));
    }
    let (fy, fx) = (h / th, w / tw);
    let mut out = Array2::<f64>::zeros((th, tw));
    for y in 0..th {
        for x in 0..tw {
            let mut s = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    s += mask[[y * fy + dy, x * fx + dx]];
                }
            }
            let mean = s / (fy * fx) as f64;
            out[[y, x]] = if mean >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Arithmetic core of the attention alignment: mean |map - target| over
/// spatial locations. Exposed separately so closed-form oracles can target
/// it without the normalization step.
pub fn alignment_l1(map: &Array2<f64>, target: &Array2<f64>) -> f64 {
    debug_assert_eq!(map.shape(), target.shape());
    let n = map.len() as f64;
    map.iter().zip(target.iter()).map(|(&a, &b)| (a - b).abs()).sum::<f64>() / n
}

/// Divide a map by its max. Softmax outputs are strictly positive, so the
/// max is nonzero; the result has max exactly 1.
pub fn max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let m = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(m > 0.0, "attention map max must be positive");
    let out = map.mapv(|v| v / m);
    debug_assert!((out.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-12);
    out
}

/// Head-averaged map for one token position at one layer, reshaped to (h, w).
fn layer_token_map(maps: &Array3<f64>, pos: usize, h: usize, w: usize) -> Array2<f64> {
    let heads = maps.shape()[0];
    let mut out = Array2::<f64>::zeros((h, w));
    for hd in 0..heads {
        for q in 0..h * w {
            out[[q / w, q % w]] += maps[[hd, q, pos]];
        }
    }
    out.mapv(|v| v / heads as f64)
}

/// Numeric cross-attention loss from a recorded forward pass. Uses every
/// layer whose resolution equals `ca_res` (the highest attention resolution),
/// averaging across those layers. Terms for absent slots are skipped; at
/// least one of [P]/[B] must be present.
pub fn cross_attention_loss(
    record: &AttentionRecord,
    pos: &SlotPositions,
    mask: &Array2<f64>,
    ca_res: usize,
) -> Result<f64> {
    if pos.pose.is_none() && pos.background.is_none() {
        return Err(DecalError::Prompt(
            "cross-attention loss needs a [P] or [B] token position".into(),
        ));
    }
    let layers: Vec<&crate::diffusion::AttnLayerRecord> = record
        .layers
        .iter()
        .filter(|l| l.resolution == (ca_res, ca_res))
        .collect();
    if layers.is_empty() {
        return Err(DecalError::Shape(format!(
            "no attention layers at resolution {ca_res}"
        )));
    }
    let m = resample_mask(mask, ca_res, ca_res)?;
    let inv = m.mapv(|v| 1.0 - v);
    let mut loss = 0.0;
    if let Some(p) = pos.pose {
        let mut term = 0.0;
        for l in &layers {
            let map = max_normalize(&layer_token_map(&l.maps, p, ca_res, ca_res));
            term += alignment_l1(&map, &m);
        }
        loss += term / layers.len() as f64;
    }
    if let Some(bpos) = pos.background {
        let mut term = 0.0;
        for l in &layers {
            let map = max_normalize(&layer_token_map(&l.maps, bpos, ca_res, ca_res));
            term += alignment_l1(&map, &inv);
        }
        loss += term / layers.len() as f64;
    }
    Ok(loss)
}

/// Graph version of the cross-attention loss for one sample, built from the
/// live attention taps of a forward pass. Returns None when no term applies.
pub fn cross_attention_loss_graph(
    g: &mut Graph,
    taps: &[AttnTap],
    pose_pos: Option<usize>,
    bg_pos: Option<usize>,
    mask: &Array2<f64>,
    ca_res: usize,
) -> Result<Option<Var>> {
    if pose_pos.is_none() && bg_pos.is_none() {
        return Ok(None);
    }
    let sel: Vec<&AttnTap> = taps.iter().filter(|t| t.resolution == (ca_res, ca_res)).collect();
    if sel.is_empty() {
        return Err(DecalError::Shape(format!(
            "no attention layers at resolution {ca_res}"
        )));
    }
    let m = resample_mask(mask, ca_res, ca_res)?;
    let inv = m.mapv(|v| 1.0 - v);
    let mut terms: Vec<Var> = Vec::new();
    for (pos, target) in [(pose_pos, &m), (bg_pos, &inv)] {
        let Some(p) = pos else { continue };
        let mut layer_terms = Vec::new();
        for tap in &sel {
            // head average
            let mut avg = tap.heads[0];
            for &hv in &tap.heads[1..] {
                avg = g.add(avg, hv);
            }
            let avg = g.scale(avg, 1.0 / tap.heads.len() as f64);
            let col = g.slice_cols(avg, p, p + 1); // [HW, 1]
            let (h, w) = tap.resolution;
            let map = g.reshape(col, &[h, w]);
            let mx = g.max_all(map);
            let normed = g.div_scalar_var(map, mx);
            let t = g.constant(target.clone().into_dyn());
            let d = g.sub(normed, t);
            let a = g.abs(d);
            layer_terms.push(g.mean_all(a));
        }
        let mut sum = layer_terms[0];
        for &t in &layer_terms[1..] {
            sum = g.add(sum, t);
        }
        terms.push(g.scale(sum, 1.0 / layer_terms.len() as f64));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(Some(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::AttnLayerRecord;
    use crate::rng::stream;
    use rand::Rng;

    fn randn3(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = stream(seed, "t");
        let mut a = Array3::<f64>::zeros((c, h, w));
        for v in a.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        a
    }

    #[test]
    fn ldm_fixed_points_and_oracle() {
        let a = randn3(1, 3, 4, 4);
        assert_eq!(ldm_loss(&a, &a).unwrap(), 0.0);
        let ones = Array3::<f64>::from_elem((3, 4, 4), 1.0);
        let zeros = Array3::<f64>::zeros((3, 4, 4));
        assert_eq!(ldm_loss(&ones, &zeros).unwrap(), 1.0);
        // elementwise loop oracle
        let b = randn3(2, 3, 4, 4);
        let mut s = 0.0;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let d = a[[c, y, x]] - b[[c, y, x]];
                    s += d * d;
                }
            }
        }
        let oracle = s / 48.0;
        assert!((ldm_loss(&a, &b).unwrap() - oracle).abs() < 1e-15);
        // prior loss shares the formula
        assert_eq!(prior_loss(&a, &b).unwrap(), ldm_loss(&a, &b).unwrap());
        // shape mismatch
        let c = randn3(3, 3, 2, 2);
        assert!(ldm_loss(&a, &c).is_err());
    }

    #[test]
    fn masked_loss_conventions() {
        let a = randn3(4, 3, 4, 4);
        let b = randn3(5, 3, 4, 4);
        let ones = Array2::<f64>::from_elem((4, 4), 1.0);
        let zeros = Array2::<f64>::zeros((4, 4));
        assert!((masked_diffusion_loss(&a, &b, &ones).unwrap() - ldm_loss(&a, &b).unwrap()).abs() < 1e-15);
        assert_eq!(masked_diffusion_loss(&a, &b, &zeros).unwrap(), 0.0);
        // half mask, unit difference everywhere -> 0.5 under the plain-norm convention
        let e = Array3::<f64>::from_elem((3, 4, 4), 1.0);
        let z = Array3::<f64>::zeros((3, 4, 4));
        let mut half = Array2::<f64>::zeros((4, 4));
        for y in 0..4 {
            for x in 0..2 {
                half[[y, x]] = 1.0;
            }
        }
        assert!((masked_diffusion_loss(&e, &z, &half).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(0.5, Some(0.3), Some(2.0), 1.0, 0.01).unwrap();
        assert!((b.total - 0.82).abs() < 1e-12);
        // lambda_ca = 0 makes the total independent of l_ca
        let b1 = total_loss(0.5, Some(0.3), Some(2.0), 1.0, 0.0).unwrap();
        let b2 = total_loss(0.5, Some(0.3), Some(123.0), 1.0, 0.0).unwrap();
        assert_eq!(b1.total, b2.total);
        // absent terms count as zero
        let b3 = total_loss(0.5, None, None, 1.0, 0.01).unwrap();
        assert_eq!(b3.total, 0.5);
        assert!(total_loss(0.1, None, None, -1.0, 0.0).is_err());
    }

    fn record_from_map(map: &Array2<f64>, l: usize, pos: usize) -> AttentionRecord {
        // build a 1-layer, 2-head record whose head-averaged map at `pos`
        // equals `map` (both heads identical), other token columns uniform
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut maps = Array3::<f64>::zeros((2, h * w, l));
        for hd in 0..2 {
            for q in 0..h * w {
                for t in 0..l {
                    maps[[hd, q, t]] = if t == pos { map[[q / w, q % w]] } else { 0.01 };
                }
            }
        }
        AttentionRecord {
            layers: vec![AttnLayerRecord { layer: "test".into(), resolution: (h, w), maps }],
        }
    }

    #[test]
    fn ca_loss_perfect_and_inverted() {
        // binary mask, half foreground
        let mut mask = Array2::<f64>::zeros((8, 8));
        for y in 0..8 {
            for x in 0..4 {
                mask[[y, x]] = 1.0;
            }
        }
        let inv = mask.mapv(|v| 1.0 - v);
        let pos = SlotPositions { pose: Some(1), background: Some(2), n_tokens: 4, ..Default::default() };

        // A_P = m, A_B = 1 - m: loss 0 (max-normalization is a no-op on binary maps)
        let mut rec = record_from_map(&mask, 4, 1);
        let rec_b = record_from_map(&inv, 4, 2);
        rec.layers[0]
            .maps
            .index_axis_mut(ndarray::Axis(2), 2)
            .assign(&rec_b.layers[0].maps.index_axis(ndarray::Axis(2), 2));
        let l = cross_attention_loss(&rec, &pos, &mask, 8).unwrap();
        assert!(l.abs() < 1e-12, "perfect alignment loss {l}");

        // inverted: A_P = 1 - m, A_B = m -> 2.0
        let mut rec = record_from_map(&inv, 4, 1);
        let rec_b = record_from_map(&mask, 4, 2);
        rec.layers[0]
            .maps
            .index_axis_mut(ndarray::Axis(2), 2)
            .assign(&rec_b.layers[0].maps.index_axis(ndarray::Axis(2), 2));
        let l = cross_attention_loss(&rec, &pos, &mask, 8).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "inverted alignment loss {l}");
    }

    #[test]
    fn alignment_uniform_closed_form() {
        // uniform map c against a mask with foreground fraction rho:
        // term = rho (1 - c) + (1 - rho) c
        let (h, w) = (8, 8);
        let mut mask = Array2::<f64>::zeros((h, w));
        for y in 0..3 {
            for x in 0..8 {
                mask[[y, x]] = 1.0;
            }
        }
        let rho = 24.0 / 64.0;
        for &c in &[0.2, 0.5, 0.9] {
            let map = Array2::<f64>::from_elem((h, w), c);
            let got = alignment_l1(&map, &mask);
            let expect = rho * (1.0 - c) + (1.0 - rho) * c;
            assert!((got - expect).abs() < 1e-12, "c={c}: {got} vs {expect}");
            // complement term is symmetric
            let inv = mask.mapv(|v| 1.0 - v);
            let got2 = alignment_l1(&map, &inv);
            let expect2 = (1.0 - rho) * (1.0 - c) + rho * c;
            assert!((got2 - expect2).abs() < 1e-12);
        }
    }

    #[test]
    fn ca_loss_missing_both_positions_errors() {
        let mask = Array2::<f64>::from_elem((8, 8), 1.0);
        let rec = record_from_map(&mask, 4, 1);
        let pos = SlotPositions { n_tokens: 4, ..Default::default() };
        assert!(cross_attention_loss(&rec, &pos, &mask, 8).is_err());
    }

    #[test]
    fn resample_mask_area_threshold() {
        let mut m = Array2::<f64>::zeros((4, 4));
        // top-left 2x2 block fully on; top-right block 1/4 on
        m[[0, 0]] = 1.0;
        m[[0, 1]] = 1.0;
        m[[1, 0]] = 1.0;
        m[[1, 1]] = 1.0;
        m[[0, 2]] = 1.0;
        let r = resample_mask(&m, 2, 2).unwrap();
        assert_eq!(r[[0, 0]], 1.0);
        assert_eq!(r[[0, 1]], 0.0);
        assert_eq!(r[[1, 0]], 0.0);
        // half coverage rounds up
        let mut m2 = Array2::<f64>::zeros((4, 4));
        m2[[0, 0]] = 1.0;
        m2[[0, 1]] = 1.0;
        let r2 = resample_mask(&m2, 2, 2).unwrap();
        assert_eq!(r2[[0, 0]], 1.0);
    }

    #[test]
    fn graph_and_numeric_ca_agree() {
        use crate::params::{Binder, ParamStore};
        use crate::rng::stream;
        // run a tiny unet forward, compute CA loss both ways
        let cfg = crate::diffusion::UNetConfig {
            resolution: 8,
            channels: vec![8],
            attn_resolutions: vec![8],
            heads: 2,
            norm_groups: 4,
            d_cond: 8,
            time_dim: 8,
        };
        let unet = crate::diffusion::UNet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = stream(0, "init");
        unet.init_params(&mut store, &mut rng);
        let z = randn3(7, 3, 8, 8);
        let mut cr = stream(8, "c");
        let mut cond = Array2::<f64>::zeros((6, 8));
        for v in cond.iter_mut() {
            *v = cr.random::<f64>() - 0.5;
        }
        let mut mask = Array2::<f64>::zeros((8, 8));
        for y in 0..8 {
            for x in 0..5 {
                mask[[y, x]] = 1.0;
            }
        }

        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store);
        let zv = b.graph.constant(z.clone().into_dyn());
        let cv = b.graph.constant(cond.clone().into_dyn());
        let (_, taps) = unet.forward_graph(&mut b, zv, 10, cv);
        let lv = cross_attention_loss_graph(&mut g, &taps, Some(2), Some(4), &mask, 8)
            .unwrap()
            .unwrap();
        let graph_val = g.scalar_value(lv);

        let seq = crate::text::ConditionSequence {
            data: cond,
            positions: SlotPositions { pose: Some(2), background: Some(4), n_tokens: 6, ..Default::default() },
        };
        let (_, rec) = unet.predict_eps(&store, &z, 10, &seq, true).unwrap();
        let pos = SlotPositions { pose: Some(2), background: Some(4), n_tokens: 6, ..Default::default() };
        let num_val = cross_attention_loss(&rec.unwrap(), &pos, &mask, 8).unwrap();
        assert!((graph_val - num_val).abs() < 1e-12, "{graph_val} vs {num_val}");
    }
}
