//! Frozen image-feature extraction plus the per-attribute mapper networks
//! that turn an image into its pose / background embeddings.
//!
//! The handcrafted extractor is the default: a fixed 128-d featurization
//! (grid statistics, color histograms, mask-region moments). A small learned
//! conv extractor exists for qualitative parity; both are frozen — no
//! gradient ever reaches extractor parameters.

use crate::data::ConceptImage;
use crate::error::{DecalError, Result};
use crate::params::{init_fan_in, init_zeros, Binder, ParamStore};
use crate::tensor::{Graph, Var};
use crate::text::pseudo_row_name;
use ndarray::{Array1, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const D_FEAT: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorMode {
    Handcrafted,
    Learned,
}

impl ExtractorMode {
    pub fn id(&self) -> &'static str {
        match self {
            ExtractorMode::Handcrafted => "handcrafted-v1",
            ExtractorMode::Learned => "learned-conv-v1",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageFeature {
    pub values: Array1<f64>,
    pub extractor_id: String,
}

fn luminance(px: &Array3<f64>, y: usize, x: usize) -> f64 {
    0.299 * px[[0, y, x]] + 0.587 * px[[1, y, x]] + 0.114 * px[[2, y, x]]
}

/// Fixed deterministic featurization, d = 128.
pub fn handcrafted_features(img: &ConceptImage) -> Array1<f64> {
    let px = &img.pixels;
    let (h, w) = (px.shape()[1], px.shape()[2]);
    let mut f = Array1::<f64>::zeros(D_FEAT);
    let mut k = 0;

    // 4x4 grid RGB means
    for gy in 0..4 {
        for gx in 0..4 {
            let (y0, y1) = (gy * h / 4, (gy + 1) * h / 4);
            let (x0, x1) = (gx * w / 4, (gx + 1) * w / 4);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += px[[c, y, x]];
                    }
                }
                f[k] = s / n;
                k += 1;
            }
        }
    }

    // 4x4 grid luminance std
    for gy in 0..4 {
        for gx in 0..4 {
            let (y0, y1) = (gy * h / 4, (gy + 1) * h / 4);
            let (x0, x1) = (gx * w / 4, (gx + 1) * w / 4);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut s = 0.0;
            let mut s2 = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let l = luminance(px, y, x);
                    s += l;
                    s2 += l * l;
                }
            }
            let mean = s / n;
            f[k] = (s2 / n - mean * mean).max(0.0).sqrt();
            k += 1;
        }
    }

    // RGB histograms, 8 bins each
    for c in 0..3 {
        let mut hist = [0.0; 8];
        for y in 0..h {
            for x in 0..w {
                let bin = ((px[[c, y, x]] * 8.0) as usize).min(7);
                hist[bin] += 1.0;
            }
        }
        for b in hist {
            f[k] = b / (h * w) as f64;
            k += 1;
        }
    }

    // luminance histogram
    {
        let mut hist = [0.0; 8];
        for y in 0..h {
            for x in 0..w {
                let bin = ((luminance(px, y, x) * 8.0) as usize).min(7);
                hist[bin] += 1.0;
            }
        }
        for b in hist {
            f[k] = b / (h * w) as f64;
            k += 1;
        }
    }

    // mask-region moments (16): area, centroid, 2nd and 3rd central moments,
    // principal axis, bbox extents
    {
        let m = &img.mask;
        let mut area = 0.0f64;
        let mut cx = 0.0;
        let mut cy = 0.0;
        let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for y in 0..h {
            for x in 0..w {
                if m[[y, x]] == 1.0 {
                    let nx = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                    let ny = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                    area += 1.0;
                    cx += nx;
                    cy += ny;
                    x_min = x_min.min(nx);
                    x_max = x_max.max(nx);
                    y_min = y_min.min(ny);
                    y_max = y_max.max(ny);
                }
            }
        }
        let n = area.max(1.0);
        cx /= n;
        cy /= n;
        let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
        let (mut mxxx, mut mxxy, mut mxyy, mut myyy) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if m[[y, x]] == 1.0 {
                    let dx = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0 - cx;
                    let dy = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0 - cy;
                    mxx += dx * dx;
                    myy += dy * dy;
                    mxy += dx * dy;
                    mxxx += dx * dx * dx;
                    mxxy += dx * dx * dy;
                    mxyy += dx * dy * dy;
                    myyy += dy * dy * dy;
                }
            }
        }
        mxx /= n;
        myy /= n;
        mxy /= n;
        mxxx /= n;
        mxxy /= n;
        mxyy /= n;
        myyy /= n;
        let theta = 0.5 * (2.0 * mxy).atan2(mxx - myy);
        let vals = [
            area / (h * w) as f64,
            cx,
            cy,
            mxx,
            myy,
            mxy,
            theta.sin(),
            theta.cos(),
            mxxx,
            mxxy,
            mxyy,
            myyy,
            if area > 0.0 { x_max - x_min } else { 0.0 },
            if area > 0.0 { y_max - y_min } else { 0.0 },
            mxx.max(0.0).sqrt(),
            myy.max(0.0).sqrt(),
        ];
        for v in vals {
            f[k] = v;
            k += 1;
        }
    }

    // 3x3 grid mean gradient magnitude
    for gy in 0..3 {
        for gx in 0..3 {
            let (y0, y1) = (1 + gy * (h - 2) / 3, 1 + (gy + 1) * (h - 2) / 3);
            let (x0, x1) = (1 + gx * (w - 2) / 3, 1 + (gx + 1) * (w - 2) / 3);
            let mut s = 0.0;
            let mut n = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let gxv = luminance(px, y, x + 1) - luminance(px, y, x - 1);
                    let gyv = luminance(px, y + 1, x) - luminance(px, y - 1, x);
                    s += (gxv * gxv + gyv * gyv).sqrt();
                    n += 1.0;
                }
            }
            f[k] = if n > 0.0 { s / n } else { 0.0 };
            k += 1;
        }
    }

    // global luminance stats, mask border fraction, masked-region color
    {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let l = luminance(px, y, x);
                s += l;
                s2 += l * l;
            }
        }
        let n = (h * w) as f64;
        let mean = s / n;
        f[k] = mean;
        f[k + 1] = (s2 / n - mean * mean).max(0.0).sqrt();
        let mut border = 0.0;
        let mut perim = 0.0;
        for y in 0..h {
            for x in [0, w - 1] {
                perim += 1.0;
                border += img.mask[[y, x]];
            }
        }
        for x in 0..w {
            for y in [0, h - 1] {
                perim += 1.0;
                border += img.mask[[y, x]];
            }
        }
        f[k + 2] = border / perim;
        k += 3;

        let mut fg = [0.0; 3];
        let mut fgn = 0.0f64;
        let mut fg_lum2 = 0.0;
        let mut fg_lum = 0.0;
        for y in 0..h {
            for x in 0..w {
                if img.mask[[y, x]] == 1.0 {
                    for c in 0..3 {
                        fg[c] += px[[c, y, x]];
                    }
                    let l = luminance(px, y, x);
                    fg_lum += l;
                    fg_lum2 += l * l;
                    fgn += 1.0;
                }
            }
        }
        let d = fgn.max(1.0);
        f[k] = fg[0] / d;
        f[k + 1] = fg[1] / d;
        f[k + 2] = fg[2] / d;
        let flm = fg_lum / d;
        f[k + 3] = (fg_lum2 / d - flm * flm).max(0.0).sqrt();
        k += 4;
    }

    debug_assert_eq!(k, D_FEAT);
    f
}

// learned extractor parameter names
pub const EXTRACTOR_PARAMS: &[&str] = &[
    "extractor.conv1.w",
    "extractor.conv1.b",
    "extractor.conv2.w",
    "extractor.conv2.b",
    "extractor.fc.w",
    "extractor.fc.b",
];

pub fn init_learned_extractor(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    store.insert("extractor.conv1.w", init_fan_in(rng, &[16, 3, 3, 3]));
    store.insert("extractor.conv1.b", init_zeros(&[16]));
    store.insert("extractor.conv2.w", init_fan_in(rng, &[32, 16, 3, 3]));
    store.insert("extractor.conv2.b", init_zeros(&[32]));
    store.insert("extractor.fc.w", init_fan_in(rng, &[32, D_FEAT]));
    store.insert("extractor.fc.b", init_zeros(&[D_FEAT]));
}

/// Learned extractor forward (graph form so it can be pretrained; frozen
/// afterwards by simply never putting its parameters in a trainable set).
pub fn learned_features_graph(b: &mut Binder, pixels: Var) -> Var {
    let w1 = b.bind("extractor.conv1.w");
    let h = b.graph.conv2d(pixels, w1, 2, 1);
    let b1 = b.bind("extractor.conv1.b");
    let h = b.graph.add_chan_bias(h, b1);
    let h = b.graph.silu(h);
    let w2 = b.bind("extractor.conv2.w");
    let h = b.graph.conv2d(h, w2, 2, 1);
    let b2 = b.bind("extractor.conv2.b");
    let h = b.graph.add_chan_bias(h, b2);
    let h = b.graph.silu(h);
    // global average pool
    let shape = b.graph.value(h).shape().to_vec();
    let (c, sp) = (shape[0], shape[1] * shape[2]);
    let flat = b.graph.reshape(h, &[c, sp]);
    let t = b.graph.transpose2(flat); // [sp, c]
    let ones = b.graph.constant(ndarray::Array2::from_elem((1, sp), 1.0 / sp as f64).into_dyn());
    let pooled = b.graph.matmul(ones, t); // [1, c]
    let wf = b.bind("extractor.fc.w");
    let out = b.graph.matmul(pooled, wf);
    let bf = b.bind("extractor.fc.b");
    b.graph.add_row_bias(out, bf) // [1, D_FEAT]
}

/// Extract features for one image. Frozen in both modes.
pub fn extract_features(img: &ConceptImage, mode: ExtractorMode, store: &ParamStore) -> Result<ImageFeature> {
    match mode {
        ExtractorMode::Handcrafted => Ok(ImageFeature {
            values: handcrafted_features(img),
            extractor_id: mode.id().to_string(),
        }),
        ExtractorMode::Learned => {
            if !store.contains("extractor.conv1.w") {
                return Err(DecalError::MissingArtifact(
                    "learned extractor weights not present in checkpoint".into(),
                ));
            }
            let mut g = Graph::new();
            let mut b = Binder::new(&mut g, store);
            let px = b.graph.constant(img.pixels.clone().into_dyn());
            let out = learned_features_graph(&mut b, px);
            let values = g
                .value(out)
                .view()
                .into_shape_with_order(D_FEAT)
                .unwrap()
                .to_owned();
            Ok(ImageFeature { values, extractor_id: mode.id().to_string() })
        }
    }
}

// ---------------------------------------------------------------------------
// attribute mappers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attribute {
    Pose,
    Background,
}

impl Attribute {
    pub fn prefix(&self) -> &'static str {
        match self {
            Attribute::Pose => "mapper.pose",
            Attribute::Background => "mapper.bg",
        }
    }
}

/// 3-layer MLP projecting frozen image features into text-embedding space.
/// One mapper per attribute, shared across all images of the concept.
#[derive(Debug, Clone)]
pub struct AttributeMapper {
    pub attribute: Attribute,
    pub d_feat: usize,
    pub hidden: usize,
    pub d_text: usize,
}

impl AttributeMapper {
    pub fn new(attribute: Attribute, d_feat: usize, hidden: usize, d_text: usize) -> Self {
        AttributeMapper { attribute, d_feat, hidden, d_text }
    }

    pub fn param_names(&self) -> Vec<String> {
        let p = self.attribute.prefix();
        vec![
            format!("{p}.l1.w"),
            format!("{p}.l1.b"),
            format!("{p}.l2.w"),
            format!("{p}.l2.b"),
            format!("{p}.l3.w"),
            format!("{p}.l3.b"),
        ]
    }

    /// Hidden layers random, output layer zero: an untrained mapper emits the
    /// zero vector, so the embedding slots start neutral and grow with training.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let p = self.attribute.prefix();
        store.insert(&format!("{p}.l1.w"), init_fan_in(rng, &[self.d_feat, self.hidden]));
        store.insert(&format!("{p}.l1.b"), init_zeros(&[self.hidden]));
        store.insert(&format!("{p}.l2.w"), init_fan_in(rng, &[self.hidden, self.hidden]));
        store.insert(&format!("{p}.l2.b"), init_zeros(&[self.hidden]));
        store.insert(&format!("{p}.l3.w"), init_zeros(&[self.hidden, self.d_text]));
        store.insert(&format!("{p}.l3.b"), init_zeros(&[self.d_text]));
    }

    /// Graph forward from a [1, d_feat] feature row to a [d_text] vector.
    pub fn forward_graph(&self, b: &mut Binder, feat: Var) -> Var {
        let p = self.attribute.prefix();
        let w1 = b.bind(&format!("{p}.l1.w"));
        let b1 = b.bind(&format!("{p}.l1.b"));
        let h = b.graph.matmul(feat, w1);
        let h = b.graph.add_row_bias(h, b1);
        let h = b.graph.silu(h);
        let w2 = b.bind(&format!("{p}.l2.w"));
        let b2 = b.bind(&format!("{p}.l2.b"));
        let h = b.graph.matmul(h, w2);
        let h = b.graph.add_row_bias(h, b2);
        let h = b.graph.silu(h);
        let w3 = b.bind(&format!("{p}.l3.w"));
        let b3 = b.bind(&format!("{p}.l3.b"));
        let h = b.graph.matmul(h, w3);
        let h = b.graph.add_row_bias(h, b3);
        b.graph.reshape(h, &[self.d_text])
    }

    /// Numeric map of one feature vector.
    pub fn map(&self, store: &ParamStore, feat: &ImageFeature) -> Result<Array1<f64>> {
        if feat.values.len() != self.d_feat {
            return Err(DecalError::Shape(format!(
                "feature dim {} vs mapper d_feat {}",
                feat.values.len(),
                self.d_feat
            )));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, store);
        let fv = b
            .graph
            .constant(feat.values.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let out = self.forward_graph(&mut b, fv);
        Ok(g.value(out).view().into_shape_with_order(self.d_text).unwrap().to_owned())
    }
}

/// Mapper-path or free-embedding-path production of (v^p_i, v^b_i).
pub struct EmbeddingSetup {
    pub mappers_on: bool,
    pub extractor: ExtractorMode,
    pub pose: AttributeMapper,
    pub bg: AttributeMapper,
}

pub fn embeddings_for_image(
    setup: &EmbeddingSetup,
    store: &ParamStore,
    img: &ConceptImage,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if setup.mappers_on {
        let feat = extract_features(img, setup.extractor, store)?;
        let vp = setup.pose.map(store, &feat)?;
        let vb = setup.bg.map(store, &feat)?;
        Ok((vp, vb))
    } else {
        let i = img.image_index;
        let vp = store.get(&pseudo_row_name(&format!("[P_{i}]")))?;
        let vb = store.get(&pseudo_row_name(&format!("[B_{i}]")))?;
        Ok((
            vp.view().into_shape_with_order(vp.len()).unwrap().to_owned(),
            vb.view().into_shape_with_order(vb.len()).unwrap().to_owned(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::*;
    use crate::rng::stream;
    use rand::Rng;

    fn sample_image(seed: u64) -> ConceptImage {
        let mut rng = stream(seed, "subject");
        let spec = SubjectSpec::sample("s", "dog", &mut rng).unwrap();
        generate_concept_set(&spec, 1, seed, 32).unwrap().images.remove(0)
    }

    #[test]
    fn features_deterministic_and_background_sensitive() {
        let img = sample_image(1);
        let store = ParamStore::new();
        let a = extract_features(&img, ExtractorMode::Handcrafted, &store).unwrap();
        let b = extract_features(&img, ExtractorMode::Handcrafted, &store).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().all(|v| v.is_finite()));

        // same subject and pose, different background -> features differ
        let mut rng = stream(2, "subject");
        let spec = SubjectSpec::sample("s", "cat", &mut rng).unwrap();
        let pose = PoseParams::identity();
        let bg1 = BackgroundParams::sample(BackgroundClass::Solid, &mut stream(3, "b"));
        let bg2 = BackgroundParams::sample(BackgroundClass::Checker, &mut stream(4, "b"));
        let i1 = render_image(&spec, &pose, &bg1, 32).unwrap();
        let i2 = render_image(&spec, &pose, &bg2, 32).unwrap();
        let f1 = extract_features(&i1, ExtractorMode::Handcrafted, &store).unwrap();
        let f2 = extract_features(&i2, ExtractorMode::Handcrafted, &store).unwrap();
        assert_ne!(f1.values, f2.values);
    }

    #[test]
    fn constant_image_feature_shape() {
        let mut img = sample_image(5);
        img.pixels.fill(0.4);
        img.mask.fill(1.0);
        let store = ParamStore::new();
        let f = extract_features(&img, ExtractorMode::Handcrafted, &store).unwrap();
        // grid luminance stds are numerically zero
        for k in 48..64 {
            assert!(f.values[k].abs() < 1e-7, "grid std at {k}: {}", f.values[k]);
        }
        // each RGB histogram has all mass in one bin
        for c in 0..3 {
            let hist = &f.values.as_slice().unwrap()[64 + 8 * c..64 + 8 * (c + 1)];
            let nonzero: Vec<usize> = hist.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
            assert_eq!(nonzero.len(), 1);
            assert!((hist[nonzero[0]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_mapper_emits_zero_and_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let m = AttributeMapper::new(Attribute::Pose, D_FEAT, 32, 8);
        let mut rng = stream(6, "init");
        m.init_params(&mut store, &mut rng);
        let img = sample_image(7);
        let f = extract_features(&img, ExtractorMode::Handcrafted, &store).unwrap();
        let out = m.map(&store, &f).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // all-zero weights also give zero
        for n in m.param_names() {
            store.get_mut(&n).unwrap().fill(0.0);
        }
        let out = m.map(&store, &f).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn independent_weights_give_different_vectors() {
        let mut store = ParamStore::new();
        let pose = AttributeMapper::new(Attribute::Pose, D_FEAT, 32, 8);
        let bg = AttributeMapper::new(Attribute::Background, D_FEAT, 32, 8);
        let mut r1 = stream(8, "init-pose");
        let mut r2 = stream(9, "init-bg");
        pose.init_params(&mut store, &mut r1);
        bg.init_params(&mut store, &mut r2);
        // randomize output layers so outputs are informative
        for prefix in ["mapper.pose", "mapper.bg"] {
            let mut rr = stream(prefix.len() as u64, "l3");
            let w = store.get_mut(&format!("{prefix}.l3.w")).unwrap();
            for v in w.iter_mut() {
                *v = rr.random::<f64>() - 0.5;
            }
        }
        let img = sample_image(10);
        let f = extract_features(&img, ExtractorMode::Handcrafted, &store).unwrap();
        let vp = pose.map(&store, &f).unwrap();
        let vb = bg.map(&store, &f).unwrap();
        assert_ne!(vp, vb);
    }

    #[test]
    fn mapper_gradcheck_all_weights() {
        // small mapper; check every weight against central differences
        let mut store = ParamStore::new();
        let m = AttributeMapper::new(Attribute::Background, 6, 5, 4);
        let mut rng = stream(11, "init");
        m.init_params(&mut store, &mut rng);
        // randomize everything incl. output layer
        for n in m.param_names() {
            let p = store.get_mut(&n).unwrap();
            for v in p.iter_mut() {
                *v += rng.random::<f64>() - 0.5;
            }
        }
        let feat = Array1::from_vec((0..6).map(|i| 0.3 * i as f64 - 0.7).collect());
        let target = Array1::from_vec(vec![0.2, -0.4, 0.1, 0.9]);

        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new();
            let mut b = Binder::new(&mut g, store);
            let fv = b.graph.constant(feat.clone().insert_axis(ndarray::Axis(0)).into_dyn());
            let out = m.forward_graph(&mut b, fv);
            let tv = b.graph.constant(target.clone().into_dyn());
            let l = b.graph.mse(out, tv);
            g.scalar_value(l)
        };

        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &store);
        let fv = b.graph.constant(feat.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let out = m.forward_graph(&mut b, fv);
        let tv = b.graph.constant(target.clone().into_dyn());
        let l = b.graph.mse(out, tv);
        let bound = b.into_bound();
        let mut grads = g.backward(l);
        let named = crate::params::collect_named_grads(&bound, &mut grads);

        let h = 1e-5;
        for name in m.param_names() {
            let ga = named.get(&name).unwrap().clone();
            let pv = store.get(&name).unwrap().clone();
            for idx in 0..pv.len() {
                let orig = pv.as_slice().unwrap()[idx];
                store.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig + h;
                let lp = loss_of(&store);
                store.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig - h;
                let lm = loss_of(&store);
                store.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = ga.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err <= 1e-3, "{name}[{idx}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn distinct_pairs_over_concept_set_with_randomized_mapper() {
        let mut store = ParamStore::new();
        let pose = AttributeMapper::new(Attribute::Pose, D_FEAT, 32, 8);
        let bg = AttributeMapper::new(Attribute::Background, D_FEAT, 32, 8);
        let mut rng = stream(12, "init");
        pose.init_params(&mut store, &mut rng);
        bg.init_params(&mut store, &mut rng);
        for prefix in ["mapper.pose", "mapper.bg"] {
            let w = store.get_mut(&format!("{prefix}.l3.w")).unwrap();
            for v in w.iter_mut() {
                *v = rng.random::<f64>() - 0.5;
            }
        }
        let mut sr = stream(13, "subject");
        let spec = SubjectSpec::sample("s", "duck", &mut sr).unwrap();
        let set = generate_concept_set(&spec, 4, 14, 32).unwrap();
        let setup = EmbeddingSetup { mappers_on: true, extractor: ExtractorMode::Handcrafted, pose, bg };
        let mut embs = Vec::new();
        for img in &set.images {
            let (vp, vb) = embeddings_for_image(&setup, &store, img).unwrap();
            // reproducible
            let (vp2, vb2) = embeddings_for_image(&setup, &store, img).unwrap();
            assert_eq!(vp, vp2);
            assert_eq!(vb, vb2);
            embs.push((vp, vb));
        }
        for i in 0..4 {
            for j in 0..i {
                let dp: f64 = (&embs[i].0 - &embs[j].0).iter().map(|v| v * v).sum();
                let db: f64 = (&embs[i].1 - &embs[j].1).iter().map(|v| v * v).sum();
                assert!(dp > 0.0 && db > 0.0, "pair ({i},{j}) not distinct");
            }
        }
    }

    #[test]
    fn free_embedding_ablation_reads_table_rows() {
        let mut store = ParamStore::new();
        store.insert(&pseudo_row_name("[P_0]"), Array1::from_vec(vec![1.0, 2.0]).into_dyn());
        store.insert(&pseudo_row_name("[B_0]"), Array1::from_vec(vec![3.0, 4.0]).into_dyn());
        let setup = EmbeddingSetup {
            mappers_on: false,
            extractor: ExtractorMode::Handcrafted,
            pose: AttributeMapper::new(Attribute::Pose, D_FEAT, 8, 2),
            bg: AttributeMapper::new(Attribute::Background, D_FEAT, 8, 2),
        };
        let img = sample_image(15);
        let (vp, vb) = embeddings_for_image(&setup, &store, &img).unwrap();
        assert_eq!(vp.as_slice().unwrap(), &[1.0, 2.0]);
        assert_eq!(vb.as_slice().unwrap(), &[3.0, 4.0]);
    }
}
