//! Training objective: partial cross-entropy on pseudo-pixels, a pairwise
//! CRF regularizer, and classifier alignment of the masked image.
//!
//! Every term returns its value together with the gradient with respect to
//! the foreground map `M1`, treating the background map as `1 - M1`.

use serde::{Deserialize, Serialize};

use crate::backbone::Classifier;
use crate::error::{invalid_input, invalid_param, DipsError, Result};
use crate::image::{Map, RgbImage};
use crate::model::LocalizationMap;
use crate::sampler::{Label, PseudoLabelMap};

pub const PROBABILITY_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_cpa: f64,
    pub lambda_crf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_cpa: 1.0,
            lambda_crf: 2e-9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_cpa", self.lambda_cpa)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid_param(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.lambda_crf >= 0.0) || !self.lambda_crf.is_finite() {
            return Err(invalid_param("lambda_crf must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityParams {
    /// Spatial bandwidth in pixels.
    pub sigma_xy: f64,
    /// Color bandwidth in [0, 1] color units.
    pub sigma_rgb: f64,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            sigma_xy: 15.0,
            sigma_rgb: 0.1,
        }
    }
}

impl AffinityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_xy > 0.0 && self.sigma_rgb > 0.0) {
            return Err(invalid_param("affinity bandwidths must be positive"));
        }
        Ok(())
    }
}

/// How the pairwise term is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfConfig {
    pub affinity: AffinityParams,
    /// Images with at most this many pixels use the exact dense sum.
    pub dense_max_pixels: usize,
    /// Block size of the pooled approximation used above the cutoff.
    pub downsample: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            affinity: AffinityParams::default(),
            dense_max_pixels: 64 * 64,
            downsample: 4,
        }
    }
}

/// A loss value with its gradient w.r.t. the foreground map.
#[derive(Clone, Debug, PartialEq)]
pub struct TermGrad {
    pub value: f64,
    pub grad_fg: Map,
}

/// Mean of `-log M_label(r)` over labeled pixels; ignored pixels contribute
/// nothing.
pub fn partial_cross_entropy(map: &LocalizationMap, labels: &PseudoLabelMap) -> Result<TermGrad> {
    if map.width() != labels.width() || map.height() != labels.height() {
        return Err(invalid_input("label map and prediction differ in shape"));
    }
    let n = labels.labeled_count();
    if n == 0 {
        return Err(DipsError::UndefinedLoss("no labeled pixels".into()));
    }
    let mut grad = Map::filled(map.width(), map.height(), 0.0);
    let mut total = 0.0;
    for (i, label) in labels.labels.data().iter().enumerate() {
        let (p, sign) = match label {
            Label::Foreground => (map.fg.data()[i], -1.0),
            Label::Background => (map.bg.data()[i], 1.0),
            Label::Ignore => continue,
        };
        total -= p.max(PROBABILITY_CLAMP).ln();
        if p > PROBABILITY_CLAMP {
            // d(-ln M1)/dM1 = -1/M1 ; d(-ln(1 - M1))/dM1 = 1/M2
            grad.data_mut()[i] = sign / (p * n as f64);
        }
    }
    Ok(TermGrad {
        value: total / n as f64,
        grad_fg: grad,
    })
}

fn check_crf_inputs(image: &RgbImage, map: &LocalizationMap, params: &AffinityParams) -> Result<()> {
    params.validate()?;
    if image.width() != map.width() || image.height() != map.height() {
        return Err(invalid_input("image and map differ in shape"));
    }
    Ok(())
}

/// `Σ_i M_iᵀ A (1 - M_i)` over both channels with the Gaussian affinity
/// `exp(-|Δpos|²/2σ_xy² - |Δrgb|²/2σ_rgb²)` and a zero diagonal. Uses the
/// exact pairwise sum up to `cfg.dense_max_pixels`, block pooling above.
pub fn crf_loss(image: &RgbImage, map: &LocalizationMap, cfg: &CrfConfig) -> Result<TermGrad> {
    check_crf_inputs(image, map, &cfg.affinity)?;
    if image.width() * image.height() <= cfg.dense_max_pixels || cfg.downsample <= 1 {
        crf_loss_dense(image, map, &cfg.affinity)
    } else {
        crf_loss_pooled(image, map, &cfg.affinity, cfg.downsample)
    }
}

/// Exact pairwise CRF term. With `d_p = Σ_q A_pq` the per-channel value is
/// `Σ_p M(p)(d_p - (AM)_p)` and its gradient `d_p - 2(AM)_p`.
pub fn crf_loss_dense(image: &RgbImage, map: &LocalizationMap, params: &AffinityParams) -> Result<TermGrad> {
    check_crf_inputs(image, map, params)?;
    let w = image.width();
    let nodes: Vec<Node> = (0..w * image.height())
        .map(|i| pixel_node(image, map, i % w, i / w, i))
        .collect();
    let (value, grads) = pairwise(&nodes, params);
    Ok(TermGrad {
        value,
        grad_fg: Map::from_vec(image.width(), image.height(), grads)?,
    })
}

struct Node {
    pos: [f64; 2],
    rgb: [f64; 3],
    fg: f64,
    bg: f64,
    /// Number of pixels the node stands for.
    weight: f64,
    /// Pairs of nodes sharing a group are skipped.
    group: usize,
}

/// Weighted pairwise sum over nodes of distinct groups; returns the value and the
/// gradient w.r.t. each node's foreground (background moving opposite).
fn pairwise(nodes: &[Node], params: &AffinityParams) -> (f64, Vec<f64>) {
    let n = nodes.len();
    let inv_xy = 1.0 / (2.0 * params.sigma_xy * params.sigma_xy);
    let inv_rgb = 1.0 / (2.0 * params.sigma_rgb * params.sigma_rgb);
    let mut degree = vec![0.0; n];
    let mut a_fg = vec![0.0; n];
    let mut a_bg = vec![0.0; n];
    for p in 0..n {
        let np = &nodes[p];
        for q in p + 1..n {
            let nq = &nodes[q];
            if np.group == nq.group {
                continue;
            }
            let dx = np.pos[0] - nq.pos[0];
            let dy = np.pos[1] - nq.pos[1];
            let dr = np.rgb[0] - nq.rgb[0];
            let dg = np.rgb[1] - nq.rgb[1];
            let db = np.rgb[2] - nq.rgb[2];
            let a = (-(dx * dx + dy * dy) * inv_xy - (dr * dr + dg * dg + db * db) * inv_rgb).exp();
            let a_pq = a * np.weight * nq.weight;
            degree[p] += a_pq;
            degree[q] += a_pq;
            a_fg[p] += a_pq * nq.fg;
            a_fg[q] += a_pq * np.fg;
            a_bg[p] += a_pq * nq.bg;
            a_bg[q] += a_pq * np.bg;
        }
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(n);
    for p in 0..n {
        let node = &nodes[p];
        value += node.fg * (degree[p] - a_fg[p]) + node.bg * (degree[p] - a_bg[p]);
        let g_fg = degree[p] - 2.0 * a_fg[p];
        let g_bg = degree[p] - 2.0 * a_bg[p];
        grads.push(g_fg - g_bg);
    }
    (value, grads)
}

fn pixel_node(image: &RgbImage, map: &LocalizationMap, x: usize, y: usize, group: usize) -> Node {
    Node {
        pos: [x as f64, y as f64],
        rgb: image.pixel(x, y),
        fg: *map.fg.get(x, y),
        bg: *map.bg.get(x, y),
        weight: 1.0,
        group,
    }
}

/// Block approximation: pairs inside a `factor`×`factor` block are summed
/// exactly. For pairs across blocks each block is split into at most four
/// color-coherent groups, and each group is replaced by its centroid, mean
/// color and mean map values, weighted by its pixel count.
pub fn crf_loss_pooled(
    image: &RgbImage,
    map: &LocalizationMap,
    params: &AffinityParams,
    factor: usize,
) -> Result<TermGrad> {
    check_crf_inputs(image, map, params)?;
    if factor == 0 {
        return Err(invalid_param("downsample factor must be positive"));
    }
    let (w, h) = (image.width(), image.height());
    let (bw, bh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut grad = Map::filled(w, h, 0.0);
    let mut value = 0.0;
    let mut pooled = Vec::new();
    // pixel indices each pooled node stands for
    let mut members: Vec<Vec<usize>> = Vec::new();
    for by in 0..bh {
        for bx in 0..bw {
            let block = by * bw + bx;
            let (x0, y0) = (bx * factor, by * factor);
            let (x1, y1) = ((x0 + factor).min(w), (y0 + factor).min(h));
            let pixels: Vec<Node> = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .enumerate()
                .map(|(k, (x, y))| pixel_node(image, map, x, y, k))
                .collect();
            let (intra, intra_grads) = pairwise(&pixels, params);
            value += intra;
            for (node, g) in pixels.iter().zip(intra_grads) {
                grad.set(node.pos[0] as usize, node.pos[1] as usize, g);
            }
            for part in split_by_color(pixels.iter().collect(), params.sigma_rgb, 2) {
                let count = part.len() as f64;
                let mean = |f: &dyn Fn(&Node) -> f64| part.iter().map(|n| f(n)).sum::<f64>() / count;
                pooled.push(Node {
                    pos: [mean(&|n| n.pos[0]), mean(&|n| n.pos[1])],
                    rgb: [mean(&|n| n.rgb[0]), mean(&|n| n.rgb[1]), mean(&|n| n.rgb[2])],
                    fg: mean(&|n| n.fg),
                    bg: mean(&|n| n.bg),
                    weight: count,
                    group: block,
                });
                members.push(part.iter().map(|n| n.pos[1] as usize * w + n.pos[0] as usize).collect());
            }
        }
    }
    let (inter, inter_grads) = pairwise(&pooled, params);
    value += inter;
    for ((node, g), idx) in pooled.iter().zip(inter_grads).zip(&members) {
        for &i in idx {
            grad.data_mut()[i] += g / node.weight;
        }
    }
    Ok(TermGrad { value, grad_fg: grad })
}

/// Recursively halves a pixel set along its widest color channel while that
/// channel spans more than `tolerance`.
fn split_by_color(nodes: Vec<&Node>, tolerance: f64, depth: usize) -> Vec<Vec<&Node>> {
    if depth == 0 || nodes.len() < 2 {
        return vec![nodes];
    }
    let (mut best_c, mut best_lo, mut best_range) = (0, 0.0, 0.0);
    for c in 0..3 {
        let lo = nodes.iter().map(|n| n.rgb[c]).fold(f64::INFINITY, f64::min);
        let hi = nodes.iter().map(|n| n.rgb[c]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > best_range {
            (best_c, best_lo, best_range) = (c, lo, hi - lo);
        }
    }
    if best_range <= tolerance {
        return vec![nodes];
    }
    let cut = best_lo + best_range / 2.0;
    let (low, high): (Vec<&Node>, Vec<&Node>) = nodes.into_iter().partition(|n| n.rgb[best_c] < cut);
    let mut out = split_by_color(low, tolerance, depth - 1);
    out.extend(split_by_color(high, tolerance, depth - 1));
    out
}

/// Cross-entropy of the frozen classifier on `x ⊙ M1`; the gradient flows
/// into `M1` only.
pub fn classifier_alignment_loss(
    image: &RgbImage,
    fg: &Map,
    class_index: usize,
    classifier: &dyn Classifier,
) -> Result<TermGrad> {
    if image.width() != fg.width() || image.height() != fg.height() {
        return Err(invalid_input("image and map differ in shape"));
    }
    let masked = image.masked(fg);
    let (value, grad_img) = classifier.cross_entropy_with_input_grad(&masked, class_index)?;
    let mut grad = Map::filled(fg.width(), fg.height(), 0.0);
    for (i, (g, x)) in grad_img
        .data()
        .chunks_exact(3)
        .zip(image.data().chunks_exact(3))
        .enumerate()
    {
        grad.data_mut()[i] = g[0] * x[0] + g[1] * x[1] + g[2] * x[2];
    }
    Ok(TermGrad { value, grad_fg: grad })
}

/// Per-term values of one objective evaluation. Disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: Option<f64>,
    pub cpa: Option<f64>,
    pub crf: Option<f64>,
}

/// `λ_cls·L_cls + λ_cpa·L_cpa + λ_crf·L_crf`. Any non-finite term aborts
/// with that term's name.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (name, value, weight) in [
        ("cls", terms.cls, w.lambda_cls),
        ("cpa", terms.cpa, w.lambda_cpa),
        ("crf", terms.crf, w.lambda_crf),
    ] {
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(DipsError::NonFiniteLoss { term: name, value: v });
            }
            total += weight * v;
        }
    }
    Ok(total)
}

/// Everything one training sample needs to evaluate the objective.
pub struct LossInputs<'a> {
    pub image: &'a RgbImage,
    pub labels: &'a PseudoLabelMap,
    pub class_index: usize,
    pub classifier: &'a dyn Classifier,
}

/// Evaluates every term with a positive weight and returns the report with
/// the weighted gradient w.r.t. the foreground map.
pub fn objective(
    map: &LocalizationMap,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    crf: &CrfConfig,
) -> Result<(LossTerms, f64, Map)> {
    weights.validate()?;
    let mut terms = LossTerms::default();
    let mut grad = Map::filled(map.width(), map.height(), 0.0);
    let mut accumulate = |t: &TermGrad, lambda: f64| {
        for (g, v) in grad.data_mut().iter_mut().zip(t.grad_fg.data()) {
            *g += lambda * v;
        }
    };
    if weights.lambda_cpa > 0.0 {
        let t = partial_cross_entropy(map, inputs.labels)?;
        terms.cpa = Some(t.value);
        accumulate(&t, weights.lambda_cpa);
    }
    if weights.lambda_crf > 0.0 {
        let t = crf_loss(inputs.image, map, crf)?;
        terms.crf = Some(t.value);
        accumulate(&t, weights.lambda_crf);
    }
    if weights.lambda_cls > 0.0 {
        let t = classifier_alignment_loss(inputs.image, &map.fg, inputs.class_index, inputs.classifier)?;
        terms.cls = Some(t.value);
        accumulate(&t, weights.lambda_cls);
    }
    let total = total_loss(&terms, weights)?;
    Ok((terms, total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{SyntheticClassifier, SyntheticClassifierConfig};
    use crate::image::Grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels_from(w: usize, h: usize, fg: &[usize], bg: &[usize]) -> PseudoLabelMap {
        let mut labels = Grid::filled(w, h, Label::Ignore);
        for &i in fg {
            labels.data_mut()[i] = Label::Foreground;
        }
        for &i in bg {
            labels.data_mut()[i] = Label::Background;
        }
        PseudoLabelMap {
            labels,
            fg_pixels: fg.to_vec(),
            bg_pixels: bg.to_vec(),
            clipped: false,
            uniform_fallback: false,
        }
    }

    fn random_map(w: usize, h: usize, rng: &mut ChaCha8Rng) -> LocalizationMap {
        LocalizationMap::from_foreground(Map::from_fn(w, h, |_, _| rng.random_range(0.05..0.95))).unwrap()
    }

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        RgbImage::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Central differences of `f` w.r.t. each foreground value (background
    /// kept at `1 - fg`), compared to `grad` at relative tolerance `tol`.
    fn check_gradient(fg: &Map, grad: &Map, tol: f64, f: impl Fn(&LocalizationMap) -> f64) {
        let h = 1e-5;
        let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..fg.len() {
            let mut plus = fg.clone();
            plus.data_mut()[i] += h;
            let mut minus = fg.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&LocalizationMap::from_foreground(plus).unwrap())
                - f(&LocalizationMap::from_foreground(minus).unwrap()))
                / (2.0 * h);
            let an = grad.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-3 * scale).max(1e-12);
            assert!(
                (an - fd).abs() / denom <= tol,
                "pixel {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn cpa_perfect_prediction() {
        let fg = Map::from_fn(3, 3, |x, _| if x == 0 { 1.0 } else { 0.0 });
        let map = LocalizationMap::from_foreground(fg).unwrap();
        let labels = labels_from(3, 3, &[0, 3, 6], &[2, 5]);
        assert!(partial_cross_entropy(&map, &labels).unwrap().value <= 1e-6);
    }

    #[test]
    fn cpa_uniform_is_ln2() {
        let map = LocalizationMap::from_foreground(Map::filled(4, 4, 0.5)).unwrap();
        let labels = labels_from(4, 4, &[0, 1, 9], &[4, 15]);
        let v = partial_cross_entropy(&map, &labels).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cpa_hand_example() {
        let fg = Map::from_vec(3, 1, vec![0.9, 0.2, 0.3]).unwrap();
        let map = LocalizationMap::from_foreground(fg).unwrap();
        let labels = labels_from(3, 1, &[0, 1], &[2]);
        let v = partial_cross_entropy(&map, &labels).unwrap().value;
        let expect = -(0.9f64.ln() + 0.2f64.ln() + 0.7f64.ln()) / 3.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn cpa_clamps_zero_probability() {
        let map = LocalizationMap::from_foreground(Map::filled(2, 1, 0.0)).unwrap();
        let t = partial_cross_entropy(&map, &labels_from(2, 1, &[0], &[])).unwrap();
        assert!((t.value + PROBABILITY_CLAMP.ln()).abs() < 1e-9);
        assert_eq!(t.grad_fg.data()[0], 0.0);
    }

    #[test]
    fn cpa_without_labels_is_undefined() {
        let map = LocalizationMap::from_foreground(Map::filled(2, 2, 0.5)).unwrap();
        assert!(matches!(
            partial_cross_entropy(&map, &labels_from(2, 2, &[], &[])),
            Err(DipsError::UndefinedLoss(_))
        ));
    }

    #[test]
    fn cpa_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(16, 16, &mut rng);
            let idx = rand::seq::index::sample(&mut rng, 256, 40).into_vec();
            let labels = labels_from(16, 16, &idx[..20], &idx[20..]);
            let t = partial_cross_entropy(&map, &labels).unwrap();
            check_gradient(&map.fg, &t.grad_fg, 1e-3, |m| {
                partial_cross_entropy(m, &labels).unwrap().value
            });
        }
    }

    /// Direct double loop over ordered pixel pairs.
    fn crf_oracle(image: &RgbImage, map: &LocalizationMap, params: &AffinityParams) -> f64 {
        let (w, h) = (image.width(), image.height());
        let mut total = 0.0;
        for p in 0..w * h {
            for q in 0..w * h {
                if p == q {
                    continue;
                }
                let (px, py, qx, qy) = ((p % w) as f64, (p / w) as f64, (q % w) as f64, (q / w) as f64);
                let (cp, cq) = (image.pixel(p % w, p / w), image.pixel(q % w, q / w));
                let d_rgb: f64 = (0..3).map(|c| (cp[c] - cq[c]).powi(2)).sum();
                let a = (-((px - qx).powi(2) + (py - qy).powi(2)) / (2.0 * params.sigma_xy.powi(2))
                    - d_rgb / (2.0 * params.sigma_rgb.powi(2)))
                .exp();
                for ch in [&map.fg, &map.bg] {
                    total += ch.data()[p] * a * (1.0 - ch.data()[q]);
                }
            }
        }
        total
    }

    #[test]
    fn crf_zero_for_constant_binary_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = random_image(6, 6, &mut rng);
        let map = LocalizationMap::from_foreground(Map::filled(6, 6, 1.0)).unwrap();
        assert_eq!(
            crf_loss_dense(&image, &map, &AffinityParams::default()).unwrap().value,
            0.0
        );
    }

    #[test]
    fn crf_two_pixel_closed_form() {
        let image = RgbImage::filled(2, 1, [0.3, 0.6, 0.1]);
        let map = LocalizationMap::from_foreground(Map::from_vec(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        let params = AffinityParams {
            sigma_xy: 2.0,
            sigma_rgb: 0.1,
        };
        let a = (-1.0f64 / 8.0).exp();
        let v = crf_loss_dense(&image, &map, &params).unwrap().value;
        assert!((v - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn crf_dense_matches_oracle() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (w, h) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let image = random_image(w, h, &mut rng);
            let map = random_map(w, h, &mut rng);
            let params = AffinityParams {
                sigma_xy: rng.random_range(0.5..10.0),
                sigma_rgb: rng.random_range(0.05..1.0),
            };
            let fast = crf_loss_dense(&image, &map, &params).unwrap().value;
            let slow = crf_oracle(&image, &map, &params);
            assert!((fast - slow).abs() <= 1e-6 * slow.abs().max(1e-12), "{fast} vs {slow}");
        }
    }

    #[test]
    fn crf_zero_iff_constant_on_binary_2x2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = random_image(2, 2, &mut rng);
        let params = AffinityParams::default();
        for bits in 0u8..16 {
            let fg = Map::from_vec(2, 2, (0..4).map(|i| ((bits >> i) & 1) as f64).collect()).unwrap();
            let map = LocalizationMap::from_foreground(fg).unwrap();
            let v = crf_loss_dense(&image, &map, &params).unwrap().value;
            let constant = bits == 0 || bits == 15;
            assert_eq!(v == 0.0, constant, "bits {bits:04b} gave {v}");
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn crf_gradient_matches_finite_differences() {
        let params = AffinityParams {
            sigma_xy: 4.0,
            sigma_rgb: 0.3,
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let image = random_image(16, 16, &mut rng);
            let map = random_map(16, 16, &mut rng);
            let t = crf_loss_dense(&image, &map, &params).unwrap();
            check_gradient(&map.fg, &t.grad_fg, 1e-3, |m| {
                crf_loss_dense(&image, m, &params).unwrap().value
            });
        }
    }

    #[test]
    fn crf_pooled_gradient_matches_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = random_image(10, 9, &mut rng);
        let map = random_map(10, 9, &mut rng);
        let params = AffinityParams::default();
        let t = crf_loss_pooled(&image, &map, &params, 4).unwrap();
        check_gradient(&map.fg, &t.grad_fg, 1e-3, |m| {
            crf_loss_pooled(&image, m, &params, 4).unwrap().value
        });
    }

    #[test]
    fn crf_pooled_error_at_64() {
        // Smooth image and map, where block pooling is meant to be used.
        let image = RgbImage::from_vec(
            64,
            64,
            (0..64 * 64)
                .flat_map(|i| {
                    let (x, y) = ((i % 64) as f64, (i / 64) as f64);
                    let inside = (x - 30.0).powi(2) + (y - 34.0).powi(2) < 300.0;
                    if inside {
                        [0.8, 0.3, 0.2]
                    } else {
                        [0.3 + 0.002 * x, 0.4, 0.5 + 0.002 * y]
                    }
                })
                .collect(),
        )
        .unwrap();
        let fg = Map::from_fn(64, 64, |x, y| {
            let r2 = (x as f64 - 30.0).powi(2) + (y as f64 - 34.0).powi(2);
            1.0 / (1.0 + ((r2 - 300.0) / 60.0).exp())
        });
        let map = LocalizationMap::from_foreground(fg).unwrap();
        let params = AffinityParams::default();
        let dense = crf_loss_dense(&image, &map, &params).unwrap().value;
        let pooled = crf_loss_pooled(&image, &map, &params, 4).unwrap().value;
        let rel = (pooled - dense).abs() / dense;
        println!("pooled crf at 64x64: dense {dense:.3} pooled {pooled:.3} relative error {rel:.4}");
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn crf_auto_strategy_switches_at_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let image = random_image(12, 12, &mut rng);
        let map = random_map(12, 12, &mut rng);
        let mut cfg = CrfConfig::default();
        let dense = crf_loss_dense(&image, &map, &cfg.affinity).unwrap();
        assert_eq!(crf_loss(&image, &map, &cfg).unwrap(), dense);
        cfg.dense_max_pixels = 100;
        let pooled = crf_loss_pooled(&image, &map, &cfg.affinity, 4).unwrap();
        assert_eq!(crf_loss(&image, &map, &cfg).unwrap(), pooled);
    }

    proptest! {
        #[test]
        fn crf_nonnegative_and_channel_symmetric(
            seed in any::<u64>(),
            w in 1usize..6,
            h in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let image = random_image(w, h, &mut rng);
            let map = LocalizationMap::from_foreground(Map::from_fn(w, h, |_, _| rng.random())).unwrap();
            let params = AffinityParams { sigma_xy: 3.0, sigma_rgb: 0.5 };
            let v = crf_loss_dense(&image, &map, &params).unwrap().value;
            let s = crf_loss_dense(&image, &map.swapped(), &params).unwrap().value;
            prop_assert!(v >= 0.0);
            prop_assert!((v - s).abs() <= 1e-12 * v.max(1.0));
        }
    }

    fn synthetic_scene(rng: &mut ChaCha8Rng) -> (RgbImage, Map, SyntheticClassifier) {
        let clf = SyntheticClassifier::new(SyntheticClassifierConfig::new(3)).unwrap();
        let [a, b] = clf.palette().class_colors(1);
        let mask = Map::from_fn(16, 16, |x, y| {
            if (4..11).contains(&x) && (5..12).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        let mut image = RgbImage::filled(16, 16, [0.5, 0.5, 0.5]);
        for y in 0..16 {
            for x in 0..16 {
                let mut noise = || rng.random_range(-0.02..0.02);
                let base = if mask.get(x, y) > &0.5 {
                    if (x / 2 + y / 2) % 2 == 0 {
                        a
                    } else {
                        b
                    }
                } else {
                    [0.5, 0.5, 0.5]
                };
                let px = [base[0] + noise(), base[1] + noise(), base[2] + noise()];
                image.set_pixel(x, y, px);
            }
        }
        (image, mask, clf)
    }

    #[test]
    fn cls_identity_mask_is_plain_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (image, _, clf) = synthetic_scene(&mut rng);
        let ones = Map::filled(16, 16, 1.0);
        let v = classifier_alignment_loss(&image, &ones, 1, &clf).unwrap().value;
        let direct = -clf.classify(&image, 1).unwrap().ln();
        assert!((v - direct).abs() < 1e-9);
    }

    #[test]
    fn cls_prefers_true_mask_over_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (image, mask, clf) = synthetic_scene(&mut rng);
        let complement = mask.map(|v| 1.0 - v);
        let good = classifier_alignment_loss(&image, &mask, 1, &clf).unwrap().value;
        let bad = classifier_alignment_loss(&image, &complement, 1, &clf).unwrap().value;
        assert!(good < bad, "{good} vs {bad}");
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (image, _, clf) = synthetic_scene(&mut rng);
            let fg = Map::from_fn(16, 16, |_, _| rng.random_range(0.3..1.0));
            let t = classifier_alignment_loss(&image, &fg, 1, &clf).unwrap();
            check_gradient(&fg, &t.grad_fg, 1e-3, |m| {
                classifier_alignment_loss(&image, &m.fg, 1, &clf).unwrap().value
            });
        }
    }

    #[test]
    fn total_loss_weighting() {
        let terms = LossTerms {
            cls: Some(0.5),
            cpa: Some(0.7),
            crf: Some(1e6),
        };
        let only_cpa = LossWeights {
            lambda_cls: 0.0,
            lambda_cpa: 1.0,
            lambda_crf: 0.0,
        };
        assert_eq!(total_loss(&terms, &only_cpa).unwrap(), 0.7);
        let v = total_loss(&terms, &LossWeights::default()).unwrap();
        assert!((v - 1.202).abs() < 1e-9);
    }

    #[test]
    fn total_loss_names_nan_term() {
        let terms = LossTerms {
            cls: Some(0.5),
            cpa: Some(f64::NAN),
            crf: Some(1.0),
        };
        match total_loss(&terms, &LossWeights::default()) {
            Err(DipsError::NonFiniteLoss { term, .. }) => assert_eq!(term, "cpa"),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn objective_skips_disabled_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (image, _, clf) = synthetic_scene(&mut rng);
        let map = random_map(16, 16, &mut rng);
        let labels = labels_from(16, 16, &[70, 90], &[0, 255]);
        let inputs = LossInputs {
            image: &image,
            labels: &labels,
            class_index: 1,
            classifier: &clf,
        };
        let w = LossWeights {
            lambda_cls: 0.0,
            lambda_cpa: 1.0,
            lambda_crf: 0.0,
        };
        let (terms, total, grad) = objective(&map, &inputs, &w, &CrfConfig::default()).unwrap();
        assert!(terms.cls.is_none() && terms.crf.is_none());
        let cpa = partial_cross_entropy(&map, &labels).unwrap();
        assert_eq!(total, cpa.value);
        assert_eq!(grad, cpa.grad_fg);
        let (all, _, _) = objective(&map, &inputs, &LossWeights::default(), &CrfConfig::default()).unwrap();
        assert!(all.cls.is_some() && all.crf.is_some());
    }
}
