//! Class activation pseudo-masks and the iterative refinement head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::dims3;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::params::{conv_same, join, ConvParams, ParamTree};
use crate::tensor::Tensor;

/// Single-channel map in `[0, 1]` whose maximum is 1 unless it is all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    values: Tensor,
}

impl PseudoMask {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Bilinear resize to `h x w`; stays within `[0, 1]`.
    pub fn resized(&self, h: usize, w: usize) -> Result<Tensor> {
        kernels::bilinear_resize(&self.values, h, w)
    }

    pub fn satisfies_invariants(&self) -> bool {
        let v = self.values.data();
        let in_range = v.iter().all(|&x| (0.0..=1.0).contains(&x));
        let max = self.values.max();
        in_range && (max == 0.0 || (max - 1.0).abs() < 1e-6)
    }
}

/// `relu(sum_c t_c * W_c)` scaled by its maximum.
pub fn cam(features: &Tensor, class_embedding: &Tensor) -> Result<PseudoMask> {
    let (c, h, w) = features.dims3()?;
    if class_embedding.shape() != [c] {
        return shape_err(format!(
            "cam: {c} feature channels but embedding has shape {:?}",
            class_embedding.shape()
        ));
    }
    let plane = h * w;
    let mut acc = vec![0f32; plane];
    for (ch, &t) in class_embedding.data().iter().enumerate() {
        for (a, &x) in acc.iter_mut().zip(&features.data()[ch * plane..(ch + 1) * plane]) {
            *a += t * x;
        }
    }
    let weighted = Tensor::from_parts(vec![1, h, w], acc);
    let (values, _) = kernels::max_normalize(&kernels::relu(&weighted));
    Ok(PseudoMask { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Refinement iterations `N`; every iteration's mask is supervised.
    pub iterations: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            iterations: 3,
        }
    }
}

/// Two 3x3 conv layers shared across refinement iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

impl<T> ParamTree<T> for HeadParams<T> {
    type Mapped<U> = HeadParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<HeadParams<U>, E> {
        Ok(HeadParams {
            conv1: self.conv1.try_map_leaves(&join(prefix, "conv1"), f)?,
            conv2: self.conv2.try_map_leaves(&join(prefix, "conv2"), f)?,
        })
    }
}

impl HeadParams<Tensor> {
    pub fn init(feature_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvParams::init(hidden, feature_channels + 1, 3, 2.0, rng),
            conv2: ConvParams::init(1, hidden, 3, 0.05, rng),
        }
    }

    pub fn zeros(feature_channels: usize, hidden: usize) -> Self {
        Self {
            conv1: ConvParams::zeros(hidden, feature_channels + 1, 3),
            conv2: ConvParams::zeros(1, hidden, 3),
        }
    }
}

/// Constant 0.5 starting mask on a `side x side` grid.
pub fn uninformed_prior(side: usize) -> Tensor {
    Tensor::full(&[1, side, side], 0.5)
}

/// Runs `iterations` refinement steps
/// `mask_t = sigmoid(conv2(relu(conv1(cat(features, mask_{t-1})))))` and
/// returns every iteration's mask resized to `out_h x out_w`.
pub fn seg_head(
    g: &mut Graph,
    features: Var,
    init_mask: Var,
    p: &HeadParams<Var>,
    iterations: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Var>> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("seg_head needs at least one iteration".into()));
    }
    let (c, h, w) = dims3(g, features)?;
    if g.shape(init_mask) != [1, h, w] {
        return shape_err(format!(
            "initial mask must be [1, {h}, {w}], got {:?}",
            g.shape(init_mask)
        ));
    }
    if g.shape(p.conv1.weight)[1] != c + 1 {
        return shape_err(format!(
            "head expects {} input channels, features have {c}",
            g.shape(p.conv1.weight)[1] - 1
        ));
    }
    let mut mask = init_mask;
    let mut outputs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let x = g.concat_channels(&[features, mask])?;
        let hdn = conv_same(g, x, &p.conv1)?;
        let hdn = g.relu(hdn);
        let logits = conv_same(g, hdn, &p.conv2)?;
        mask = g.sigmoid(logits);
        outputs.push(g.bilinear_resize(mask, out_h, out_w)?);
    }
    Ok(outputs)
}

/// Thresholds a soft mask at 0.5 into `{0, 1}`.
pub fn binarize(mask: &Tensor) -> Tensor {
    mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cam_hand_example() {
        let mut data = vec![-1.0, 2.0, 0.0, 4.0];
        data.extend([7.0, -3.0, 5.0, 0.5]);
        let w = Tensor::new(vec![2, 2, 2], data).unwrap();
        let t = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let m = cam(&w, &t).unwrap();
        assert_eq!(m.values().data(), &[0.0, 0.5, 0.0, 1.0]);
        assert!(m.satisfies_invariants());
    }

    #[test]
    fn cam_all_negative_is_zero() {
        let w = Tensor::full(&[3, 4, 4], 1.0);
        let t = Tensor::full(&[3], -0.2);
        let m = cam(&w, &t).unwrap();
        assert_eq!(m.values(), &Tensor::zeros(&[1, 4, 4]));
        assert!(m.satisfies_invariants());
    }

    #[test]
    fn cam_rejects_dim_mismatch() {
        assert!(cam(&Tensor::zeros(&[3, 2, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn zero_head_gives_half_masks() {
        let mut g = Graph::new();
        let p = bind(&mut g, &HeadParams::zeros(4, 3), false);
        let f = g.constant(Tensor::full(&[4, 10, 10], 2.0));
        let m0 = g.constant(uninformed_prior(10));
        let masks = seg_head(&mut g, f, m0, &p, 3, 16, 16).unwrap();
        assert_eq!(masks.len(), 3);
        for m in masks {
            assert_eq!(g.value(m), &Tensor::full(&[1, 16, 16], 0.5));
        }
    }

    #[test]
    fn head_outputs_in_open_unit_interval_and_prefix_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hp = HeadParams::init(4, 6, &mut rng);
        let f = Tensor::from_fn(&[4, 12, 12], |_| rng.gen_range(-2.0..2.0));
        let run = |n: usize| {
            let mut g = Graph::new();
            let p = bind(&mut g, &hp, false);
            let fv = g.constant(f.clone());
            let m0 = g.constant(uninformed_prior(12));
            let masks = seg_head(&mut g, fv, m0, &p, n, 20, 20).unwrap();
            masks.iter().map(|&m| g.value(m).clone()).collect::<Vec<_>>()
        };
        let one = run(1);
        let three = run(3);
        assert_eq!(one[0], three[0]);
        for m in &three {
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn head_rejects_zero_iterations_and_bad_mask() {
        let mut g = Graph::new();
        let p = bind(&mut g, &HeadParams::zeros(2, 2), false);
        let f = g.constant(Tensor::zeros(&[2, 8, 8]));
        let m0 = g.constant(uninformed_prior(8));
        assert!(seg_head(&mut g, f, m0, &p, 0, 8, 8).is_err());
        let bad = g.constant(uninformed_prior(7));
        assert!(seg_head(&mut g, f, bad, &p, 1, 8, 8).is_err());
    }

    #[test]
    fn binarize_threshold() {
        let m = Tensor::new(vec![4], vec![0.1, 0.5, 0.49, 0.9]).unwrap();
        assert_eq!(binarize(&m).data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
