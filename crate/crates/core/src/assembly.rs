//! Text instance feature assembling: sum-pool the pixel embedding under
//! each instance mask.

use crate::error::{Error, Result};
use crate::geometry::InstanceMaskSet;
use crate::numerics::{Graph, Var};
use crate::pixel_embedding::PixelEmbedding;

/// Per-instance features `N × D` recorded on a graph.
#[derive(Clone, Debug)]
pub struct InstanceFeatures {
    pub features: Var,
    pub valid: Vec<bool>,
}

/// `F = M · Pᵀ` with masks flattened to `N × H'W'` and P to `D × H'W'`.
///
/// Padded masks are empty, so their rows come out exactly zero.
pub fn assemble_features(
    g: &mut Graph,
    masks: &InstanceMaskSet,
    embedding: &PixelEmbedding,
) -> Result<InstanceFeatures> {
    let (h, w) = masks.dims();
    if (h, w) != (embedding.height, embedding.width) {
        return Err(Error::shape(
            "assemble_features",
            &[masks.capacity(), h, w],
            &[embedding.dim, embedding.height, embedding.width],
        ));
    }
    let m = g.constant(masks.to_matrix());
    let flat = g.reshape(embedding.map, &[embedding.dim, h * w])?;
    let pt = g.transpose(flat)?;
    let features = g.matmul(m, pt)?;
    Ok(InstanceFeatures {
        features,
        valid: masks.valid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mask;
    use crate::numerics::{finite_diff_check, ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn embedding(g: &mut Graph, t: Tensor) -> PixelEmbedding {
        let dims = t.dims().to_vec();
        let map = g.constant(t);
        PixelEmbedding {
            map,
            branches: vec![map],
            dim: dims[0],
            height: dims[1],
            width: dims[2],
        }
    }

    fn random_map(d: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[d, h, w],
            (0..d * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn features(masks: Vec<Mask>, capacity: usize, map: &Tensor) -> Tensor {
        let (h, w) = (map.dims()[1], map.dims()[2]);
        let set = InstanceMaskSet::padded(masks, capacity, h, w).unwrap();
        let mut g = Graph::new();
        let e = embedding(&mut g, map.clone());
        let f = assemble_features(&mut g, &set, &e).unwrap();
        g.value(f.features).clone()
    }

    #[test]
    fn full_mask_on_constant_map() {
        let map = Tensor::new(&[2, 3, 4], [vec![1.5; 12], vec![-2.0; 12]].concat()).unwrap();
        let f = features(vec![Mask::from_fn(3, 4, |_, _| true)], 2, &map);
        assert_eq!(f.row(0), &[1.5 * 12.0, -2.0 * 12.0]);
        // padded slot
        assert_eq!(f.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn single_pixel_picks_that_embedding() {
        let map = random_map(3, 4, 5, 1);
        let f = features(vec![Mask::from_fn(4, 5, |r, c| (r, c) == (2, 3))], 1, &map);
        let expect: Vec<f64> = (0..3).map(|k| map.at(&[k, 2, 3])).collect();
        assert_eq!(f.row(0), &expect[..]);
    }

    #[test]
    fn disjoint_masks_are_additive() {
        let map = random_map(4, 6, 6, 2);
        let a = Mask::from_fn(6, 6, |r, c| r < 2 && c % 2 == 0);
        let b = Mask::from_fn(6, 6, |r, c| r == 4 && c > 1);
        let mut ab = a.clone();
        ab.union_with(&b).unwrap();
        let f = features(vec![a, b, ab], 3, &map);
        for k in 0..4 {
            assert_eq!(f.row(2)[k], f.row(0)[k] + f.row(1)[k]);
        }
    }

    #[test]
    fn permuting_masks_permutes_rows() {
        let map = random_map(3, 5, 5, 3);
        let masks: Vec<Mask> = (0..3)
            .map(|i| Mask::from_fn(5, 5, |r, c| (r + c) % 3 == i))
            .collect();
        let f = features(masks.clone(), 3, &map);
        let perm = [2, 0, 1];
        let fp = features(perm.iter().map(|&i| masks[i].clone()).collect(), 3, &map);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(fp.row(row), f.row(src));
        }
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let set = InstanceMaskSet::padded(vec![], 2, 4, 4).unwrap();
        let mut g = Graph::new();
        let e = embedding(&mut g, random_map(2, 4, 5, 0));
        let err = assemble_features(&mut g, &set, &e).unwrap_err();
        assert!(
            err.to_string().contains("[2, 4, 4]") && err.to_string().contains("[2, 4, 5]"),
            "{err}"
        );
    }

    #[test]
    fn gradient_wrt_map_sums_covering_rows() {
        let (d, h, w) = (2, 3, 3);
        let masks = vec![
            Mask::from_fn(h, w, |r, _| r == 0),
            Mask::from_fn(h, w, |_, c| c == 0),
        ];
        let set = InstanceMaskSet::padded(masks, 3, h, w).unwrap();
        let upstream =
            Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0], vec![7.0, 7.0]]).unwrap();
        let mut params = ParamStore::new();
        params.insert("p", random_map(d, h, w, 4));
        let loss = |g: &mut Graph, p: &ParamStore| {
            let map = g.param(p, "p")?;
            let e = PixelEmbedding {
                map,
                branches: vec![],
                dim: d,
                height: h,
                width: w,
            };
            let f = assemble_features(g, &set, &e)?;
            let weighted = g.mul_const(f.features, upstream.clone())?;
            Ok(g.sum(weighted))
        };
        assert!(finite_diff_check(&params, 1e-6, loss).unwrap() <= 1e-6);
        let grads = crate::numerics::analytic_grads(&params, &loss).unwrap();
        let gp = grads.grad("p").unwrap();
        // pixel (0,0) is covered by both masks; (0,1) by the first; (2,2) by none
        assert_eq!(gp.at(&[0, 0, 0]), 0.5);
        assert_eq!(gp.at(&[1, 0, 0]), 5.0);
        assert_eq!(gp.at(&[1, 0, 1]), 2.0);
        assert_eq!(gp.at(&[0, 2, 2]), 0.0);
    }
}
