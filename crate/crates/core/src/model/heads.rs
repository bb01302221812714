//! Class and mask heads shared in shape (not in weights) by both stages.

use super::params::{add_layer_norm, add_linear, Bound, ParamStore};
use super::tracker::{ln_vars, norm, LayerNormVars};
use crate::error::Result;
use crate::numerics::{linear, Tape, Var};
use crate::rng::Rng;

/// Output layer norm, then a linear class head `D -> K+1` and a
/// three-layer ReLU mask MLP `D -> D -> D -> Dm`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub norm: LayerNormVars,
    pub class_w: Var,
    pub class_b: Var,
    pub mask: [(Var, Var); 3],
}

pub fn add_heads(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    dim: usize,
    classes: usize,
    mask_dim: usize,
) {
    add_layer_norm(store, &format!("{prefix}.norm"), dim);
    add_linear(store, rng, &format!("{prefix}.class"), dim, classes);
    add_linear(store, rng, &format!("{prefix}.mask.fc1"), dim, dim);
    add_linear(store, rng, &format!("{prefix}.mask.fc2"), dim, dim);
    add_linear(store, rng, &format!("{prefix}.mask.fc3"), dim, mask_dim);
}

impl HeadVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Result<Self> {
        let lin = |name: &str| -> Result<(Var, Var)> {
            Ok((
                b.var(&format!("{prefix}.{name}.w"))?,
                b.var(&format!("{prefix}.{name}.b"))?,
            ))
        };
        let (class_w, class_b) = lin("class")?;
        Ok(Self {
            norm: ln_vars(b, &format!("{prefix}.norm"))?,
            class_w,
            class_b,
            mask: [lin("mask.fc1")?, lin("mask.fc2")?, lin("mask.fc3")?],
        })
    }
}

pub fn class_head(t: &Tape, q: Var, h: &HeadVars) -> Result<Var> {
    linear(t, norm(t, q, &h.norm)?, h.class_w, h.class_b)
}

pub fn mask_head(t: &Tape, q: Var, h: &HeadVars) -> Result<Var> {
    let [(w1, b1), (w2, b2), (w3, b3)] = h.mask;
    let x = t.relu(linear(t, norm(t, q, &h.norm)?, w1, b1)?)?;
    let x = t.relu(linear(t, x, w2, b2)?)?;
    linear(t, x, w3, b3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::rng;

    fn heads(d: usize, k: usize, dm: usize) -> ParamStore {
        let mut s = ParamStore::new();
        add_heads(&mut s, &mut rng::stream(3, "heads-test"), "h", d, k, dm);
        s
    }

    #[test]
    fn zero_class_head_is_uniform() {
        let mut s = heads(4, 3, 2);
        s.insert("h.class.w", Tensor::zeros([4, 3]));
        let t = Tape::new();
        let b = s.bind(&t, false).unwrap();
        let hv = HeadVars::from_bound(&b, "h").unwrap();
        let q = t
            .constant(Tensor::randn([5, 4], 1.0, &mut rng::stream(1, "q")))
            .unwrap();
        let p = t.softmax(class_head(&t, q, &hv).unwrap(), 1).unwrap();
        assert!(t
            .value(p)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_mask_mlp_passes_nonnegative_normalized_input() {
        let mut s = heads(3, 2, 3);
        for l in ["fc1", "fc2", "fc3"] {
            s.insert(format!("h.mask.{l}.w"), Tensor::eye(3));
        }
        // a norm bias of 2 keeps every normalized value positive
        s.insert("h.norm.b", Tensor::full([3], 2.0));
        let t = Tape::new();
        let b = s.bind(&t, false).unwrap();
        let hv = HeadVars::from_bound(&b, "h").unwrap();
        let q = t
            .constant(Tensor::new([1, 3], vec![-1.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let got = t.value(mask_head(&t, q, &hv).unwrap()).clone();
        let sd = (2.0f64 / 3.0 + crate::numerics::LAYER_NORM_EPS).sqrt();
        let want = [2.0 - 1.0 / sd, 2.0, 2.0 + 1.0 / sd];
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn heads_match_direct_arithmetic() {
        let s = heads(4, 3, 2);
        let x = Tensor::randn([5, 4], 1.0, &mut rng::stream(2, "x"));
        let t = Tape::new();
        let b = s.bind(&t, false).unwrap();
        let hv = HeadVars::from_bound(&b, "h").unwrap();
        let q = t.constant(x.clone()).unwrap();
        let got = t.value(mask_head(&t, q, &hv).unwrap()).clone();
        let lin = |x: &Tensor, l: &str| {
            let w = s.get(&format!("h.mask.{l}.w")).unwrap();
            let b = s.get(&format!("h.mask.{l}.b")).unwrap();
            let mut y = x.matmul(w).unwrap();
            for r in 0..y.shape()[0] {
                for (v, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            y
        };
        let g = s.get("h.norm.g").unwrap();
        let nb = s.get("h.norm.b").unwrap();
        let mut xn = x.clone();
        for r in 0..xn.shape()[0] {
            let row = xn.row_mut(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let sd = (var + crate::numerics::LAYER_NORM_EPS).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / sd * g.data()[i] + nb.data()[i];
            }
        }
        let h = lin(&xn, "fc1").map(|v| v.max(0.0));
        let h = lin(&h, "fc2").map(|v| v.max(0.0));
        let want = lin(&h, "fc3");
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
}
