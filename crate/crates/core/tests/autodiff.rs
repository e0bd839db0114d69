use proptest::prelude::*;
use robcf_core::{Graph, Tensor};

/// f(x) = sum(softplus(tanh(x W) * sigmoid(x)) + log(1 + x^2) + exp(-|x|) / 2) for a 3x3 W.
fn value_and_grad(x: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let xt = Tensor::matrix(1, 3, x.to_vec()).unwrap();
    let wt = Tensor::matrix(3, 3, w.to_vec()).unwrap();
    let mut g = Graph::new();
    let xv = g.param(xt);
    let wv = g.constant(wt);
    let xw = g.matmul(xv, wv).unwrap();
    let t = g.tanh(xw);
    let s = g.sigmoid(xv);
    let ts = g.mul(t, s).unwrap();
    let sp = g.softplus(ts);
    let sq = g.square(xv);
    let one = g.offset(sq, 1.0);
    let lg = g.log(one);
    let ab = g.abs(xv);
    let neg = g.scale(ab, -1.0);
    let ex = g.exp(neg);
    let half = g.scale(ex, 0.5);
    let a = g.add(sp, lg).unwrap();
    let b = g.add(a, half).unwrap();
    let root = g.sum(b);
    let v = g.value(root).data()[0];
    let grads = g.backward(root).unwrap();
    (v, grads.get(xv).unwrap().data().to_vec())
}

proptest! {
    #[test]
    fn tape_gradient_matches_central_differences(
        x in prop::collection::vec(0.05f64..2.0, 3),
        signs in prop::collection::vec(any::<bool>(), 3),
        w in prop::collection::vec(-1.5f64..1.5, 9),
    ) {
        // Keep points away from the kink of |x|.
        let x: Vec<f64> = x.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
        let (_, ad) = value_and_grad(&x, &w);
        let h = 1e-6;
        for k in 0..3 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[k] += h;
            m[k] -= h;
            let fd = (value_and_grad(&p, &w).0 - value_and_grad(&m, &w).0) / (2.0 * h);
            prop_assert!((fd - ad[k]).abs() <= 1e-6 * (1.0 + ad[k].abs()), "k={k} fd={fd} ad={}", ad[k]);
        }
    }
}
