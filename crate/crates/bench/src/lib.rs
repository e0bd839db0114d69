//! Fixtures shared by the criterion benches under `benches/`.

use robcf_core::{ConditionalFlow, FlowConfig, Tensor};

/// Deterministic pseudo-random values in `[-scale, scale]` (splitmix-style).
fn values(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            scale * (2.0 * (z >> 11) as f64 / (1u64 << 53) as f64 - 1.0)
        })
        .collect()
}

/// Default-architecture flow with every weight perturbed, so no path is trivially zero.
pub fn perturbed_flow(dim: usize) -> ConditionalFlow {
    let mut flow = ConditionalFlow::new(dim, &FlowConfig::default()).expect("valid config");
    flow.set_tau(-2.0);
    for (i, layer) in flow.layers.iter_mut().enumerate() {
        let seed = 17 + i as u64;
        for (w, m) in [(&mut layer.w_mu, &layer.mask_out), (&mut layer.w_scale, &layer.mask_out)] {
            let noise = values(w.len(), seed, 0.1);
            for ((v, k), e) in w.data_mut().iter_mut().zip(m.data()).zip(noise) {
                *v = e * k;
            }
        }
    }
    flow
}

/// `n` points in `[0, 1]^dim` with contexts spread over `[0, 1]`.
pub fn points(n: usize, dim: usize) -> (Tensor, Vec<f64>) {
    let x: Vec<f64> = values(n * dim, 3, 0.5).into_iter().map(|v| v + 0.5).collect();
    let s = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
    (Tensor::matrix(n, dim, x).expect("sized"), s)
}
