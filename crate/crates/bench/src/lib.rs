//! Fixtures shared by the benchmarks.

use agssp_core::kead::{PatchTokenSet, TextTokens};
use agssp_core::synth::{generate_images, SynthRng, SynthSpec};
use agssp_core::{AnomalyMap, Tensor};

fn unit(rng: &mut SynthRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random tokens on a `side × side` grid of dimension `dim`.
pub fn tokens(seed: u64, side: usize, dim: usize) -> PatchTokenSet {
    let mut rng = SynthRng::new(seed);
    let m = side * side;
    let data: Vec<f32> = (0..4 * m)
        .flat_map(|_| unit(&mut rng, dim))
        .map(|v| v as f32)
        .collect();
    let cls: Vec<f32> = unit(&mut rng, dim).into_iter().map(|v| v as f32).collect();
    PatchTokenSet::new(
        Tensor::new(vec![4, m, dim], data).expect("token shape"),
        Tensor::new(vec![dim], cls).expect("cls shape"),
        None,
    )
    .expect("valid tokens")
}

pub fn text(seed: u64, dim: usize) -> TextTokens {
    let mut rng = SynthRng::new(seed);
    TextTokens {
        normal: unit(&mut rng, dim),
        anomaly: unit(&mut rng, dim),
    }
}

/// Synthetic anomaly maps with planted bumps.
pub fn maps(n: usize, side: usize) -> Vec<AnomalyMap> {
    let spec = SynthSpec {
        num_images: n,
        height: side,
        width: side,
        ..SynthSpec::default()
    };
    generate_images(&spec)
        .expect("valid spec")
        .into_iter()
        .map(|i| i.map)
        .collect()
}
