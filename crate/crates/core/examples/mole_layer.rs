//! A single MoLE layer: zero-init identity, soft routing, and the effect of
//! a nonzero expert.

use laugh_mole::mole::{MoleDims, MoleLinear};
use laugh_mole::numerics::{seeded_rng, Tensor1D};

fn main() -> laugh_mole::Result<()> {
    let dims = MoleDims {
        out_dim: 4,
        in_dim: 6,
        rank: 2,
        alpha: 16.0,
        num_experts: 3,
    };
    let mut layer = MoleLinear::random(dims, 7)?;
    let x = Tensor1D::random_uniform(6, 1.0, &mut seeded_rng(1));

    let base = layer.base().matvec(&x)?;
    let (h, _) = layer.forward(&x)?;
    println!("fresh layer equals W0 x: {}", h == base);
    println!("routing weights at init: {:?}", layer.route(&x)?.data());

    for p in layer.params_mut() {
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * ((i % 5) as f64 - 2.0);
        }
    }
    let (h, _) = layer.forward(&x)?;
    println!("routing weights after perturbation: {:?}", layer.route(&x)?.data());
    println!("output shift from W0 x: {:?}", h.data().iter().zip(base.data()).map(|(a, b)| a - b).collect::<Vec<_>>());
    println!("trainable parameters: {}", layer.trainable_count());
    Ok(())
}
