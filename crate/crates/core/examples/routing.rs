// Routing by agreement on random votes: couplings sharpen toward the class
// capsules the votes agree on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textcaps::capsnet::{lengths, route_traced};
use textcaps::tensor::Tensor;

pub fn run_example() -> textcaps::Result<()> {
    let (n, m, d) = (12, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Every input capsule votes roughly along the same direction for class 1
    // and at random for the others.
    let votes = Tensor::from_fn([n, m, d], |i| {
        let (j, k) = ((i / d) % m, i % d);
        let noise = rng.random_range(-0.3..0.3);
        if j == 1 {
            if k == 0 { 0.8 + noise * 0.1 } else { noise * 0.1 }
        } else {
            noise
        }
    });
    let trace = route_traced(&votes, 3)?;
    for (it, (c, v)) in trace.couplings.iter().zip(&trace.outputs).enumerate() {
        let mean_c: Vec<f64> = (0..m).map(|j| (0..n).map(|i| c.data()[i * m + j]).sum::<f64>() / n as f64).collect();
        let len = lengths(&v.clone().reshape([1, m, d])?)?;
        println!("iteration {}: mean coupling {:.3?}, lengths {:.3?}", it + 1, mean_c, len.data());
    }
    Ok(())
}

fn main() -> textcaps::Result<()> {
    run_example()
}
