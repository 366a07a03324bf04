//! Reverse-mode gradients of a small network, checked against central
//! finite differences.

use flare::nn::{gradient_error, Graph, Mlp, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mlp = Mlp::new("mlp", &[3, 8, 2]);
    let mut params = ParamSet::<f64>::new();
    mlp.init(&mut params, &mut rng);
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.75])?;

    let g = Graph::new();
    let y = mlp.forward(&g, flare::nn::Bind::trainable(&params), g.input(x.clone()))?;
    let loss = g.mean(g.square(y));
    println!("loss {:.6}", g.scalar(loss));
    let grads = g.backward(loss)?.into_params();
    for (name, t) in grads.iter() {
        println!(
            "{name:<10} |grad| {:.6}",
            t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }

    let err = gradient_error(&params, 1e-5, |g, bind| {
        g.mean(g.square(mlp.forward(g, bind, g.input(x.clone())).unwrap()))
    });
    println!("relative error against finite differences: {err:.2e}");
    Ok(())
}
