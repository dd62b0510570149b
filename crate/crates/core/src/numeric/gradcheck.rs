//! Central-difference gradient checks for the graph ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NormMode, Tensor, TensorError, Var, LOG_FLOOR};

/// Largest `|analytic − fd| / max(1, |fd|)` over every element of every
/// input, where `fd` is the central difference with step `h` of the scalar
/// returned by `build`.
pub fn max_gradient_error<F>(inputs: &[Tensor], h: f32, build: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ts: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out) as f64)
    };
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst = 0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; leaves[i].numel()]);
        for j in 0..leaves[i].numel() {
            let mut probe = leaves.clone();
            probe[i].data_mut()[j] += h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&probe)?;
            let fd = (up - down) / (2.0 * h as f64);
            worst = worst.max((analytic[j] as f64 - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values with magnitude in [0.1, 1) and random sign, away from kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Reduces `y` to a scalar through fixed random weights so every output
/// element carries a distinct cotangent.
fn weighted(g: &mut Graph, y: Var, rng_seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0) / n as f32).collect();
    let w = g.constant(&shape, w)?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst error per differentiable op on inputs drawn from `seed`.
pub fn op_suite(seed: u64, h: f32) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = seed.wrapping_add(1000);
    let mut out = Vec::new();

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let ab = [a.clone(), b.clone()];
    out.push((
        "add",
        max_gradient_error(&ab, h, |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "sub",
        max_gradient_error(&ab, h, |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "mul",
        max_gradient_error(&ab, h, |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "affine",
        max_gradient_error(&ab[..1], h, |g, v| {
            let y = g.affine(v[0], -1.7, 0.3);
            weighted(g, y, ws)
        })?,
    ));

    let kinked = [off_zero(&mut rng, &[2, 4])];
    out.push((
        "abs",
        max_gradient_error(&kinked, h, |g, v| {
            let y = g.abs(v[0]);
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "leaky_relu",
        max_gradient_error(&kinked, h, |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            weighted(g, y, ws)
        })?,
    ));
    let positive = [uniform(&mut rng, &[2, 4], 0.2, 1.0)];
    out.push((
        "log_clamped",
        max_gradient_error(&positive, h, |g, v| {
            let y = g.log_clamped(v[0], LOG_FLOOR);
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "tanh",
        max_gradient_error(&ab[..1], h, |g, v| {
            let y = g.tanh(v[0]);
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "sigmoid",
        max_gradient_error(&ab[..1], h, |g, v| {
            let y = g.sigmoid(v[0]);
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "sum",
        max_gradient_error(&ab[..1], h, |g, v| {
            let y = g.affine(v[0], 0.2, 0.0);
            Ok(g.sum(y))
        })?,
    ));
    out.push(("mean", max_gradient_error(&ab[..1], h, |g, v| Ok(g.mean(v[0])))?));

    let mm = [
        uniform(&mut rng, &[3, 4], -1.0, 1.0),
        uniform(&mut rng, &[4, 2], -1.0, 1.0),
    ];
    out.push((
        "matmul",
        max_gradient_error(&mm, h, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, ws)
        })?,
    ));
    let rb = [
        uniform(&mut rng, &[3, 4], -1.0, 1.0),
        uniform(&mut rng, &[4], -1.0, 1.0),
    ];
    out.push((
        "add_row_bias",
        max_gradient_error(&rb, h, |g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            weighted(g, y, ws)
        })?,
    ));
    let cb = [
        uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0),
        uniform(&mut rng, &[3], -1.0, 1.0),
    ];
    out.push((
        "add_channel_bias",
        max_gradient_error(&cb, h, |g, v| {
            let y = g.add_channel_bias(v[0], v[1])?;
            weighted(g, y, ws)
        })?,
    ));

    let conv = [
        uniform(&mut rng, &[2, 2, 4, 4], -1.0, 1.0),
        uniform(&mut rng, &[3, 2, 4, 4], -0.5, 0.5),
    ];
    out.push((
        "conv2d",
        max_gradient_error(&conv, h, |g, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            weighted(g, y, ws)
        })?,
    ));
    let convt = [
        uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0),
        uniform(&mut rng, &[3, 2, 4, 4], -0.5, 0.5),
    ];
    out.push((
        "conv2d_transpose",
        max_gradient_error(&convt, h, |g, v| {
            let y = g.conv2d_transpose(v[0], v[1], 2, 1)?;
            weighted(g, y, ws)
        })?,
    ));
    let cat = [
        uniform(&mut rng, &[2, 1, 2, 2], -1.0, 1.0),
        uniform(&mut rng, &[2, 2, 2, 2], -1.0, 1.0),
    ];
    out.push((
        "concat_channels",
        max_gradient_error(&cat, h, |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            weighted(g, y, ws)
        })?,
    ));
    out.push((
        "reshape",
        max_gradient_error(&mm[..1], h, |g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            weighted(g, y, ws)
        })?,
    ));

    let bn = [
        uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0),
        uniform(&mut rng, &[2], 0.5, 1.5),
        uniform(&mut rng, &[2], -0.5, 0.5),
    ];
    out.push((
        "batch_norm",
        max_gradient_error(&bn, h, |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], &NormMode::Batch, 1e-5)?;
            weighted(g, y, ws)
        })?,
    ));
    let fixed = NormMode::Fixed {
        mean: vec![0.1, -0.2],
        var: vec![0.5, 1.5],
    };
    out.push((
        "batch_norm_fixed",
        max_gradient_error(&bn, h, |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], &fixed, 1e-5)?;
            weighted(g, y, ws)
        })?,
    ));

    // conv, activation and an L1 distance to a target kept off the kink
    let comp = [
        uniform(&mut rng, &[1, 1, 8, 8], -1.0, 1.0),
        uniform(&mut rng, &[2, 1, 4, 4], -0.5, 0.5),
    ];
    let target = {
        let mut g = Graph::new();
        let x = g.leaf(&comp[0]);
        let k = g.leaf(&comp[1]);
        let c = g.conv2d(x, k, 2, 1)?;
        let a = g.tanh(c);
        let offset = off_zero(&mut rng, &[1, 2, 4, 4]);
        let data = g.value(a).iter().zip(offset.data()).map(|(v, o)| v + 0.5 * o).collect();
        Tensor::new(&[1, 2, 4, 4], data)?
    };
    out.push((
        "composite",
        max_gradient_error(&comp, h, |g, v| {
            let c = g.conv2d(v[0], v[1], 2, 1)?;
            let a = g.tanh(c);
            let t = g.constant(target.shape(), target.data().to_vec())?;
            let d = g.sub(a, t)?;
            let l = g.abs(d);
            Ok(g.mean(l))
        })?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // |x| differentiated through a constant copy has zero analytic gradient
        let x = [Tensor::new(&[2], vec![0.5, -0.7]).unwrap()];
        let err = max_gradient_error(&x, 1e-3, |g, v| {
            let c = g.constant(&[2], g.value(v[0]).to_vec())?;
            let y = g.abs(c);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err > 0.9);
    }

    #[test]
    fn every_op_passes_on_a_few_seeds() {
        for seed in 0..3 {
            for (name, err) in op_suite(seed, 1e-3).unwrap() {
                assert!(err < 1e-3, "{name} seed {seed}: {err}");
            }
        }
    }
}
