use crate::numeric::{Graph, TensorError, Var, LOG_FLOOR};

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub adversarial: Var,
    pub l1: Var,
    pub total: Var,
}

/// `mean(−log D(fake)) + λ·mean|target − fake|`, logs clamped at
/// [`LOG_FLOOR`].
pub fn generator_loss(
    g: &mut Graph,
    d_fake: Var,
    fake: Var,
    target: Var,
    lambda_img: f32,
) -> Result<GeneratorLoss, TensorError> {
    let log_d = g.log_clamped(d_fake, LOG_FLOOR);
    let m = g.mean(log_d);
    let adversarial = g.affine(m, -1.0, 0.0);
    let diff = g.sub(target, fake)?;
    let abs = g.abs(diff);
    let l1 = g.mean(abs);
    let weighted = g.affine(l1, lambda_img, 0.0);
    let total = g.add(adversarial, weighted)?;
    Ok(GeneratorLoss { adversarial, l1, total })
}

/// `mean(−log D(real)) + mean(−log(1 − D(fake)))`.
pub fn discriminator_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var, TensorError> {
    let lr = g.log_clamped(d_real, LOG_FLOOR);
    let real = g.mean(lr);
    let one_minus = g.affine(d_fake, -1.0, 1.0);
    let lf = g.log_clamped(one_minus, LOG_FLOOR);
    let fake = g.mean(lf);
    let s = g.add(real, fake)?;
    Ok(g.affine(s, -1.0, 0.0))
}

/// Scalar evaluation of [`generator_loss`]: `(adversarial, l1, total)`.
pub fn generator_loss_value(
    d_fake: &[f32],
    fake: &[f32],
    target: &[f32],
    lambda_img: f32,
) -> Result<(f32, f32, f32), TensorError> {
    let mut g = Graph::new();
    let d = g.constant(&[d_fake.len()], d_fake.to_vec())?;
    let f = g.constant(&[fake.len()], fake.to_vec())?;
    let t = g.constant(&[target.len()], target.to_vec())?;
    let l = generator_loss(&mut g, d, f, t, lambda_img)?;
    Ok((g.scalar(l.adversarial), g.scalar(l.l1), g.scalar(l.total)))
}

pub fn discriminator_loss_value(d_real: &[f32], d_fake: &[f32]) -> Result<f32, TensorError> {
    let mut g = Graph::new();
    let r = g.constant(&[d_real.len()], d_real.to_vec())?;
    let f = g.constant(&[d_fake.len()], d_fake.to_vec())?;
    let l = discriminator_loss(&mut g, r, f)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn generator_examples() {
        let img = vec![0.25f32; 16];
        let (_, _, t) = generator_loss_value(&[1.0; 4], &img, &img, 100.0).unwrap();
        assert_eq!(t, 0.0);
        let (a, _, t) = generator_loss_value(&[0.5; 4], &img, &img, 100.0).unwrap();
        assert!((t as f64 - LN2).abs() < 1e-6 && a == t);
        let shifted: Vec<f32> = img.iter().map(|v| v + 0.5).collect();
        let (a, l1, t) = generator_loss_value(&[1.0; 4], &shifted, &img, 100.0).unwrap();
        assert!((t - 50.0).abs() < 1e-6);
        assert_eq!(t, a + 100.0 * l1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(generator_loss_value(&[1.0], &[0.0; 3], &[0.0; 4], 1.0).is_err());
    }

    #[test]
    fn discriminator_examples() {
        assert_eq!(discriminator_loss_value(&[1.0; 3], &[0.0; 3]).unwrap(), 0.0);
        let l = discriminator_loss_value(&[0.5; 3], &[0.5; 3]).unwrap();
        assert!((l as f64 - 2.0 * LN2).abs() < 1e-6);
        let l = discriminator_loss_value(&[0.0; 2], &[0.0; 2]).unwrap();
        assert!((l as f64 + (1e-7f32 as f64).ln()).abs() < 1e-4 && l.is_finite());
    }
}
