use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{discriminator_loss, generator_loss};
use super::nets::{
    batch_inputs, update_running_stats, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Phase, Trace,
};
use super::{GanConfig, GanError, GanModel, TrainingPair};
use crate::numeric::{adam_update, AdamConfig, AdamState, Graph, Tensor, Var};

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,lr,d_loss,g_adv,g_l1,g_total";

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.lr, e.d_loss, e.g_adv, e.g_l1, e.g_total
        ));
    }
    out
}

/// Constant until `decay_start`, then linear to zero at `epochs` (1-based).
pub fn learning_rate(config: &GanConfig, epoch: usize) -> f64 {
    let base = config.adam.lr;
    if epoch <= config.decay_start {
        return base;
    }
    let span = (config.epochs - config.decay_start) as f64;
    base * (1.0 - (epoch - config.decay_start) as f64 / span).max(0.0)
}

/// Splits `order` into batches of `size`; a trailing singleton joins the
/// previous batch so batch statistics are never taken over one sample.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// Outcome of a generator forward pass kept alive for the generator step.
pub struct GeneratorPass {
    graph: Graph,
    shape: Var,
    target: Var,
    fake: Var,
    trace: Trace,
}

impl GeneratorPass {
    pub fn fake(&self) -> &[f32] {
        self.graph.value(self.fake)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

/// Both networks with their optimizer states.
pub struct Trainer<'a> {
    pub model: GanModel,
    pairs: &'a [TrainingPair],
    g_states: Vec<AdamState>,
    d_states: Vec<AdamState>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &GanConfig, pairs: &'a [TrainingPair]) -> Result<Self, GanError> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(GanError::Config("no training pairs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(
            GeneratorSpec {
                image_size: config.image_size,
                base_channels: config.base_channels,
                semantic_dim: config.semantic_dim,
            },
            &mut rng,
        )?;
        let discriminator = Discriminator::new(
            DiscriminatorSpec {
                image_size: config.image_size,
                base_channels: config.disc_channels,
                layers: config.disc_layers(),
            },
            &mut rng,
        )?;
        let g_states = generator.params().into_iter().map(AdamState::for_param).collect();
        let d_states = discriminator.params().into_iter().map(AdamState::for_param).collect();
        Ok(Self {
            model: GanModel {
                config: config.clone(),
                generator,
                discriminator,
            },
            pairs,
            g_states,
            d_states,
            rng,
        })
    }

    /// One training-mode generator forward over `batch`; updates the
    /// generator's running normalization statistics.
    pub fn generator_forward(&mut self, batch: &[usize]) -> Result<GeneratorPass, GanError> {
        let cfg = &self.model.config;
        let shapes: Vec<_> = batch.iter().map(|&i| &self.pairs[i].shape).collect();
        let sems: Vec<&[f32]> = batch.iter().map(|&i| self.pairs[i].semantic.as_slice()).collect();
        let mut graph = Graph::new();
        let (shape, sem) = batch_inputs(&mut graph, &shapes, &sems, cfg.semantic_dim, cfg.image_size)?;
        let s = cfg.image_size;
        let mut target = Vec::with_capacity(batch.len() * s * s);
        for &i in batch {
            let t = &self.pairs[i].target;
            if t.width() != s || t.height() != s {
                return Err(GanError::Shape(format!(
                    "target {}×{} for size {s}",
                    t.width(),
                    t.height()
                )));
            }
            target.extend_from_slice(t.pixels());
        }
        let target = graph.constant(&[batch.len(), 1, s, s], target)?;
        let (fake, trace) = self
            .model
            .generator
            .forward(&mut graph, shape, sem, true, Phase::Train)?;
        update_running_stats(&graph, &trace, self.model.generator.bn_params_mut());
        Ok(GeneratorPass {
            graph,
            shape,
            target,
            fake,
            trace,
        })
    }

    /// Discriminator update on real pairs and detached fakes. Touches only
    /// discriminator parameters.
    pub fn discriminator_step(&mut self, pass: &GeneratorPass, lr: f64) -> Result<f64, GanError> {
        let g = &pass.graph;
        let dims = g.shape(pass.shape).to_vec();
        let mut dg = Graph::new();
        let shape = dg.constant(&dims, g.value(pass.shape).to_vec())?;
        let real = dg.constant(&dims, g.value(pass.target).to_vec())?;
        let fake = dg.constant(&dims, g.value(pass.fake).to_vec())?;
        let d = &self.model.discriminator;
        let (d_real, tr_real) = d.forward(&mut dg, shape, real, true, Phase::Train)?;
        let (d_fake, tr_fake) = d.forward(&mut dg, shape, fake, true, Phase::Train)?;
        let loss = discriminator_loss(&mut dg, d_real, d_fake)?;
        let value = dg.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(GanError::NonFinite(format!("discriminator loss {value}")));
        }
        dg.backward(loss)?;
        let grads = summed_grads(&dg, &[&tr_real, &tr_fake]);
        step(
            self.model.discriminator.params_mut(),
            &grads,
            &mut self.d_states,
            &self.model.config.adam,
            lr,
        )?;
        update_running_stats(&dg, &tr_real, self.model.discriminator.bn_params_mut());
        update_running_stats(&dg, &tr_fake, self.model.discriminator.bn_params_mut());
        Ok(value)
    }

    /// Generator update against the current discriminator, whose parameters
    /// enter the graph as constants.
    pub fn generator_step(&mut self, mut pass: GeneratorPass, lr: f64) -> Result<(f64, f64, f64), GanError> {
        let g = &mut pass.graph;
        let (d_fake, _) = self
            .model
            .discriminator
            .forward(g, pass.shape, pass.fake, false, Phase::Train)?;
        let loss = generator_loss(g, d_fake, pass.fake, pass.target, self.model.config.lambda_img)?;
        let (adv, l1, total) = (g.scalar(loss.adversarial), g.scalar(loss.l1), g.scalar(loss.total));
        if !(adv.is_finite() && l1.is_finite() && total.is_finite()) {
            return Err(GanError::NonFinite(format!(
                "generator loss adv {adv}, l1 {l1}, total {total}"
            )));
        }
        g.backward(loss.total)?;
        let grads = summed_grads(g, &[&pass.trace]);
        step(
            self.model.generator.params_mut(),
            &grads,
            &mut self.g_states,
            &self.model.config.adam,
            lr,
        )?;
        Ok((adv as f64, l1 as f64, total as f64))
    }

    pub fn train_batch(&mut self, batch: &[usize], lr: f64) -> Result<BatchLosses, GanError> {
        let pass = self.generator_forward(batch)?;
        let d_loss = self.discriminator_step(&pass, lr)?;
        let (g_adv, g_l1, g_total) = self.generator_step(pass, lr)?;
        Ok(BatchLosses {
            d_loss,
            g_adv,
            g_l1,
            g_total,
        })
    }

    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochLog, GanError> {
        let lr = learning_rate(&self.model.config, epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0f64; 4];
        let mut count = 0usize;
        for (b, batch) in batches(&order, self.model.config.batch).into_iter().enumerate() {
            let l = self.train_batch(batch, lr).map_err(|e| match e {
                GanError::NonFinite(msg) => {
                    GanError::NonFinite(format!("epoch {epoch}, batch {b}: {msg}; {}", self.model.diagnostics()))
                }
                other => other,
            })?;
            let n = batch.len();
            for (s, v) in sums.iter_mut().zip([l.d_loss, l.g_adv, l.g_l1, l.g_total]) {
                *s += v * n as f64;
            }
            count += n;
        }
        let c = count as f64;
        Ok(EpochLog {
            epoch,
            lr,
            d_loss: sums[0] / c,
            g_adv: sums[1] / c,
            g_l1: sums[2] / c,
            g_total: sums[3] / c,
        })
    }

    /// Replaces the generator's running statistics by their average over one
    /// ordered pass through the training pairs.
    pub fn recalibrate(&mut self) -> Result<(), GanError> {
        let order: Vec<usize> = (0..self.pairs.len()).collect();
        let n_bn = self.model.generator.bn_params_mut().len();
        let mut acc: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_bn);
        let mut total = 0usize;
        for batch in batches(&order, self.model.config.batch) {
            let pass = self.generator_forward_stats_only(batch)?;
            for (k, &v) in pass.trace.bn_outputs.iter().enumerate() {
                let st = pass.graph.batch_stats(v).expect("training-mode batch norm");
                if acc.len() <= k {
                    acc.push((vec![0.0; st.mean.len()], vec![0.0; st.var.len()]));
                }
                for (a, &m) in acc[k].0.iter_mut().zip(&st.mean) {
                    *a += m as f64 * batch.len() as f64;
                }
                for (a, &v) in acc[k].1.iter_mut().zip(&st.var) {
                    *a += v as f64 * batch.len() as f64;
                }
            }
            total += batch.len();
        }
        for (bn, (m, v)) in self.model.generator.bn_params_mut().into_iter().zip(acc) {
            bn.running_mean = m.iter().map(|x| (x / total as f64) as f32).collect();
            bn.running_var = v.iter().map(|x| (x / total as f64) as f32).collect();
        }
        Ok(())
    }

    fn generator_forward_stats_only(&mut self, batch: &[usize]) -> Result<GeneratorPass, GanError> {
        let saved: Vec<_> = self
            .model
            .generator
            .bn_params_mut()
            .iter()
            .map(|b| (b.running_mean.clone(), b.running_var.clone()))
            .collect();
        let pass = self.generator_forward(batch)?;
        for (bn, (m, v)) in self.model.generator.bn_params_mut().into_iter().zip(saved) {
            bn.running_mean = m;
            bn.running_var = v;
        }
        Ok(pass)
    }
}

/// Gradient per parameter position, summed over traces that share the same
/// parameter list.
fn summed_grads(g: &Graph, traces: &[&Trace]) -> Vec<Vec<f32>> {
    let n = traces[0].params.len();
    (0..n)
        .map(|i| {
            let mut acc: Option<Vec<f32>> = None;
            for t in traces {
                if let Some(gr) = g.grad(t.params[i]) {
                    match &mut acc {
                        None => acc = Some(gr.to_vec()),
                        Some(a) => a.iter_mut().zip(gr).for_each(|(x, y)| *x += y),
                    }
                }
            }
            acc.unwrap_or_default()
        })
        .collect()
}

fn step(
    params: Vec<&mut Tensor>,
    grads: &[Vec<f32>],
    states: &mut [AdamState],
    adam: &AdamConfig,
    lr: f64,
) -> Result<(), GanError> {
    let cfg = AdamConfig { lr, ..*adam };
    for ((p, g), st) in params.into_iter().zip(grads).zip(states) {
        let g = if g.is_empty() { vec![0.0; p.numel()] } else { g.clone() };
        adam_update(p, &g, st, &cfg)?;
    }
    Ok(())
}

/// Full training run; returns the model and one log row per epoch.
pub fn train(pairs: &[TrainingPair], config: &GanConfig) -> Result<(GanModel, Vec<EpochLog>), GanError> {
    let mut trainer = Trainer::new(config, pairs)?;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        log.push(trainer.train_epoch(epoch)?);
    }
    if config.recalibrate_bn {
        trainer.recalibrate()?;
    }
    Ok((trainer.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_reference_points() {
        let cfg = GanConfig::default();
        assert_eq!(learning_rate(&cfg, 1), 2e-4);
        assert_eq!(learning_rate(&cfg, 120), 2e-4);
        assert!((learning_rate(&cfg, 160) - 1e-4).abs() < 1e-12);
        assert_eq!(learning_rate(&cfg, 200), 0.0);
    }

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..21).collect();
        let b = batches(&order, 10);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![10, 11]);
        let order: Vec<usize> = (0..1).collect();
        assert_eq!(batches(&order, 10).len(), 1);
    }
}
