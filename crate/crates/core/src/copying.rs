//! A token-level stack of gated SSM blocks trained on selective copying.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TapeTensor};
use crate::dataio::{generate_selective_copy, SelectiveCopyData, SelectiveCopySpec};
use crate::error::{Error, Result};
use crate::optim::{batch_gradients, cosine_lr, AdamConfig, AdamState};
use crate::params::{init, ParamId, ParamStore};
use crate::ssm::{MambaBlock, SsmConfig};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CopyModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
}

impl Default for CopyModelConfig {
    fn default() -> Self {
        CopyModelConfig {
            d_model: 32,
            layers: 2,
            d_state: 16,
            d_conv: 4,
            expand: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    norm_gain: ParamId,
    norm_bias: ParamId,
    block: MambaBlock,
}

/// Embedding, pre-norm residual blocks, final norm and a vocabulary readout.
#[derive(Clone, Debug)]
pub struct CopyModel {
    pub cfg: CopyModelConfig,
    pub spec: SelectiveCopySpec,
    embed: ParamId,
    layers: Vec<Layer>,
    final_gain: ParamId,
    final_bias: ParamId,
    readout: ParamId,
    readout_bias: ParamId,
}

impl CopyModel {
    pub fn init(
        store: &mut ParamStore,
        spec: &SelectiveCopySpec,
        cfg: CopyModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if cfg.layers == 0 {
            return Err(Error::Parameter("layers must be >= 1".into()));
        }
        let (v, dm) = (spec.vocab_size, cfg.d_model);
        let embed = store.add("copy.embed", init::normal(rng, &[v, dm], 1.0));
        let ssm = SsmConfig {
            d_state: cfg.d_state,
            d_conv: cfg.d_conv,
            expand: cfg.expand,
            ..SsmConfig::new(dm)
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let prefix = format!("copy.layer{l}.");
            layers.push(Layer {
                norm_gain: store.add(format!("{prefix}norm_gain"), Tensor::ones(&[dm])),
                norm_bias: store.add(format!("{prefix}norm_bias"), Tensor::zeros(&[dm])),
                block: MambaBlock::init(store, &prefix, ssm.clone(), rng)?,
            });
        }
        Ok(CopyModel {
            spec: spec.clone(),
            embed,
            layers,
            final_gain: store.add("copy.final_gain", Tensor::ones(&[dm])),
            final_bias: store.add("copy.final_bias", Tensor::zeros(&[dm])),
            readout: store.add("copy.readout", init::linear_weight(rng, dm, v)),
            readout_bias: store.add("copy.readout_bias", Tensor::zeros(&[v])),
            cfg,
        })
    }

    /// Logits `[memorize_count, vocab]` at the marker positions.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, input: &[u32]) -> Result<TapeTensor<'t>> {
        if input.len() != self.spec.total_length() {
            return Err(Error::shape("copy model input", &[input.len()], &[self.spec.total_length()]));
        }
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let mut x = tape.param(store, self.embed).gather_rows(&ids)?;
        for layer in &self.layers {
            let normed = x.layer_norm(
                tape.param(store, layer.norm_gain),
                tape.param(store, layer.norm_bias),
                LN_EPS,
            )?;
            x = x.add(layer.block.bind(tape, store).forward(normed)?)?;
        }
        let markers = x.slice(0, self.spec.sequence_length, self.spec.total_length())?;
        markers
            .layer_norm(tape.param(store, self.final_gain), tape.param(store, self.final_bias), LN_EPS)?
            .linear(tape.param(store, self.readout), Some(tape.param(store, self.readout_bias)))
    }

    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &[u32],
        target: &[u32],
    ) -> Result<TapeTensor<'t>> {
        let labels: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        self.logits(tape, store, input)?.cross_entropy(&labels)
    }

    /// Predicted tokens at the marker positions.
    pub fn predict(&self, store: &ParamStore, input: &[u32]) -> Result<Vec<u32>> {
        let tape = Tape::new();
        let logits = self.logits(&tape, store, input)?.to_tensor();
        Ok(logits.argmax_rows().into_iter().map(|t| t as u32).collect())
    }

    /// Fraction of marker positions predicted correctly.
    pub fn token_accuracy(&self, store: &ParamStore, data: &SelectiveCopyData) -> Result<f64> {
        use rayon::prelude::*;
        let correct: Result<Vec<usize>> = data
            .inputs
            .par_iter()
            .zip(&data.targets)
            .map(|(x, y)| Ok(self.predict(store, x)?.iter().zip(y).filter(|(a, b)| a == b).count()))
            .collect();
        let total: usize = data.targets.iter().map(Vec::len).sum();
        Ok(correct?.iter().sum::<usize>() as f64 / total.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub test_count: usize,
    pub eval_every: usize,
    /// Stop early once held-out accuracy reaches this.
    pub target_accuracy: Option<f64>,
    pub time_budget: Option<Duration>,
    pub seed: u64,
}

impl Default for CopyTrainConfig {
    fn default() -> Self {
        CopyTrainConfig {
            steps: 7000,
            batch_size: 8,
            lr: 1e-2,
            lr_min: 1e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            test_count: 128,
            eval_every: 200,
            target_accuracy: None,
            time_budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CopyEval {
    pub step: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct CopyReport {
    pub evals: Vec<CopyEval>,
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub param_count: usize,
    pub elapsed: Duration,
}

/// Trains on freshly drawn sequences every step and evaluates on a fixed
/// held-out draw from an unrelated seed.
pub fn train_selective_copy(
    spec: &SelectiveCopySpec,
    model_cfg: CopyModelConfig,
    cfg: &CopyTrainConfig,
    mut on_eval: impl FnMut(&CopyEval),
) -> Result<(CopyModel, ParamStore, CopyReport)> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 || cfg.test_count == 0 {
        return Err(Error::Parameter("batch_size, eval_every and test_count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = CopyModel::init(&mut store, spec, model_cfg, &mut rng)?;
    let held_out = generate_selective_copy(spec, cfg.test_count, cfg.seed ^ 0x5eed_7e57_0000_0001)?;
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let start = Instant::now();
    let mut evals = Vec::new();
    let mut recent = Vec::new();
    let mut step = 0;
    while step < cfg.steps {
        let batch = generate_selective_copy(spec, cfg.batch_size, cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64 + 1))?;
        let pairs: Vec<(&Vec<u32>, &Vec<u32>)> = batch.inputs.iter().zip(&batch.targets).collect();
        let (loss, mut grads) = batch_gradients(&store, &pairs, |tape, store, (x, y)| model.loss(tape, store, x, y))?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step,
                msg: format!("non-finite loss {loss}"),
            });
        }
        grads.clip_global_norm(cfg.clip_norm);
        let lr = if step < cfg.warmup_steps {
            cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cosine_lr(cfg.lr, cfg.lr_min, step - cfg.warmup_steps, cfg.steps - cfg.warmup_steps)
        };
        adam.step(&mut store, &grads, lr);
        recent.push(loss);
        step += 1;

        let out_of_time = cfg.time_budget.is_some_and(|b| start.elapsed() >= b);
        if step % cfg.eval_every == 0 || step == cfg.steps || out_of_time {
            let e = CopyEval {
                step,
                train_loss: recent.iter().sum::<f64>() / recent.len() as f64,
                test_accuracy: model.token_accuracy(&store, &held_out)?,
                elapsed: start.elapsed(),
            };
            recent.clear();
            on_eval(&e);
            let done = cfg.target_accuracy.is_some_and(|t| e.test_accuracy >= t);
            evals.push(e);
            if done || out_of_time {
                break;
            }
        }
    }
    let final_accuracy = evals.last().map_or(0.0, |e| e.test_accuracy);
    let report = CopyReport {
        evals,
        steps_run: step,
        final_accuracy,
        param_count: store.scalar_count(),
        elapsed: start.elapsed(),
    };
    Ok((model, store, report))
}
