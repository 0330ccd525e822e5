use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{layers, Checkpoint, ModelConfig, Weights};
use crate::ops::Backend;
use crate::rng::{derive_seed, seeded};
use crate::train::{adamw_step, clip_global_norm, cosine_lr, AdamState, Batch, Corpus, TrainConfig};
use crate::Scalar;
use ndarray::Array2;
use std::path::Path;
use std::time::Instant;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<MetricRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Mean cross-entropy of `batch` and its gradient for every tensor.
pub fn loss_and_gradients<T: Scalar>(
    cfg: &ModelConfig,
    weights: &Weights<Array2<T>>,
    batch: &Batch,
) -> Result<(T, Weights<Array2<T>>)> {
    let tape = Tape::new();
    let vars = weights.map(&mut |_, m| tape.param(m.clone()));
    let (logits, _) = layers::forward(&tape, &vars, cfg, &batch.inputs, batch.seq_len, false);
    let loss = tape.cross_entropy(&logits, &batch.targets);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let mut grads = tape.backward(loss)?;
    let g = vars.map(&mut |_, &v| grads.take(v).unwrap_or_else(|| Array2::zeros(tape.value(v).dim())));
    Ok((value, g))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from("step,loss,lr,tokens_per_sec\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{:.1}\n", r.step, r.loss, r.lr, r.tokens_per_sec));
    }
    write_atomic(path, text.as_bytes())
}

/// Directory of the periodic checkpoint written after `step` steps.
pub fn periodic_checkpoint_dir(out: &Path, step: u64) -> std::path::PathBuf {
    out.join(format!("{CHECKPOINT_DIR}_{step:06}"))
}

fn persist<T: Scalar>(out: Option<&Path>, ck: &Checkpoint<T>, metrics: &[MetricRow], periodic: bool) -> Result<()> {
    if let Some(dir) = out {
        if periodic {
            ck.save(&periodic_checkpoint_dir(dir, ck.step))?;
        } else {
            ck.save(&dir.join(CHECKPOINT_DIR))?;
        }
        write_metrics(&dir.join(METRICS_FILE), metrics)?;
    }
    Ok(())
}

/// Next-token training from `init` (or a fresh initialization) up to
/// `total_steps`. Batches depend only on the seed and step index, so a
/// resumed run sees the same data as an uninterrupted one.
///
/// On a non-finite loss the last good checkpoint is written and the run
/// aborts with [`Error::NonFiniteLoss`].
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    init: Option<Checkpoint<T>>,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: cfg.seq_len,
            max: model_cfg.max_seq_len,
        });
    }
    let mut ck = match init {
        Some(ck) => {
            if &ck.config != model_cfg {
                return Err(Error::invalid("checkpoint configuration differs from the model configuration"));
            }
            ck
        }
        None => Checkpoint::new(model_cfg.clone(), Weights::init(model_cfg, derive_seed(cfg.seed, 0))),
    };
    let mut state = ck.optimizer.take().unwrap_or_else(|| AdamState::new(&ck.weights));
    let data_seed = derive_seed(cfg.seed, 1);
    let mut metrics = Vec::new();
    let start = ck.step as usize;
    for step in start..cfg.total_steps {
        let timer = Instant::now();
        let batch = corpus.sample_batch(&mut seeded(derive_seed(data_seed, step as u64)), cfg.batch_size, cfg.seq_len)?;
        let (loss, mut grads) = match loss_and_gradients(model_cfg, &ck.weights, &batch) {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { .. }) | Err(Error::NonFiniteGradient { .. }) => {
                ck.optimizer = Some(state);
                persist(out, &ck, &metrics, false)?;
                return Err(Error::NonFiniteLoss { step });
            }
            Err(e) => return Err(e),
        };
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cosine_lr(step + 1, cfg);
        adamw_step(&mut ck.weights, &grads, &mut state, lr, cfg);
        ck.step += 1;
        let secs = timer.elapsed().as_secs_f64().max(1e-9);
        metrics.push(MetricRow {
            step,
            loss: loss.as_f64(),
            lr,
            tokens_per_sec: batch.inputs.len() as f64 / secs,
        });
        if cfg.checkpoint_every > 0 && ck.step % cfg.checkpoint_every as u64 == 0 && (ck.step as usize) < cfg.total_steps {
            ck.optimizer = Some(state.clone());
            persist(out, &ck, &metrics, true)?;
        }
    }
    ck.optimizer = Some(state);
    persist(out, &ck, &metrics, false)?;
    Ok(TrainOutcome { checkpoint: ck, metrics })
}
