use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::write_json_atomic;
use crate::model::{layers, Model};
use crate::ops::{Backend, Eager};
use crate::Scalar;
use ndarray::Array2;
use serde::Serialize;
use std::path::Path;

/// Absolute gradient of the target log-probability with respect to the
/// embedded input, scaled so its largest entry is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub tokens: Vec<usize>,
    pub target_position: usize,
    pub target_token: usize,
    pub log_prob: f64,
    /// N×d, nonnegative.
    pub values: Array2<f64>,
    /// Largest absolute gradient before normalization.
    pub raw_max: f64,
    /// Every gradient entry was zero; `values` is left all-zero.
    pub all_zero: bool,
}

#[derive(Serialize)]
struct SaliencyJson<'a> {
    tokens: &'a [usize],
    target_position: usize,
    target_token: usize,
    log_prob: f64,
    matrix: Vec<Vec<f64>>,
    normalization: &'static str,
    raw_max: f64,
    all_zero: bool,
}

impl SaliencyMap {
    pub fn write(&self, path: &Path) -> Result<()> {
        let doc = SaliencyJson {
            tokens: &self.tokens,
            target_position: self.target_position,
            target_token: self.target_token,
            log_prob: self.log_prob,
            matrix: self.values.rows().into_iter().map(|r| r.to_vec()).collect(),
            normalization: "per_sample",
            raw_max: self.raw_max,
            all_zero: self.all_zero,
        };
        write_json_atomic(path, &doc)
    }
}

fn check_target(tokens: &[usize], target_position: usize) -> Result<usize> {
    if target_position + 1 >= tokens.len() {
        return Err(Error::invalid(format!(
            "target position {target_position} has no next token in a sequence of {}",
            tokens.len()
        )));
    }
    Ok(tokens[target_position + 1])
}

/// `log p(target | embedded)` at `target_position`, evaluated from given
/// embedding rows rather than token ids.
pub fn target_log_prob<T: Scalar>(
    model: &Model<T>,
    embedded: &Array2<T>,
    target_position: usize,
    target_token: usize,
) -> Result<T> {
    let n = embedded.nrows();
    if embedded.ncols() != model.config.d_model || n == 0 || target_position >= n {
        return Err(Error::shape(
            "target_log_prob",
            format!("embedded {:?}, target row {target_position}", embedded.dim()),
        ));
    }
    if n > model.config.max_seq_len {
        return Err(Error::SequenceTooLong { len: n, max: model.config.max_seq_len });
    }
    if target_token >= model.config.vocab_size {
        return Err(Error::TokenOutOfRange { id: target_token, vocab: model.config.vocab_size });
    }
    let (logits, _) = layers::forward_embedded(&Eager, &model.weights, &model.config, embedded.clone(), n, false);
    Ok(Eager.log_prob(&logits, target_position, target_token)[[0, 0]])
}

/// Saliency of every input token and channel for predicting
/// `tokens[target_position + 1]` at `target_position`.
pub fn saliency<T: Scalar>(model: &Model<T>, tokens: &[usize], target_position: usize) -> Result<SaliencyMap> {
    let target_token = check_target(tokens, target_position)?;
    model.check_tokens(tokens, tokens.len())?;
    let tape = Tape::new();
    let weights = model.weights.map(&mut |_, m| tape.constant(m.clone()));
    let embedded = tape.param(Eager.gather_rows(&model.weights.tok_emb, tokens));
    let (logits, _) = layers::forward_embedded(&tape, &weights, &model.config, embedded, tokens.len(), false);
    let lp = tape.log_prob(&logits, target_position, target_token);
    let log_prob = tape.scalar(lp).as_f64();
    let grads = tape.backward(lp)?;
    let g = grads
        .get(embedded)
        .map(|g| g.mapv(|x| x.as_f64().abs()))
        .unwrap_or_else(|| Array2::zeros((tokens.len(), model.config.d_model)));
    let raw_max = g.iter().copied().fold(0.0f64, f64::max);
    let all_zero = raw_max == 0.0;
    let values = if all_zero { g } else { g / raw_max };
    Ok(SaliencyMap {
        tokens: tokens.to_vec(),
        target_position,
        target_token,
        log_prob,
        values,
        raw_max,
        all_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            reduction_r: 4,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn positions_after_target_are_exactly_zero() {
        let m = model();
        let tokens: Vec<usize> = vec![10, 20, 30, 40, 50, 60, 70, 80];
        let s = saliency(&m, &tokens, 4).unwrap();
        assert!(!s.all_zero);
        assert_eq!(s.target_token, 60);
        for row in 5..tokens.len() {
            assert!(s.values.row(row).iter().all(|&v| v == 0.0));
        }
        assert!(s.values.iter().all(|&v| v >= 0.0));
        assert_eq!(s.values.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn zero_model_yields_flagged_zero_map() {
        let mut m = model();
        m.weights.lm_head.fill(0.0);
        let s = saliency(&m, &[1, 2, 3, 4], 1).unwrap();
        assert!(s.all_zero);
        assert!(s.values.iter().all(|&v| v == 0.0));
        assert_eq!(s.raw_max, 0.0);
    }

    #[test]
    fn last_position_has_no_target() {
        let m = model();
        assert!(saliency(&m, &[1, 2, 3], 2).is_err());
    }

    #[test]
    fn log_prob_matches_eager_path() {
        let m = model();
        let tokens = vec![3, 1, 4, 1, 5, 9];
        let s = saliency(&m, &tokens, 2).unwrap();
        let emb = Eager.gather_rows(&m.weights.tok_emb, &tokens);
        let lp = target_log_prob(&m, &emb, 2, tokens[3]).unwrap();
        assert!((lp - s.log_prob).abs() < 1e-12);
    }
}
