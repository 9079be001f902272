//! Additive soft attention over encoder states, with dot-product scoring as
//! a configuration alternative.

use serde::{Deserialize, Serialize};

use crate::tape::{AutogradError, Tape};
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, AutogradError>;

/// How query/key relevance is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScoring {
    /// `v^T tanh(W_q q + W_k k + b)` with a learned vector `v`.
    #[default]
    Additive,
    /// Plain `q . k`.
    DotProduct,
}

/// Learned attention parameters, borrowed from the parameter set.
pub struct SoftAttentionParams<'a, F: Scalar> {
    pub wq: &'a Tensor<F>,
    pub wk: &'a Tensor<F>,
    pub bias: &'a Tensor<F>,
    pub v: &'a Tensor<F>,
    pub scoring: AttentionScoring,
}

impl<'a, F: Scalar> SoftAttentionParams<'a, F> {
    /// Key projections can be computed once per source and reused across
    /// decode steps.
    pub fn project_keys(&self, tape: &Tape<F>, keys: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        match self.scoring {
            AttentionScoring::Additive => {
                keys.iter().map(|k| tape.matmul(k, self.wk)).collect()
            }
            AttentionScoring::DotProduct => Ok(keys.to_vec()),
        }
    }
}

/// Attend over `keys` (one `[batch, hidden]` state per source position) with
/// a `[batch, hidden]` query. Returns the `[batch, hidden]` context (the
/// attention-weighted sum of states) and the `[batch, positions]` weights.
pub fn soft_attention<F: Scalar>(
    tape: &Tape<F>,
    query: &Tensor<F>,
    keys: &[Tensor<F>],
    projected_keys: &[Tensor<F>],
    params: &SoftAttentionParams<'_, F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    assert!(!keys.is_empty(), "attention requires at least one source position");
    assert_eq!(keys.len(), projected_keys.len());
    let scores: Vec<Tensor<F>> = match params.scoring {
        AttentionScoring::Additive => {
            let q_proj = tape.matmul(query, params.wq)?;
            keys.iter()
                .zip(projected_keys)
                .map(|(_, pk)| {
                    let pre = tape.bias_add(&tape.add(&q_proj, pk)?, params.bias)?;
                    tape.matmul(&tape.tanh(&pre)?, params.v)
                })
                .collect::<Result<_>>()?
        }
        AttentionScoring::DotProduct => {
            let hidden = query.last_dim();
            let ones = Tensor::full(vec![hidden, 1], F::ONE);
            keys.iter()
                .map(|k| tape.matmul(&tape.mul(query, k)?, &ones))
                .collect::<Result<_>>()?
        }
    };
    let score_refs: Vec<&Tensor<F>> = scores.iter().collect();
    let stacked = tape.concat(&score_refs, 1)?;
    let weights = tape.softmax(&stacked)?;
    let mut context: Option<Tensor<F>> = None;
    for (s, key) in keys.iter().enumerate() {
        let w_s = tape.slice_last(&weights, s, 1)?;
        let contrib = tape.row_scale(&w_s, key)?;
        context = Some(match context {
            Some(acc) => tape.add(&acc, &contrib)?,
            None => contrib,
        });
    }
    Ok((context.expect("keys are non-empty"), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::glorot_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params<F: Scalar>(
        store: &mut Vec<Tensor<F>>,
        hidden: usize,
        seed: u64,
    ) -> (usize, usize, usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.push(glorot_uniform(hidden, hidden, &mut rng));
        store.push(glorot_uniform(hidden, hidden, &mut rng));
        store.push(Tensor::zeros(vec![hidden]));
        store.push(glorot_uniform(hidden, 1, &mut rng));
        (store.len() - 4, store.len() - 3, store.len() - 2, store.len() - 1)
    }

    fn view<'a, F: Scalar>(
        store: &'a [Tensor<F>],
        idx: (usize, usize, usize, usize),
    ) -> SoftAttentionParams<'a, F> {
        SoftAttentionParams {
            wq: &store[idx.0],
            wk: &store[idx.1],
            bias: &store[idx.2],
            v: &store[idx.3],
            scoring: AttentionScoring::Additive,
        }
    }

    #[test]
    fn single_position_gets_full_weight() {
        let tape = Tape::new();
        let mut store = Vec::new();
        let idx = params::<f64>(&mut store, 4, 11);
        let p = view(&store, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Tensor<f64> = glorot_uniform(2, 4, &mut rng);
        let key: Tensor<f64> = glorot_uniform(2, 4, &mut rng);
        let keys = vec![key.clone()];
        let proj = p.project_keys(&tape, &keys).unwrap();
        let (ctx, w) = soft_attention(&tape, &q, &keys, &proj, &p).unwrap();
        assert_eq!(w.shape(), &[2, 1]);
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        for (c, k) in ctx.data().iter().zip(key.data()) {
            assert!((c - k).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_weight_uniformly() {
        let tape = Tape::new();
        let mut store = Vec::new();
        let idx = params::<f64>(&mut store, 4, 5);
        let p = view(&store, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Tensor<f64> = glorot_uniform(1, 4, &mut rng);
        let key: Tensor<f64> = glorot_uniform(1, 4, &mut rng);
        let keys = vec![key.clone(), key.clone(), key.clone()];
        let proj = p.project_keys(&tape, &keys).unwrap();
        let (_, w) = soft_attention(&tape, &q, &keys, &proj, &p).unwrap();
        for &v in w.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_a_distribution() {
        let tape = Tape::new();
        let mut store = Vec::new();
        let idx = params::<f64>(&mut store, 6, 21);
        let p = view(&store, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let q: Tensor<f64> = glorot_uniform(3, 6, &mut rng);
        let keys: Vec<Tensor<f64>> = (0..5).map(|_| glorot_uniform(3, 6, &mut rng)).collect();
        let proj = p.project_keys(&tape, &keys).unwrap();
        let (_, w) = soft_attention(&tape, &q, &keys, &proj, &p).unwrap();
        assert!(w.data().iter().all(|&v| v >= 0.0));
        for row in 0..3 {
            let sum: f64 = w.data()[row * 5..(row + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dot_product_scoring_matches_manual_softmax() {
        let tape = Tape::new();
        let hidden = 3;
        let q = Tensor::<f64>::from_vec(vec![1, hidden], vec![0.5, -1.0, 2.0]).unwrap();
        let keys = vec![
            Tensor::<f64>::from_vec(vec![1, hidden], vec![1.0, 0.0, 0.0]).unwrap(),
            Tensor::<f64>::from_vec(vec![1, hidden], vec![0.0, 1.0, 1.0]).unwrap(),
        ];
        let p = SoftAttentionParams {
            wq: &q, // unused under dot-product scoring
            wk: &q,
            bias: &q,
            v: &q,
            scoring: AttentionScoring::DotProduct,
        };
        let proj = p.project_keys(&tape, &keys).unwrap();
        let (_, w) = soft_attention(&tape, &q, &keys, &proj, &p).unwrap();
        let s0 = 0.5f64;
        let s1 = 1.0f64;
        let z = s0.exp() + s1.exp();
        assert!((w.data()[0] - s0.exp() / z).abs() < 1e-12);
        assert!((w.data()[1] - s1.exp() / z).abs() < 1e-12);
    }
}
