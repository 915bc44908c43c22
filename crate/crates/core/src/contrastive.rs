//! Contrastive objective: FIFO key queues and the two-term InfoNCE loss over
//! weak/strong views, plus the combined classification + contrastive loss.

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{r, Real, Tensor};

/// Default temperature for the InfoNCE logits.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
/// Default weight of the contrastive term in the combined loss.
pub const DEFAULT_LAMBDA_C: f64 = 0.5;
/// Keys pushed into a queue must be unit rows to within this tolerance.
pub const QUEUE_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub temperature: f64,
    pub lambda_c: f64,
    /// When true the positive key is also counted among the negatives in the
    /// InfoNCE denominator. Off by default: the positive already contributes
    /// through its own logit.
    pub include_positive_in_negatives: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            temperature: DEFAULT_TEMPERATURE,
            lambda_c: DEFAULT_LAMBDA_C,
            include_positive_in_negatives: false,
        }
    }
}

/// Fixed-capacity FIFO of unit-norm key embeddings, oldest evicted first.
#[derive(Clone, Debug)]
pub struct KeyQueue<T> {
    dim: usize,
    capacity: usize,
    /// Row-major [len x dim], index 0 = oldest.
    rows: Vec<T>,
}

impl<T: Real> KeyQueue<T> {
    pub fn new(dim: usize, capacity: usize) -> Self {
        assert!(dim > 0 && capacity > 0);
        KeyQueue {
            dim,
            capacity,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Queue contents as an [len x dim] tensor (oldest row first).
    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.len(), self.dim], self.rows.clone()).unwrap()
    }

    /// Push a batch of keys ([n x dim]); evicts oldest rows beyond capacity.
    /// Rejects rows whose l2 norm deviates from 1 by more than
    /// [`QUEUE_NORM_TOL`].
    pub fn enqueue(&mut self, keys: &Tensor<T>) -> Result<()> {
        let shape = keys.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(CoreError::DimensionMismatch(format!(
                "enqueue expects [n x {}], got {:?}",
                self.dim, shape
            )));
        }
        for (i, row) in keys.data().chunks(self.dim).enumerate() {
            let norm = row
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            let deviation = (norm - 1.0).abs();
            if deviation > QUEUE_NORM_TOL {
                return Err(CoreError::NonUnitKey { row: i, deviation });
            }
        }
        self.rows.extend_from_slice(keys.data());
        let max = self.capacity * self.dim;
        if self.rows.len() > max {
            let excess = self.rows.len() - max;
            self.rows.drain(..excess);
        }
        Ok(())
    }
}

/// The pair of queues used by the two-term loss: one fed by weak-view keys,
/// one by strong-view keys.
#[derive(Clone, Debug)]
pub struct KeyQueuePair<T> {
    pub weak: KeyQueue<T>,
    pub strong: KeyQueue<T>,
}

impl<T: Real> KeyQueuePair<T> {
    pub fn new(dim: usize, capacity: usize) -> Self {
        KeyQueuePair {
            weak: KeyQueue::new(dim, capacity),
            strong: KeyQueue::new(dim, capacity),
        }
    }
}

/// InfoNCE on the tape: `q` [n x d] differentiable queries (unit rows),
/// `k_pos` [n x d] constant positive keys, `queue` negatives. With an empty
/// queue (and positives excluded from the denominator) the softmax is over a
/// single logit, so the loss is exactly zero.
pub fn info_nce<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k_pos: &Tensor<T>,
    queue: &KeyQueue<T>,
    weights: &LossWeights,
) -> Result<Var> {
    if weights.temperature <= 0.0 {
        return Err(CoreError::NonPositiveTemperature(weights.temperature));
    }
    let n = tape.shape(q)[0];
    let kp = tape.constant(k_pos);
    let pos = tape.row_dot(q, kp)?; // [n x 1]
    let mut parts = vec![pos];
    if weights.include_positive_in_negatives {
        parts.push(pos);
    }
    if !queue.is_empty() {
        let qt = tape.constant(&queue.as_tensor());
        parts.push(tape.matmul_nt(q, qt)?); // [n x len]
    }
    let logits = tape.concat_cols(&parts)?;
    let scaled = tape.scale(logits, r::<T>(1.0 / weights.temperature));
    tape.softmax_cross_entropy(scaled, &vec![0usize; n])
}

/// The two-term contrastive loss of one step, averaged over both directions:
/// weak queries against strong keys (with the strong queue) plus strong
/// queries against weak keys (with the weak queue), halved.
pub fn contrastive_pair_loss<T: Real>(
    tape: &mut Tape<T>,
    q_weak: Var,
    q_strong: Var,
    k_weak: &Tensor<T>,
    k_strong: &Tensor<T>,
    queues: &KeyQueuePair<T>,
    weights: &LossWeights,
) -> Result<Var> {
    let a = info_nce(tape, q_weak, k_strong, &queues.strong, weights)?;
    let b = info_nce(tape, q_strong, k_weak, &queues.weak, weights)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, r::<T>(0.5)))
}

/// combined = classification + lambda_c * contrastive.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    classification: Var,
    contrastive: Var,
    lambda_c: f64,
) -> Result<Var> {
    let scaled = tape.scale(contrastive, r::<T>(lambda_c));
    tape.add(classification, scaled)
}

/// Per-sample contrastive score used by the high-contrastive selector: the
/// InfoNCE cross-entropy of each sample on its own, computed without grads.
/// `q` and `k_pos` are [n x d] value tensors; returns one score per row.
pub fn per_sample_contrastive_scores<T: Real>(
    q: &Tensor<T>,
    k_pos: &Tensor<T>,
    queue: &KeyQueue<T>,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    if weights.temperature <= 0.0 {
        return Err(CoreError::NonPositiveTemperature(weights.temperature));
    }
    if q.shape() != k_pos.shape() || q.shape().len() != 2 {
        return Err(CoreError::DimensionMismatch(format!(
            "score expects matching [n x d] inputs, got {:?} and {:?}",
            q.shape(),
            k_pos.shape()
        )));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if d != queue.dim() {
        return Err(CoreError::DimensionMismatch(format!(
            "queue dim {} vs embedding dim {}",
            queue.dim(),
            d
        )));
    }
    let inv_t = 1.0 / weights.temperature;
    let queue_rows = queue.as_tensor();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let qi = &q.data()[i * d..(i + 1) * d];
        let ki = &k_pos.data()[i * d..(i + 1) * d];
        let dot = |a: &[T], b: &[T]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.to_f64() * y.to_f64())
                .sum::<f64>()
        };
        let mut logits = vec![dot(qi, ki) * inv_t];
        if weights.include_positive_in_negatives {
            logits.push(logits[0]);
        }
        for neg in queue_rows.data().chunks(d.max(1)) {
            if neg.is_empty() {
                break;
            }
            logits.push(dot(qi, neg) * inv_t);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        out.push(lse - logits[0]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor<f64> {
        let d = rows[0].len();
        let mut data = Vec::new();
        for row in rows {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / n));
        }
        Tensor::new(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn empty_queue_gives_zero_loss() {
        let k = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let queue = KeyQueue::<f64>::new(2, 4);
        let mut tape = Tape::new();
        let qv = tape.constant(&k);
        let loss = info_nce(&mut tape, qv, &k, &queue, &LossWeights::default()).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn orthogonal_negatives_give_closed_form_loss() {
        // q = k_pos = e1; n orthogonal negatives e2. All cosine similarities
        // to the positive are 1 and to each negative 0, so after dividing by
        // temperature the loss is ln(1 + n*exp(-1/t)).
        let t = LossWeights::default().temperature;
        for n in [1usize, 3, 7] {
            let q = unit_rows(&[vec![1.0, 0.0]]);
            let mut queue = KeyQueue::<f64>::new(2, 64);
            for _ in 0..n {
                queue.enqueue(&unit_rows(&[vec![0.0, 1.0]])).unwrap();
            }
            let mut tape = Tape::new();
            let qv = tape.constant(&q);
            let loss = info_nce(&mut tape, qv, &q, &queue, &LossWeights::default()).unwrap();
            let want = (1.0 + n as f64 * (-1.0 / t).exp()).ln();
            assert!((tape.scalar_value(loss) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_n_plus_one() {
        // Temperature 1 and all dot products equal: softmax is uniform over
        // n+1 entries, so the loss is ln(n+1).
        let w = LossWeights {
            temperature: 1.0,
            ..LossWeights::default()
        };
        for n in [0usize, 1, 3, 255] {
            let q = unit_rows(&[vec![1.0, 0.0]]);
            let mut queue = KeyQueue::<f64>::new(2, 256);
            for _ in 0..n {
                queue.enqueue(&q).unwrap();
            }
            let mut tape = Tape::new();
            let qv = tape.constant(&q);
            let loss = info_nce(&mut tape, qv, &q, &queue, &w).unwrap();
            let want = ((n + 1) as f64).ln();
            assert!(
                (tape.scalar_value(loss) - want).abs() < 1e-9,
                "n={n}: got {} want {want}",
                tape.scalar_value(loss)
            );
        }
    }

    #[test]
    fn combined_loss_closed_form() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(&Tensor::scalar(1.0));
        let k = tape.constant(&Tensor::scalar(2.0));
        let total = combined_loss(&mut tape, c, k, 0.5).unwrap();
        assert_eq!(tape.scalar_value(total), 2.0);
    }

    #[test]
    fn queue_is_fifo_with_eviction() {
        let mut q = KeyQueue::<f64>::new(2, 3);
        let e1 = unit_rows(&[vec![1.0, 0.0]]);
        let e2 = unit_rows(&[vec![0.0, 1.0]]);
        q.enqueue(&e1).unwrap();
        q.enqueue(&e1).unwrap();
        q.enqueue(&e2).unwrap();
        assert_eq!(q.len(), 3);
        q.enqueue(&e2).unwrap(); // evicts the oldest e1
        assert_eq!(q.len(), 3);
        let t = q.as_tensor();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn queue_rejects_non_unit_rows() {
        let mut q = KeyQueue::<f64>::new(2, 3);
        let bad = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        match q.enqueue(&bad) {
            Err(CoreError::NonUnitKey { row: 0, .. }) => {}
            other => panic!("expected NonUnitKey, got {other:?}"),
        }
        assert!(q.is_empty());
    }

    #[test]
    fn batch_enqueue_beyond_capacity_keeps_newest() {
        let mut q = KeyQueue::<f64>::new(2, 2);
        let batch = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        q.enqueue(&batch).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.as_tensor().data(), &[0.0, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn per_sample_scores_match_tape_loss_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, d) = (5, 4);
        let rand_unit = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize| {
            let raw: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            unit_rows(&raw)
        };
        let q = rand_unit(&mut rng, n);
        let k = rand_unit(&mut rng, n);
        let mut queue = KeyQueue::<f64>::new(d, 16);
        queue.enqueue(&rand_unit(&mut rng, 6)).unwrap();
        let w = LossWeights::default();
        let scores = per_sample_contrastive_scores(&q, &k, &queue, &w).unwrap();
        let mut tape = Tape::new();
        let qv = tape.constant(&q);
        let loss = info_nce(&mut tape, qv, &k, &queue, &w).unwrap();
        let mean = scores.iter().sum::<f64>() / n as f64;
        assert!((tape.scalar_value(loss) - mean).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let q = unit_rows(&[vec![1.0, 0.0]]);
        let queue = KeyQueue::<f64>::new(2, 4);
        let w = LossWeights {
            temperature: 0.0,
            ..LossWeights::default()
        };
        let mut tape = Tape::new();
        let qv = tape.constant(&q);
        assert!(matches!(
            info_nce(&mut tape, qv, &q, &queue, &w),
            Err(CoreError::NonPositiveTemperature(_))
        ));
    }
}
