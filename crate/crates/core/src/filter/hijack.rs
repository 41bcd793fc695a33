use crate::error::{Error, Result};
use crate::numerics::{mean, std_dev};
use crate::scalar::Scalar;
use crate::vit::AttentionTrace;

/// Layer-averaged attention mass received by each key of a region, with
/// population statistics over that region.
#[derive(Clone, Debug, PartialEq)]
pub struct HijackScores<T> {
    pub keys: Vec<usize>,
    pub scores: Vec<T>,
    pub mean: T,
    pub std: T,
}

impl<T: Scalar> HijackScores<T> {
    pub fn from_scores(keys: Vec<usize>, scores: Vec<T>) -> Self {
        assert_eq!(keys.len(), scores.len(), "one score per key");
        let mean = mean(&scores);
        let std = std_dev(&scores);
        Self {
            keys,
            scores,
            mean,
            std,
        }
    }

    /// `(token index, score)` pairs in key-region order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.keys.iter().copied().zip(self.scores.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn total(&self) -> T {
        self.scores.iter().fold(T::zero(), |a, &b| a + b)
    }
}

/// `h_j = (1/L) Σ_l Σ_{i ∈ queries} Ā^l[i, j]` for every `j ∈ keys`, with
/// `Ā^l` the head average of layer `l`. A token's attention to itself
/// counts towards its own score.
pub fn hijack_scores<T: Scalar>(
    trace: &AttentionTrace<T>,
    queries: &[usize],
    keys: &[usize],
) -> Result<HijackScores<T>> {
    if queries.is_empty() || keys.is_empty() {
        return Err(Error::invalid(
            "hijack scores need non-empty query and key regions",
        ));
    }
    let t = trace.tokens();
    if let Some(&bad) = queries.iter().chain(keys).find(|&&i| i >= t) {
        return Err(Error::invalid(format!(
            "token {bad} outside a {t}-token trace"
        )));
    }
    let mut h = vec![T::zero(); keys.len()];
    for l in 0..trace.num_layers() {
        let avg = trace.head_average(l);
        for &i in queries {
            let row = avg.row(i);
            for (acc, &j) in h.iter_mut().zip(keys) {
                *acc += row[j];
            }
        }
    }
    let inv = T::one() / T::of(trace.num_layers() as f64);
    for v in &mut h {
        *v *= inv;
    }
    Ok(HijackScores::from_scores(keys.to_vec(), h))
}
