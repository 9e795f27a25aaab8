//! Desk-scale language models.
//!
//! [`NGramLM`] is the frozen base model: a Laplace-smoothed count model over
//! the last `order - 1` tokens. [`FactoredLM`] holds `dims` independent
//! softmax heads over the same kind of tabular context and plays both the
//! trainable feature backbone and the frozen reference of the reward model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, Provenance};
use crate::error::{PadError, Result};
use crate::mdp::{State, TokenId, Trajectory, Vocab};

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Writes `log softmax(logits)` into `out`.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Count-based n-gram model with add-α smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramLM {
    vocab: Vocab,
    order: usize,
    alpha: f64,
    #[serde(with = "artifact::table")]
    counts: BTreeMap<Vec<TokenId>, Vec<u64>>,
}

impl NGramLM {
    /// Counts every `(context, next token)` pair over the responses of the
    /// corpus, EOS included. Contexts reach back into the prompt.
    pub fn train(corpus: &[Trajectory], vocab: &Vocab, order: usize, alpha: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(PadError::EmptyCorpus);
        }
        if order == 0 {
            return Err(PadError::BadSpec("n-gram order must be >= 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PadError::BadSpec(format!(
                "smoothing constant must be > 0, got {alpha}"
            )));
        }
        let mut counts: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
        for traj in corpus {
            vocab.check_all(&traj.prompt)?;
            vocab.check_all(&traj.response)?;
            for (state, action) in traj.steps() {
                let row = counts
                    .entry(state.context(order - 1))
                    .or_insert_with(|| vec![0; vocab.len()]);
                row[action as usize] += 1;
            }
        }
        Ok(Self {
            vocab: vocab.clone(),
            order,
            alpha,
            counts,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &BTreeMap<Vec<TokenId>, Vec<u64>> {
        &self.counts
    }

    pub fn logprobs_for_context(&self, context: &[TokenId]) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        match self.counts.get(context) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                let denom = (total as f64 + v * self.alpha).ln();
                row.iter().map(|&c| (c as f64 + self.alpha).ln() - denom).collect()
            }
            None => vec![-v.ln(); self.vocab.len()],
        }
    }

    /// `log π_LM(· | s)`.
    pub fn logprobs(&self, s: &State) -> Vec<f64> {
        self.logprobs_for_context(&s.context(self.order - 1))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        artifact::save_json(path, "ngram_lm", provenance, self)
    }

    pub fn load(path: &Path) -> Result<(Provenance, Self)> {
        artifact::load_json(path, "ngram_lm")
    }
}

/// Per-dimension log-probabilities `log π̂_j(a | s)`, a `dims × |V|` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbMatrix {
    dims: usize,
    vocab_size: usize,
    values: Vec<f64>,
}

impl LogProbMatrix {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, dim: usize) -> &[f64] {
        &self.values[dim * self.vocab_size..(dim + 1) * self.vocab_size]
    }

    pub fn get(&self, dim: usize, token: TokenId) -> f64 {
        self.values[dim * self.vocab_size + token as usize]
    }

    /// Column for one token: its log-probability under every head.
    pub fn column(&self, token: TokenId) -> Vec<f64> {
        (0..self.dims).map(|j| self.get(j, token)).collect()
    }
}

/// `dims` independent softmax heads over tabular `(order - 1)`-token contexts.
///
/// Contexts absent from the table have all-zero logits, i.e. a uniform
/// distribution in every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredLM {
    vocab: Vocab,
    order: usize,
    dims: usize,
    frozen: bool,
    /// Row-major `dims × |V|` logits per context.
    #[serde(with = "artifact::table")]
    logits: BTreeMap<Vec<TokenId>, Vec<f64>>,
}

impl FactoredLM {
    pub fn uniform(vocab: &Vocab, order: usize, dims: usize) -> Result<Self> {
        if order == 0 || dims == 0 {
            return Err(PadError::BadSpec("order and dims must be >= 1".into()));
        }
        Ok(Self {
            vocab: vocab.clone(),
            order,
            dims,
            frozen: false,
            logits: BTreeMap::new(),
        })
    }

    /// Every head reproduces the n-gram distribution: the n-gram log-probs
    /// are copied into each row as logits.
    pub fn from_ngram(lm: &NGramLM, dims: usize) -> Result<Self> {
        let mut f = Self::uniform(lm.vocab(), lm.order(), dims)?;
        for ctx in lm.counts().keys() {
            let row = lm.logprobs_for_context(ctx);
            let mut table = Vec::with_capacity(dims * row.len());
            for _ in 0..dims {
                table.extend_from_slice(&row);
            }
            f.logits.insert(ctx.clone(), table);
        }
        Ok(f)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn table(&self) -> &BTreeMap<Vec<TokenId>, Vec<f64>> {
        &self.logits
    }

    pub fn context_of(&self, s: &State) -> Vec<TokenId> {
        s.context(self.order - 1)
    }

    pub fn logprobs_for_context(&self, context: &[TokenId]) -> LogProbMatrix {
        let v = self.vocab.len();
        let mut values = vec![0.0; self.dims * v];
        match self.logits.get(context) {
            Some(logits) => {
                for j in 0..self.dims {
                    log_softmax_into(&logits[j * v..(j + 1) * v], &mut values[j * v..(j + 1) * v]);
                }
            }
            None => values.fill(-(v as f64).ln()),
        }
        LogProbMatrix {
            dims: self.dims,
            vocab_size: v,
            values,
        }
    }

    /// `log π̂(· | s)` for every head.
    pub fn logprobs(&self, s: &State) -> LogProbMatrix {
        self.logprobs_for_context(&self.context_of(s))
    }

    /// Deep copy flagged immutable.
    pub fn clone_frozen(&self) -> Self {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    /// Deep copy that can be trained.
    pub fn clone_trainable(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c
    }

    fn row_mut(&mut self, context: &[TokenId]) -> Result<&mut Vec<f64>> {
        if self.frozen {
            return Err(PadError::FrozenParameters("factored model is frozen"));
        }
        let width = self.dims * self.vocab.len();
        Ok(self.logits.entry(context.to_vec()).or_insert_with(|| vec![0.0; width]))
    }

    pub fn logit(&self, context: &[TokenId], dim: usize, token: TokenId) -> f64 {
        self.logits
            .get(context)
            .map_or(0.0, |row| row[dim * self.vocab.len() + token as usize])
    }

    pub fn set_logit(&mut self, context: &[TokenId], dim: usize, token: TokenId, value: f64) -> Result<()> {
        self.vocab.check(token)?;
        if dim >= self.dims {
            return Err(PadError::DimMismatch {
                expected: self.dims,
                got: dim + 1,
            });
        }
        let v = self.vocab.len();
        self.row_mut(context)?[dim * v + token as usize] = value;
        Ok(())
    }

    /// `logits -= lr * grad` for every context present in `grad`.
    pub fn apply_gradient(&mut self, grad: &BTreeMap<Vec<TokenId>, Vec<f64>>, lr: f64) -> Result<()> {
        for (ctx, g) in grad {
            let row = self.row_mut(ctx)?;
            if g.len() != row.len() {
                return Err(PadError::DimMismatch {
                    expected: row.len(),
                    got: g.len(),
                });
            }
            for (p, gi) in row.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        artifact::save_json(path, "factored_lm", provenance, self)
    }

    pub fn load(path: &Path) -> Result<(Provenance, Self)> {
        artifact::load_json(path, "factored_lm")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> Vocab {
        Vocab::new(n, 0).unwrap()
    }

    fn traj(v: &Vocab, prompt: &[TokenId], resp: &[TokenId]) -> Trajectory {
        Trajectory::new(v, prompt.to_vec(), resp.to_vec()).unwrap()
    }

    #[test]
    fn laplace_formula_single_sequence() {
        let v = vocab(6);
        let alpha = 0.5;
        let lm = NGramLM::train(&[traj(&v, &[], &[2, 3])], &v, 2, alpha).unwrap();
        let p = lm.logprobs_for_context(&[2])[3].exp();
        let expected = (1.0 + alpha) / (6.0 * alpha + 1.0);
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let v = vocab(7);
        let lm = NGramLM::train(&[traj(&v, &[1], &[2, 0])], &v, 3, 0.5).unwrap();
        for lp in lm.logprobs_for_context(&[5, 5]) {
            assert_eq!(lp, -(7.0f64).ln());
        }
    }

    #[test]
    fn hand_counted_three_sequence_corpus() {
        // Bigram counts after token 1: 1->2 twice, 1->3 once.
        let v = vocab(5);
        let corpus = [
            traj(&v, &[1], &[2, 0]),
            traj(&v, &[1], &[2, 0]),
            traj(&v, &[1], &[3, 0]),
        ];
        let lm = NGramLM::train(&corpus, &v, 2, 1.0).unwrap();
        let s = State::new(&v, vec![1]).unwrap();
        let p: Vec<f64> = lm.logprobs(&s).iter().map(|x| x.exp()).collect();
        assert!((p[2] - 3.0 / 8.0).abs() < 1e-15);
        assert!((p[3] - 2.0 / 8.0).abs() < 1e-15);
        assert!((p[4] - 1.0 / 8.0).abs() < 1e-15);
        // After token 2 only EOS was seen.
        let p2 = lm.logprobs_for_context(&[2])[0].exp();
        assert!((p2 - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn counts_match_independent_recount() {
        let v = vocab(9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corpus: Vec<Trajectory> = (0..40)
            .map(|_| {
                let prompt: Vec<TokenId> = (0..2).map(|_| rng.gen_range(1..9)).collect();
                let mut resp: Vec<TokenId> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(1..9)).collect();
                resp.push(0);
                traj(&v, &prompt, &resp)
            })
            .collect();
        let lm = NGramLM::train(&corpus, &v, 3, 0.5).unwrap();
        // Recount by scanning the concatenated stream directly.
        let mut recount: BTreeMap<Vec<TokenId>, Vec<u64>> = BTreeMap::new();
        for t in &corpus {
            let stream: Vec<TokenId> = t.prompt.iter().chain(&t.response).copied().collect();
            for i in t.prompt.len()..stream.len() {
                let ctx = stream[i.saturating_sub(2)..i].to_vec();
                recount.entry(ctx).or_insert_with(|| vec![0; 9])[stream[i] as usize] += 1;
            }
        }
        assert_eq!(lm.counts(), &recount);
    }

    #[test]
    fn ngram_rows_normalized() {
        let v = vocab(10);
        let corpus = [traj(&v, &[1, 2], &[3, 4, 5, 0]), traj(&v, &[2, 3], &[4, 4, 4, 0])];
        let lm = NGramLM::train(&corpus, &v, 3, 0.5).unwrap();
        for ctx in lm.counts().keys().chain(std::iter::once(&vec![9, 9])) {
            let s: f64 = lm.logprobs_for_context(ctx).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn train_errors() {
        let v = vocab(4);
        assert!(matches!(NGramLM::train(&[], &v, 2, 1.0), Err(PadError::EmptyCorpus)));
        assert!(NGramLM::train(&[traj(&v, &[], &[1])], &v, 2, 0.0).is_err());
    }

    #[test]
    fn zero_logits_are_uniform() {
        let v = vocab(8);
        let f = FactoredLM::uniform(&v, 3, 3).unwrap();
        let m = f.logprobs_for_context(&[1, 2]);
        for j in 0..3 {
            for &x in m.row(j) {
                assert_eq!(x, -(8f64).ln());
            }
        }
    }

    #[test]
    fn random_logit_rows_normalized_and_independent() {
        let v = vocab(12);
        let mut f = FactoredLM::uniform(&v, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for j in 0..3 {
            for a in 0..12 {
                f.set_logit(&[4], j, a, rng.gen_range(-5.0..5.0)).unwrap();
            }
        }
        let before = f.logprobs_for_context(&[4]);
        for j in 0..3 {
            assert!(log_sum_exp(before.row(j)).abs() < 1e-9);
        }
        f.set_logit(&[4], 1, 7, 3.3).unwrap();
        let after = f.logprobs_for_context(&[4]);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(2), after.row(2));
        assert_ne!(before.row(1), after.row(1));
    }

    #[test]
    fn reference_copies_ngram_distribution() {
        let v = vocab(6);
        let corpus = [traj(&v, &[1], &[2, 3, 0]), traj(&v, &[1], &[2, 2, 0])];
        let lm = NGramLM::train(&corpus, &v, 2, 0.5).unwrap();
        let f = FactoredLM::from_ngram(&lm, 3).unwrap();
        for ctx in [vec![1], vec![2], vec![3], vec![5]] {
            let base = lm.logprobs_for_context(&ctx);
            let m = f.logprobs_for_context(&ctx);
            for j in 0..3 {
                for a in 0..6 {
                    assert!((m.get(j, a as TokenId) - base[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frozen_clone_is_isolated() {
        let v = vocab(5);
        let mut f = FactoredLM::uniform(&v, 2, 2).unwrap();
        f.set_logit(&[1], 0, 2, 1.5).unwrap();
        let frozen = f.clone_frozen();
        assert_eq!(frozen.logprobs_for_context(&[1]), f.logprobs_for_context(&[1]));
        let snapshot = frozen.clone();
        let mut grad = BTreeMap::new();
        grad.insert(vec![1], vec![0.3; 10]);
        for _ in 0..10 {
            f.apply_gradient(&grad, 0.1).unwrap();
        }
        assert_eq!(frozen, snapshot);
        let mut frozen = frozen;
        assert!(matches!(
            frozen.set_logit(&[1], 0, 0, 1.0),
            Err(PadError::FrozenParameters(_))
        ));
        assert!(frozen.apply_gradient(&grad, 0.1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_stable() {
        let v = vocab(6);
        let mut f = FactoredLM::uniform(&v, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for ctx in 0..6u32 {
            for j in 0..2 {
                for a in 0..6 {
                    f.set_logit(&[ctx], j, a, rng.gen::<f64>() * 1e3 - 500.0).unwrap();
                }
            }
        }
        let frozen = f.clone_frozen();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        frozen.save(&p, &Provenance::default()).unwrap();
        let (_, back) = FactoredLM::load(&p).unwrap();
        assert_eq!(back, frozen);
        for (ctx, row) in frozen.table() {
            let other = &back.table()[ctx];
            assert!(row.iter().zip(other).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        let corpus = [traj(&v, &[1], &[2, 3, 0])];
        let lm = NGramLM::train(&corpus, &v, 2, 0.5).unwrap();
        let p2 = dir.path().join("lm.json");
        lm.save(&p2, &Provenance::default()).unwrap();
        assert_eq!(NGramLM::load(&p2).unwrap().1, lm);
    }
}
