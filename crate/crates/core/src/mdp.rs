//! Token-level MDP primitives.
//!
//! A state is the prompt plus every token generated so far. Actions are
//! vocabulary tokens and the transition appends the chosen token, so the
//! dynamics are deterministic. Generation ends on the end-of-sequence token
//! or when the response reaches the length cap.

use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};

/// Dense token identifier in `0..vocab.len()`.
pub type TokenId = u32;

/// A dense vocabulary with a distinguished end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    display: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize, eos: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(PadError::BadVocab(format!("need at least 2 tokens, got {size}")));
        }
        if eos as usize >= size {
            return Err(PadError::BadVocab(format!("eos id {eos} >= vocabulary size {size}")));
        }
        Ok(Self {
            size,
            eos,
            display: None,
        })
    }

    /// Attaches a token -> string table used only when rendering text.
    pub fn with_display(mut self, display: Vec<String>) -> Result<Self> {
        if display.len() != self.size {
            return Err(PadError::DimMismatch {
                expected: self.size,
                got: display.len(),
            });
        }
        self.display = Some(display);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(PadError::BadToken {
                token,
                vocab_size: self.size,
            })
        }
    }

    pub fn check_all(&self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check(t))
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> {
        0..self.size as TokenId
    }

    /// Renders tokens as text; falls back to `<id>` when no display table is set.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| match &self.display {
                Some(d) if (t as usize) < d.len() => d[t as usize].clone(),
                _ if t == self.eos => "<eos>".to_string(),
                _ => format!("<{t}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `s_t = (x, y_{1:t-1})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    prompt: Vec<TokenId>,
    generated: Vec<TokenId>,
}

impl State {
    /// Initial state for a prompt.
    pub fn new(vocab: &Vocab, prompt: Vec<TokenId>) -> Result<Self> {
        vocab.check_all(&prompt)?;
        Ok(Self {
            prompt,
            generated: Vec::new(),
        })
    }

    /// Builds a state from a prompt and a partial response.
    pub fn from_parts(vocab: &Vocab, prompt: Vec<TokenId>, generated: Vec<TokenId>) -> Result<Self> {
        vocab.check_all(&prompt)?;
        vocab.check_all(&generated)?;
        if let Some(pos) = generated.iter().position(|&t| t == vocab.eos()) {
            if pos + 1 != generated.len() {
                return Err(PadError::BadState(format!("eos at non-final position {pos}")));
            }
        }
        Ok(Self { prompt, generated })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    /// Total number of tokens (prompt plus response so far).
    pub fn len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ends_with(&self, token: TokenId) -> bool {
        self.generated.last() == Some(&token)
    }

    /// The last `n` tokens of `x ‖ y`, or fewer when the state is shorter.
    pub fn context(&self, n: usize) -> Vec<TokenId> {
        let total = self.len();
        let start = total.saturating_sub(n);
        (start..total)
            .map(|i| {
                if i < self.prompt.len() {
                    self.prompt[i]
                } else {
                    self.generated[i - self.prompt.len()]
                }
            })
            .collect()
    }
}

/// The finite-horizon token MDP: vocabulary plus response length cap `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMdp {
    pub vocab: Vocab,
    pub max_len: usize,
}

impl TokenMdp {
    pub fn new(vocab: Vocab, max_len: usize) -> Self {
        Self { vocab, max_len }
    }

    pub fn is_terminal(&self, s: &State) -> bool {
        s.ends_with(self.vocab.eos()) || s.generated.len() >= self.max_len
    }

    /// `s_{t+1} = (s_t, a_t)`. The input state is left untouched.
    pub fn transition(&self, s: &State, a: TokenId) -> Result<State> {
        self.vocab.check(a)?;
        if self.is_terminal(s) {
            return Err(PadError::TerminalState);
        }
        let mut next = s.clone();
        next.generated.push(a);
        Ok(next)
    }

    /// Folds `transition` over a response, stopping with an error if it
    /// continues past a terminal state.
    pub fn rollout(&self, prompt: Vec<TokenId>, response: &[TokenId]) -> Result<State> {
        let mut s = State::new(&self.vocab, prompt)?;
        for &a in response {
            s = self.transition(&s, a)?;
        }
        Ok(s)
    }

    pub fn trajectory(&self, s: &State) -> Trajectory {
        Trajectory {
            prompt: s.prompt.clone(),
            response: s.generated.clone(),
            terminated: s.ends_with(self.vocab.eos()),
        }
    }
}

/// A finished (or length-capped) generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    /// True when the response ended with EOS rather than the length cap.
    pub terminated: bool,
}

impl Trajectory {
    pub fn new(vocab: &Vocab, prompt: Vec<TokenId>, response: Vec<TokenId>) -> Result<Self> {
        let s = State::from_parts(vocab, prompt, response)?;
        let terminated = s.ends_with(vocab.eos());
        Ok(Self {
            prompt: s.prompt,
            response: s.generated,
            terminated,
        })
    }

    /// The response without its trailing EOS token.
    pub fn content(&self) -> &[TokenId] {
        if self.terminated {
            &self.response[..self.response.len() - 1]
        } else {
            &self.response
        }
    }

    /// Every state visited while generating the response, paired with the
    /// action taken there.
    pub fn steps(&self) -> impl Iterator<Item = (State, TokenId)> + '_ {
        (0..self.response.len()).map(move |t| {
            (
                State {
                    prompt: self.prompt.clone(),
                    generated: self.response[..t].to_vec(),
                },
                self.response[t],
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mdp() -> TokenMdp {
        TokenMdp::new(Vocab::new(8, 0).unwrap(), 8)
    }

    #[test]
    fn vocab_validation() {
        assert!(Vocab::new(1, 0).is_err());
        assert!(Vocab::new(4, 4).is_err());
        assert!(Vocab::new(2, 1).is_ok());
    }

    #[test]
    fn transition_appends() {
        let m = mdp();
        let s = State::new(&m.vocab, vec![1, 2]).unwrap();
        let next = m.transition(&s, 5).unwrap();
        assert_eq!(next.prompt(), &[1, 2]);
        assert_eq!(next.generated(), &[5]);
        assert!(s.generated().is_empty());
    }

    #[test]
    fn terminal_absorbs() {
        let m = mdp();
        let s = State::from_parts(&m.vocab, vec![1], vec![0]).unwrap();
        assert!(matches!(m.transition(&s, 3), Err(PadError::TerminalState)));
    }

    #[test]
    fn bad_token_rejected() {
        let m = mdp();
        let s = State::new(&m.vocab, vec![1]).unwrap();
        assert!(matches!(m.transition(&s, 8), Err(PadError::BadToken { .. })));
        assert!(State::new(&m.vocab, vec![9]).is_err());
    }

    #[test]
    fn terminal_conditions() {
        let m = mdp();
        let v = &m.vocab;
        assert!(!m.is_terminal(&State::new(v, vec![]).unwrap()));
        assert!(m.is_terminal(&State::from_parts(v, vec![], vec![4, 0]).unwrap()));
        let capped = State::from_parts(v, vec![], vec![3; 8]).unwrap();
        assert!(m.is_terminal(&capped));
        assert!(matches!(m.transition(&capped, 2), Err(PadError::TerminalState)));
    }

    #[test]
    fn eos_only_final() {
        let v = Vocab::new(8, 0).unwrap();
        assert!(State::from_parts(&v, vec![], vec![0, 3]).is_err());
        assert!(Trajectory::new(&v, vec![], vec![2, 0, 1]).is_err());
    }

    #[test]
    fn chained_transitions_match_prefix_slices() {
        let m = mdp();
        let y = [3u32, 4, 7, 1, 0];
        let mut s = State::new(&m.vocab, vec![2, 6]).unwrap();
        for t in 0..y.len() {
            let direct = State::from_parts(&m.vocab, vec![2, 6], y[..t].to_vec()).unwrap();
            assert_eq!(s, direct);
            s = m.transition(&s, y[t]).unwrap();
        }
        assert_eq!(s, m.rollout(vec![2, 6], &y).unwrap());
        assert!(m.is_terminal(&s));
    }

    #[test]
    fn context_spans_prompt_and_response() {
        let v = Vocab::new(8, 0).unwrap();
        let s = State::from_parts(&v, vec![1, 2], vec![3]).unwrap();
        assert_eq!(s.context(2), vec![2, 3]);
        assert_eq!(s.context(5), vec![1, 2, 3]);
        assert_eq!(s.context(0), Vec::<TokenId>::new());
    }

    #[test]
    fn trajectory_steps_and_content() {
        let v = Vocab::new(8, 0).unwrap();
        let t = Trajectory::new(&v, vec![1], vec![4, 5, 0]).unwrap();
        assert!(t.terminated);
        assert_eq!(t.content(), &[4, 5]);
        let steps: Vec<_> = t.steps().collect();
        assert_eq!(steps.len(), 3);
        assert_eq!(steps[2].0.generated(), &[4, 5]);
        assert_eq!(steps[2].1, 0);
    }
}
