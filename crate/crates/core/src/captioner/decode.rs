use std::cmp::Ordering;

use ndarray::Array1;

use super::model::log_softmax;
use super::{CaptionModel, ModelError};
use crate::lstm::{self, LstmState};
use crate::text::{END_ID, START_ID, UNK_ID};

/// A partial or complete caption during beam search.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    /// Sum of word log probabilities, never length-normalized.
    pub logprob: f64,
    pub state: LstmState,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated word ids with END removed.
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

fn generatable(id: usize) -> bool {
    id != START_ID && id != UNK_ID
}

/// Higher logprob first; on equal scores the lexicographically lower token
/// sequence (and so the lower word id, then the shorter caption) wins.
fn rank(a_lp: f64, a_tokens: &[usize], b_lp: f64, b_tokens: &[usize]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tokens.cmp(b_tokens))
}

fn next_logprobs(
    model: &CaptionModel,
    state: &LstmState,
    word: usize,
    p: &Array1<f64>,
) -> Result<(LstmState, Array1<f64>), ModelError> {
    let x = model.weights.embed.row(word).to_owned();
    let next = lstm::lstm_step(&model.weights.lstm, state, &x, p)?;
    let logp = log_softmax(&model.logits(&next.y));
    Ok((next, logp))
}

fn check_args(model: &CaptionModel, beam_size: usize, max_len: usize) -> Result<(), ModelError> {
    if beam_size == 0 {
        return Err(ModelError::ZeroBeam);
    }
    if max_len == 0 {
        return Err(ModelError::ZeroMaxLen);
    }
    model.validate()
}

/// Beam search over unnormalized summed log probabilities.
///
/// Every live hypothesis is expanded over all words except START and UNK and
/// the best `beam_size` expansions survive. An expansion ending in END, or
/// reaching `max_len` tokens (END included), is finished and set aside. The
/// best finished hypothesis is returned.
pub fn beam_decode(
    model: &CaptionModel,
    init_feat: &Array1<f64>,
    persist_feat: Option<&Array1<f64>>,
    beam_size: usize,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    check_args(model, beam_size, max_len)?;
    let p = model.persist_input(persist_feat)?;
    let (state, _) = model.prime(init_feat, &p)?;

    let mut live = vec![BeamHypothesis {
        tokens: vec![],
        logprob: 0.0,
        state,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        let mut expansions: Vec<(f64, usize, usize, Vec<usize>)> = Vec::new();
        let mut states = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(START_ID);
            let (next, logp) = next_logprobs(model, &hyp.state, last, &p)?;
            states.push(next);
            for (w, &lp) in logp.iter().enumerate().filter(|(w, _)| generatable(*w)) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(w);
                expansions.push((hyp.logprob + lp, h, w, tokens));
            }
        }
        expansions.sort_by(|a, b| rank(a.0, &a.3, b.0, &b.3));
        expansions.truncate(beam_size);

        live = Vec::with_capacity(beam_size);
        for (logprob, h, w, tokens) in expansions {
            let done = w == END_ID || tokens.len() >= max_len;
            let hyp = BeamHypothesis {
                tokens,
                logprob,
                state: states[h].clone(),
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }

        // scores only decrease, so nothing live can overtake a better finished one
        let best_live = live.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        if best_done > best_live {
            break;
        }
    }

    let best = finished
        .into_iter()
        .min_by(|a, b| rank(a.logprob, &a.tokens, b.logprob, &b.tokens))
        .expect("search always finishes at least one hypothesis");
    let mut tokens = best.tokens;
    if tokens.last() == Some(&END_ID) {
        tokens.pop();
    }
    Ok(Decoded {
        tokens,
        logprob: best.logprob,
    })
}

/// Stepwise argmax decoding, ties to the lower word id.
pub fn greedy_decode(
    model: &CaptionModel,
    init_feat: &Array1<f64>,
    persist_feat: Option<&Array1<f64>>,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    check_args(model, 1, max_len)?;
    let p = model.persist_input(persist_feat)?;
    let (mut state, _) = model.prime(init_feat, &p)?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut last = START_ID;
    while tokens.len() < max_len {
        let (next, logp) = next_logprobs(model, &state, last, &p)?;
        let mut best = None;
        for (w, &lp) in logp.iter().enumerate() {
            if generatable(w) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((w, lp));
            }
        }
        let (w, lp) = best.expect("END is always generatable");
        logprob += lp;
        if w == END_ID {
            break;
        }
        tokens.push(w);
        last = w;
        state = next;
    }
    Ok(Decoded { tokens, logprob })
}
