//! Fixtures and exact oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use asrtts::autodiff::Tape;
use asrtts::cycle::{Baseline, CycleConfig};
use asrtts::models::{Asr, AsrConfig, FeatureSeq, Lm, LmConfig, TokenSeq, Tts, TtsConfig, EOS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const K: usize = 3;
pub const MAX_LEN: usize = 2;

/// Tiny K=3 models and one utterance, with the end symbol made unlikely at
/// the first step so the all-empty sample set is negligible.
pub struct Fixture {
    pub asr: Asr,
    pub tts: Tts,
    pub lm: Lm,
    pub x: FeatureSeq,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acfg = AsrConfig {
            vocab: K,
            feat_dim: 2,
            enc_hidden: 2,
            att_dim: 2,
            dec_hidden: 3,
            embed: 2,
        };
        let mut asr = Asr::with_init(acfg, 0.8, &mut rng);
        let ob = asr.params().find("dec.out.b").expect("output bias");
        let mut bias = asr.params().get(ob).data().to_vec();
        bias[EOS] -= 1.5;
        asr.params_mut().set_values(ob, &bias).unwrap();

        let tcfg = TtsConfig {
            vocab: K,
            feat_dim: 2,
            embed: 2,
            hidden: 3,
            window_sharpness: 4.0,
        };
        let tts = Tts::with_init(tcfg, 0.8, &mut rng);
        let lcfg = LmConfig {
            vocab: K,
            embed: 2,
            hidden: 3,
        };
        let mut lm = Lm::with_init(lcfg, 0.8, &mut rng);
        lm.params_mut().set_frozen(true);
        let x = FeatureSeq::new(3, 2, vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.6]).unwrap();
        Fixture { asr, tts, lm, x }
    }

    pub fn cfg(&self, beta: f64, n: usize, baseline: Baseline) -> CycleConfig {
        CycleConfig {
            alpha: 1.0,
            beta,
            n_samples: n,
            max_hyp_len: MAX_LEN,
            max_frames: 10,
            baseline,
            tts_update: false,
        }
    }
}

/// One reachable output of the length-capped sampler.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub tokens: Vec<usize>,
    pub terminated: bool,
    pub prob: f64,
    pub reward: f64,
    /// ∇ log p(Y|x) over the flattened ASR parameters.
    pub score: Vec<f64>,
}

/// Every sequence the sampler can return with `max_len` steps: any non-end
/// prefix shorter than the cap followed by the end symbol, or a full-length
/// prefix cut by the cap.
pub fn reachable(k: usize, max_len: usize) -> Vec<(Vec<usize>, bool)> {
    let mut out = Vec::new();
    let mut frontier = vec![Vec::new()];
    for depth in 0..=max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            if depth == max_len {
                out.push((prefix.clone(), false));
                continue;
            }
            out.push((prefix.clone(), true));
            for t in (0..k).filter(|&t| t != EOS) {
                let mut p = prefix.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    out
}

fn log_prob_and_score(asr: &mut Asr, x: &FeatureSeq, tokens: &[usize], terminated: bool) -> (f64, Vec<f64>) {
    asr.params_mut().zero_grad();
    let mut tape = Tape::new();
    let enc = asr.encode_on(&mut tape, x).unwrap();
    let lp = asr.log_prob_on(&mut tape, &enc, tokens, terminated, None).unwrap();
    let value = tape.scalar(lp);
    tape.backward(lp).unwrap();
    tape.accumulate_param_grads(asr.params_mut());
    let g = asr.params().flat_grad();
    asr.params_mut().zero_grad();
    (value, g)
}

/// Reward R(Y) = L_TTS(x|Y) + β·L_LM(Y), both teacher-forced.
pub fn reward(f: &Fixture, tokens: &[usize], beta: f64) -> f64 {
    let y = TokenSeq::from_ids(tokens.to_vec());
    f.tts.teacher_forced_nll(&y, &f.x).unwrap().total() + beta * f.lm.nll(&y).unwrap()
}

pub fn enumerate(f: &mut Fixture, beta: f64) -> Vec<Outcome> {
    let seqs = reachable(K, MAX_LEN);
    let x = f.x.clone();
    seqs.into_iter()
        .map(|(tokens, terminated)| {
            let (lp, score) = log_prob_and_score(&mut f.asr, &x, &tokens, terminated);
            let reward = reward(f, &tokens, beta);
            Outcome {
                tokens,
                terminated,
                prob: lp.exp(),
                reward,
                score,
            }
        })
        .collect()
}

/// Σ_Y p(Y) R(Y) and Σ_Y p(Y) R(Y) ∇log p(Y).
pub fn exact_objective(outcomes: &[Outcome]) -> (f64, Vec<f64>) {
    let dim = outcomes[0].score.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; dim];
    for o in outcomes {
        value += o.prob * o.reward;
        for (g, s) in grad.iter_mut().zip(&o.score) {
            *g += o.prob * o.reward * s;
        }
    }
    (value, grad)
}

/// Exact mean and variance of the per-call estimator (value and every
/// gradient coordinate) over all N-tuples of samples, applying the same
/// baseline and degenerate-set rules as the trainer.
pub struct TupleMoments {
    pub value_mean: f64,
    pub value_var: f64,
    pub grad_mean: Vec<f64>,
    pub grad_var: Vec<f64>,
}

pub fn tuple_moments(outcomes: &[Outcome], n: usize, baseline: Baseline) -> TupleMoments {
    let m = outcomes.len();
    let dim = outcomes[0].score.len();
    let mut acc = TupleMoments {
        value_mean: 0.0,
        value_var: 0.0,
        grad_mean: vec![0.0; dim],
        grad_var: vec![0.0; dim],
    };
    let mut idx = vec![0usize; n];
    let total = m.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for slot in idx.iter_mut() {
            *slot = c % m;
            c /= m;
        }
        let p: f64 = idx.iter().map(|&i| outcomes[i].prob).product();
        let all_empty = idx.iter().all(|&i| outcomes[i].tokens.is_empty());
        let rewards: Vec<f64> = idx.iter().map(|&i| outcomes[i].reward).collect();
        let value = if all_empty {
            0.0
        } else {
            rewards.iter().sum::<f64>() / n as f64
        };
        let mut g = vec![0.0; dim];
        if !all_empty {
            let sum: f64 = rewards.iter().sum();
            for (j, &i) in idx.iter().enumerate() {
                let adv = match baseline {
                    Baseline::Mean if n > 1 => rewards[j] - (sum - rewards[j]) / (n - 1) as f64,
                    _ => rewards[j],
                };
                for (gk, s) in g.iter_mut().zip(&outcomes[i].score) {
                    *gk += adv * s / n as f64;
                }
            }
        }
        acc.value_mean += p * value;
        acc.value_var += p * value * value;
        for k in 0..dim {
            acc.grad_mean[k] += p * g[k];
            acc.grad_var[k] += p * g[k] * g[k];
        }
    }
    acc.value_var -= acc.value_mean * acc.value_mean;
    for k in 0..dim {
        acc.grad_var[k] = (acc.grad_var[k] - acc.grad_mean[k] * acc.grad_mean[k]).max(0.0);
    }
    acc
}
