use chatnmt_core::data::vocab::EOS;
use chatnmt_core::data::{
    build_context_sets, make_batch, BatchLimits, ChatExample, Dialogue, Direction, Side, Turn, Utterance,
};
use chatnmt_core::inference::{
    beam_search, greedy, length_penalty, replay_dialogue, BeamConfig, Decoder, LatentMode, ReplayMode, StepModel,
};
use chatnmt_core::latent::{prior_forward, Conditioning};
use chatnmt_core::model::{Forward, LatentSet, Model, ModelConfig};
use chatnmt_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token distribution depends only on the last token (or the start).
/// Token 0 is eos.
struct Markov {
    table: Vec<Vec<f64>>,
}

impl Markov {
    fn state(prefix: &[usize]) -> usize {
        prefix.last().copied().unwrap_or(0)
    }

    fn random(rng: &mut ChaCha8Rng, v: usize) -> Self {
        let table = (0..v)
            .map(|_| {
                let w: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| (x / s).ln()).collect()
            })
            .collect();
        Markov { table }
    }
}

impl StepModel for Markov {
    fn eos(&self) -> usize {
        0
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.table[Self::state(p)].clone()).collect())
    }
}

/// Every eos-terminated sequence of at most `max_len` tokens, with its
/// log-probability; the best by length-normalized score wins.
fn enumerate_best(m: &Markov, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
    let v = m.table.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = &m.table[Markov::state(&prefix)];
        let done = lp + row[0];
        let score = done / length_penalty(prefix.len() + 1, alpha);
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((prefix.clone(), score));
        }
        if prefix.len() + 1 < max_len {
            for (t, &l) in row.iter().enumerate().take(v).skip(1) {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((p, lp + l));
            }
        }
    }
    best.unwrap()
}

fn three_state() -> Markov {
    let ln = |p: [f64; 3]| p.iter().map(|x| x.ln()).collect::<Vec<_>>();
    // start: a is likelier than b, but b almost surely ends right after.
    Markov {
        table: vec![ln([0.1, 0.5, 0.4]), ln([0.3, 0.35, 0.35]), ln([0.9, 0.05, 0.05])],
    }
}

#[test]
fn beam_two_beats_greedy_on_three_states() {
    let mut m = three_state();
    let cfg = BeamConfig {
        beam_size: 2,
        alpha: 0.0,
        max_length: 4,
        ..BeamConfig::default()
    };
    let (best, score) = enumerate_best(&m, 4, 0.0);
    assert_eq!(best, vec![2]);
    assert!((score - (0.4f64 * 0.9).ln()).abs() < 1e-12);
    let g = greedy(&mut m, 4, 0.0).unwrap();
    assert_eq!(g.tokens[0], 1);
    assert!(g.log_prob < score);
    let b = beam_search(&mut m, &cfg).unwrap();
    assert_eq!(b.tokens, best);
    assert!(b.finished);
    assert_eq!(b.score, b.log_prob);
    assert!((b.log_prob - score).abs() < 1e-12);
}

#[test]
fn unfinished_search_returns_flagged_best_prefix() {
    let ln = |p: [f64; 3]| p.iter().map(|x| x.ln()).collect::<Vec<_>>();
    let mut m = Markov {
        table: vec![ln([0.01, 0.7, 0.29]), ln([0.01, 0.9, 0.09]), ln([0.01, 0.09, 0.9])],
    };
    let cfg = BeamConfig {
        beam_size: 2,
        max_length: 3,
        ..BeamConfig::default()
    };
    let h = beam_search(&mut m, &cfg).unwrap();
    assert!(!h.finished);
    assert_eq!(h.tokens, vec![1, 1, 1]);
    let g = greedy(&mut m, 3, 0.6).unwrap();
    assert!(!g.finished);
    assert_eq!(g.tokens, h.tokens);
}

proptest! {
    #[test]
    fn wide_beam_is_exhaustive(seed in any::<u64>(), alpha in 0.0f64..1.5, v in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Markov::random(&mut rng, v);
        let max_len = 4;
        let (best, score) = enumerate_best(&m, max_len, alpha);
        let cfg = BeamConfig { beam_size: 200, alpha, max_length: max_len, ..BeamConfig::default() };
        let h = beam_search(&mut m, &cfg).unwrap();
        prop_assert!((h.score - score).abs() < 1e-12, "{:?} {} vs {:?} {}", h.tokens, h.score, best, score);
    }

    #[test]
    fn single_beam_is_greedy(seed in any::<u64>(), alpha in 0.0f64..1.5, v in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Markov::random(&mut rng, v);
        let cfg = BeamConfig { beam_size: 1, alpha, max_length: 6, ..BeamConfig::default() };
        let b = beam_search(&mut m, &cfg).unwrap();
        let g = greedy(&mut m, 6, alpha).unwrap();
        prop_assert_eq!(b, g);
    }

    #[test]
    fn zero_alpha_scores_are_log_probabilities(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Markov::random(&mut rng, 4);
        let cfg = BeamConfig { beam_size: k, alpha: 0.0, max_length: 5, ..BeamConfig::default() };
        let h = beam_search(&mut m, &cfg).unwrap();
        prop_assert_eq!(h.score, h.log_prob);
        prop_assert!(h.log_prob <= 0.0);
        prop_assert!(!h.tokens.contains(&0));
    }
}

fn tiny(latents: Option<LatentSet>) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        latent_dim: 4,
        vocab_size: 11,
        num_roles: 2,
        max_turns: 4,
        max_positions: 16,
        dropout: 0.0,
        label_smoothing: 0.0,
        latents,
    }
}

fn utterance(tokens: Vec<usize>, role: usize, turn: usize, side: Side) -> Utterance {
    Utterance {
        tokens,
        role,
        turn,
        side,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(1..6);
    (0..n).map(|_| rng.random_range(6..11)).collect()
}

fn random_dialogue(rng: &mut ChaCha8Rng, turns: usize) -> Dialogue {
    Dialogue {
        id: "r".into(),
        turns: (0..turns)
            .map(|t| Turn {
                source: utterance(random_tokens(rng), t % 2, t, Side::Source),
                target: utterance(random_tokens(rng), t % 2, t, Side::Target),
            })
            .collect(),
    }
}

#[test]
fn beam_one_matches_greedy_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let latents = if i % 2 == 0 { Some(LatentSet::ALL) } else { None };
        let model = Model::new(tiny(latents), i).unwrap();
        let d = random_dialogue(&mut rng, 3);
        let ex = build_context_sets(&d, 2, Direction::Forward, 3).unwrap();
        let cfg = BeamConfig {
            beam_size: 1,
            max_length: 8,
            ..BeamConfig::default()
        };
        let mut dec = Decoder::new(&model, &ex, LatentMode::PriorMean, &mut rng).unwrap();
        let b = beam_search(&mut dec, &cfg).unwrap();
        let g = greedy(&mut dec, 8, cfg.alpha).unwrap();
        assert_eq!(b, g, "input {i}");
        assert!(b.tokens.iter().all(|&t| t < 11 && t != EOS));
    }
}

/// Teacher-forced log-probabilities of `example.y_u` from the training path.
fn teacher_forced(model: &Model, example: &ChatExample) -> Vec<Vec<f64>> {
    let limits = BatchLimits {
        max_turns: model.config.max_turns,
        max_positions: model.config.max_positions,
    };
    let batch = make_batch(&[example], vec![0], &limits).unwrap();
    let mut f = Forward::eval(model);
    let set = model.config.latents.unwrap();
    let cond = Conditioning::encode(&mut f, &batch.source, &batch.ctx_role, &batch.ctx_x, &batch.ctx_y, set).unwrap();
    let zs: Vec<_> = set
        .iter()
        .map(|k| {
            let reps = cond.reps(k).unwrap();
            prior_forward(&mut f, k, &reps).unwrap().mu
        })
        .collect();
    let h = f.decode(&batch.decoder_input, cond.h_enc, &batch.source.mask).unwrap();
    let o = f.fuse(h, &zs).unwrap();
    let logp = f.log_probs(o).unwrap();
    let v = model.config.vocab_size;
    f.graph.value(logp).data().chunks(v).map(<[f64]>::to_vec).collect()
}

#[test]
fn decoder_steps_match_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::new(tiny(Some("dia,tra".parse().unwrap())), 4).unwrap();
    let d = random_dialogue(&mut rng, 4);
    let ex = build_context_sets(&d, 3, Direction::Forward, 2).unwrap();
    let expected = teacher_forced(&model, &ex);
    let mut dec = Decoder::new(&model, &ex, LatentMode::PriorMean, &mut rng).unwrap();
    let y = &ex.y_u.tokens;
    for n in 0..=y.len() {
        let prefixes = vec![y[..n].to_vec(), y[..n].to_vec()];
        let rows = dec.next_log_probs(&prefixes).unwrap();
        for row in &rows {
            for (a, b) in row.iter().zip(&expected[n]) {
                assert!((a - b).abs() < 1e-12, "position {n}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn latent_sampling_follows_the_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::new(tiny(Some(LatentSet::ALL)), 6).unwrap();
    let d = random_dialogue(&mut rng, 2);
    let ex = build_context_sets(&d, 1, Direction::Forward, 3).unwrap();
    let rows = |mode, seed| {
        let mut dec = Decoder::new(&model, &ex, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        dec.next_log_probs(&[vec![7]]).unwrap()
    };
    assert_eq!(rows(LatentMode::PriorSample, 1), rows(LatentMode::PriorSample, 1));
    assert_ne!(rows(LatentMode::PriorSample, 1), rows(LatentMode::PriorSample, 2));
    assert_eq!(rows(LatentMode::PriorMean, 1), rows(LatentMode::PriorMean, 2));
}

fn replay_cfg() -> BeamConfig {
    BeamConfig {
        max_length: 6,
        ..BeamConfig::default()
    }
}

#[test]
fn single_turn_replay_ignores_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(tiny(Some(LatentSet::ALL)), 1).unwrap();
    let inverse = Model::new(tiny(Some(LatentSet::ALL)), 2).unwrap();
    let d = random_dialogue(&mut rng, 1);
    let outs: Vec<_> = ["gold", "self", "back"]
        .iter()
        .map(|m| {
            let mode: ReplayMode = m.parse().unwrap();
            replay_dialogue(&model, &d, Direction::Forward, mode, Some(&inverse), 3, &replay_cfg()).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
    assert_eq!(outs[0].len(), 1);
}

#[test]
fn self_replay_never_reads_earlier_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::new(tiny(Some(LatentSet::ALL)), 3).unwrap();
    let d = random_dialogue(&mut rng, 4);
    let mut corrupted = d.clone();
    for t in &mut corrupted.turns[..3] {
        t.target.tokens = vec![10, 10, 9];
    }
    let run = |d: &Dialogue, mode| replay_dialogue(&model, d, Direction::Forward, mode, None, 3, &replay_cfg()).unwrap();
    assert_eq!(run(&d, ReplayMode::SelfTranslate), run(&corrupted, ReplayMode::SelfTranslate));
    let gold = run(&d, ReplayMode::Gold);
    assert_eq!(gold[0], run(&corrupted, ReplayMode::Gold)[0]);
}

#[test]
fn replay_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = Model::new(tiny(Some(LatentSet::ALL)), 9).unwrap();
    let inverse = Model::new(tiny(None), 10).unwrap();
    let d = random_dialogue(&mut rng, 3);
    for latent in [LatentMode::PriorMean, LatentMode::PriorSample] {
        let cfg = BeamConfig {
            latent,
            ..replay_cfg()
        };
        for mode in [ReplayMode::Gold, ReplayMode::SelfTranslate, ReplayMode::BackTranslate] {
            let a = replay_dialogue(&model, &d, Direction::Reverse, mode, Some(&inverse), 2, &cfg).unwrap();
            let b = replay_dialogue(&model, &d, Direction::Reverse, mode, Some(&inverse), 2, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.iter().map(|t| t.turn).collect::<Vec<_>>(), [0, 1, 2]);
        }
    }
}

#[test]
fn back_translation_needs_a_compatible_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::new(tiny(None), 1).unwrap();
    let d = random_dialogue(&mut rng, 2);
    let cfg = replay_cfg();
    let err = replay_dialogue(&model, &d, Direction::Forward, ReplayMode::BackTranslate, None, 3, &cfg);
    assert!(matches!(err, Err(Error::Config(_))));
    let other = Model::new(
        ModelConfig {
            vocab_size: 12,
            ..tiny(None)
        },
        1,
    )
    .unwrap();
    let err = replay_dialogue(&model, &d, Direction::Forward, ReplayMode::BackTranslate, Some(&other), 3, &cfg);
    assert!(matches!(err, Err(Error::Config(_))));
    assert!("sideways".parse::<ReplayMode>().is_err());
}
