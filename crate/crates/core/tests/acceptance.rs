//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each; exits non-zero if any fails.
//!
//! Run with `cargo test --release --test acceptance` (tests build with
//! optimizations anyway via the workspace test profile).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splm::autodiff::{AttentionMask, Tape, Var};
use splm::cli::run_cli_with;
use splm::corpus::{
    analytic_entropy_gap, generate_split, generate_synthetic, load_corpus, parse_token_ids, CorpusFormat,
    CorpusRegistry, NamingPolicy, StationaryMode, SyntheticSpec,
};
use splm::eval::{compare_runs, eval_lm, eval_msp, EvalOptions, SpMode};
use splm::finetune::{predict_sources, TaskDataset};
use splm::gradcheck::{check, GradcheckOptions};
use splm::model::{Architecture, ModelConfig, ModelState, TokenBatch};
use splm::persist::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, NamingRecord, Precision, RngState};
use splm::pretrain::{
    apply_mlm_masking, apply_msp_masking, pretrain, MetricsLog, Placement, PretrainConfig, Prompter,
    ReplacementRange, SpTokenMode,
};
use splm::tensor::Tensor;
use splm::tokenizer::{VocabOptions, Vocabulary, MASK};
use splm::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Result<Outcome>;

fn main() {
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "masking statistics", c2_masking),
        (3, "rho=0 equals SP disabled", c3_reduction),
        (4, "MSP learnability", c4_msp),
        (5, "SP benefit", c5_sp_benefit),
        (6, "auto SP agreement", c6_auto_sp),
        (7, "naming robustness", c7_naming),
        (8, "decoder-only post SP", c8_post_sp),
        (9, "persistence and determinism", c9_persistence),
        (10, "end-to-end CLI", c10_cli),
    ];
    // `cargo test -- <filter>` style selection by criterion number.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = match std::panic::catch_unwind(f) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e}")),
            Err(_) => Outcome::new(false, "panicked"),
        };
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} [{name}] ({:.1}s) {}",
            t.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts the output with fixed pseudo-random weights so every output
/// coordinate matters to the gradient.
fn weighted_sum(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn c1_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = GradcheckOptions::default();
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let mask = AttentionMask {
        batch: 2,
        heads: 2,
        queries: 3,
        keys: 3,
        key_valid: vec![true, true, false, true, true, true],
        causal: true,
    };
    let cases: Vec<(&str, Vec<Tensor>, LossFn)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 5])], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1], false)?;
            weighted_sum(t, y)
        })),
        ("matmul_trans_b", vec![r(&[2, 3, 4]), r(&[5, 4])], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1], true)?;
            weighted_sum(t, y)
        })),
        ("batch_matmul", vec![r(&[3, 2, 4]), r(&[3, 4, 5]), r(&[3, 5, 4])], Box::new(|t, v| {
            let a = t.batch_matmul(v[0], v[1], false)?;
            let b = t.batch_matmul(v[0], v[2], true)?;
            let y = t.add(a, b)?;
            weighted_sum(t, y)
        })),
        ("add_bias_mul_scale", vec![r(&[4, 3]), r(&[4, 3]), r(&[3])], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.add_bias(a, v[2])?;
            let c = t.mul(b, v[0])?;
            let y = t.scale(c, -1.3);
            weighted_sum(t, y)
        })),
        ("gelu", vec![r(&[5, 4])], Box::new(|t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y)
        })),
        ("layer_norm", vec![r(&[3, 6]), r(&[6]), r(&[6])], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y)
        })),
        ("softmax", vec![r(&[4, 5])], Box::new(|t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y)
        })),
        ("masked_softmax", vec![r(&[4, 3, 3])], Box::new(move |t, v| {
            let y = t.masked_softmax(v[0], mask.clone())?;
            weighted_sum(t, y)
        })),
        ("embedding", vec![r(&[6, 4])], Box::new(|t, v| {
            let y = t.embedding(v[0], &[1, 5, 1, 0])?;
            weighted_sum(t, y)
        })),
        ("split_merge_heads", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let h = t.split_heads(v[0], 2, 3, 2)?;
            let s = t.scale(h, 2.0);
            let g = t.gelu(s);
            let y = t.merge_heads(g, 2, 2)?;
            weighted_sum(t, y)
        })),
        ("cross_entropy", vec![r(&[4, 6])], Box::new(|t, v| {
            t.softmax_cross_entropy(v[0], &[Some(2), None, Some(5), Some(0)])
        })),
        ("dropout", vec![r(&[3, 4])], Box::new(move |t, v| {
            let y = t.dropout(v[0], &keep, 0.25)?;
            weighted_sum(t, y)
        })),
        ("select_rows_reshape_sum", vec![r(&[2, 3, 4])], Box::new(|t, v| {
            let a = t.select_rows(v[0], &[5, 0, 3])?;
            let b = t.reshape(a, &[4, 3])?;
            let g = t.gelu(b);
            Ok(t.sum(g))
        })),
    ];
    let mut worst = (0.0f64, "");
    for (name, params, f) in &cases {
        let rep = check(params, f, opts)?;
        if rep.max_relative_error > worst.0 {
            worst = (rep.max_relative_error, name);
        }
    }
    let mut model_worst = 0.0f64;
    let mut coords = 0;
    for arch in [Architecture::EncoderOnly, Architecture::EncoderDecoder, Architecture::DecoderOnly] {
        let mut cfg = ModelConfig::new(arch, 32);
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        cfg.max_seq_len = 8;
        let mut m = ModelState::init(cfg, 3)?;
        if arch == Architecture::EncoderOnly {
            m = m.with_classifier(3, 4)?;
        }
        let src = TokenBatch::padded(&[vec![5, 9, 1, 30, 7], vec![12, 3, 8]], 5);
        let tgt = TokenBatch::padded(&[vec![2, 11, 6], vec![2, 31]], 3);
        let targets: Vec<Option<u32>> = vec![Some(4), None, Some(17), Some(9), Some(1)];
        let rep = check(
            &m.params,
            |t, p| match arch {
                Architecture::EncoderOnly => {
                    let h = m.encoder_hidden(t, p, &src, None)?;
                    let z = m.project(t, p, h, Some(&[0, 2, 3, 5, 6]))?;
                    let lm = t.softmax_cross_entropy(z, &targets)?;
                    let c = m.classify(t, p, h, 2, 5)?;
                    let cl = t.softmax_cross_entropy(c, &[Some(2), Some(0)])?;
                    t.add(lm, cl)
                }
                Architecture::EncoderDecoder => {
                    let h = m.seq2seq_hidden(t, p, &src, &tgt, None)?;
                    let z = m.project(t, p, h, Some(&[0, 1, 2, 3, 4]))?;
                    t.softmax_cross_entropy(z, &targets)
                }
                Architecture::DecoderOnly => {
                    let h = m.causal_hidden(t, p, &src, None)?;
                    let z = m.project(t, p, h, Some(&[0, 1, 2, 5, 6]))?;
                    t.softmax_cross_entropy(z, &targets)
                }
            },
            opts,
        )?;
        model_worst = model_worst.max(rep.max_relative_error);
        coords += rep.coords_checked;
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        worst.0 <= 1e-5 && model_worst <= 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "{} primitives worst rel err {:.2e} ({}); toy models (3 archs, {coords} coords) worst {:.2e}; limit 1e-5 in < 120 s",
            cases.len(),
            worst.0,
            worst.1,
            model_worst
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2

const Z99: f64 = 2.5758293035489;

fn within_ci(hits: usize, n: usize, p: f64) -> bool {
    let rate = hits as f64 / n as f64;
    if p == 0.0 || p == 1.0 {
        return rate == p;
    }
    (rate - p).abs() <= Z99 * (p * (1.0 - p) / n as f64).sqrt()
}

fn c2_masking() -> Result<Outcome> {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_parts(&["WIKI", "BOOK", "NEWS"], words)?;
    let prompter = Prompter::new(&vocab, Placement::Start, SpTokenMode::Reserved)?;
    let replace = ReplacementRange::for_vocab(&vocab);
    let range = (replace.end - replace.start) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut positions, mut selected, mut masked, mut random, mut kept) = (0, 0, 0, 0, 0);
    let mut sample_i = 0;
    while positions < 200_000 {
        let body: Vec<u32> = (0..64).map(|_| rng.random_range(replace.start..replace.end)).collect();
        let s = prompter.prompt(&body, sample_i % 3);
        sample_i += 1;
        let m = apply_mlm_masking(&s, 0.15, replace, &mut rng);
        for i in 0..s.tokens.len() {
            if !s.body.contains(&i) {
                if m.labels[i].is_some() || m.input[i] != s.tokens[i] {
                    return Ok(Outcome::new(false, "MLM touched a prompt position"));
                }
                continue;
            }
            positions += 1;
            if m.labels[i].is_none() {
                continue;
            }
            selected += 1;
            match m.input[i] {
                MASK => masked += 1,
                x if x == s.tokens[i] => kept += 1,
                _ => random += 1,
            }
        }
    }
    // A random replacement draws the original token with chance 1/R.
    let checks = [
        ("selection", within_ci(selected, positions, 0.15)),
        ("mask", within_ci(masked, selected, 0.8)),
        ("random", within_ci(random, selected, 0.1 * (1.0 - 1.0 / range))),
        ("keep", within_ci(kept, selected, 0.1 + 0.1 / range)),
    ];
    let mut detail = format!(
        "MLM over {positions} positions: select {:.4}, mask {:.4}, random {:.4}, keep {:.4}",
        selected as f64 / positions as f64,
        masked as f64 / selected as f64,
        random as f64 / selected as f64,
        kept as f64 / selected as f64
    );
    let mut pass = checks.iter().all(|c| c.1);
    for p in [0.0, 0.15, 0.3] {
        let n = 100_000;
        let mut hits = 0;
        for j in 0..n {
            let s = prompter.prompt(&[9, 10, 11], j % 3);
            let mut m = apply_mlm_masking(&s, 0.0, replace, &mut rng);
            if apply_msp_masking(&s, &mut m, p, &mut rng)? {
                hits += 1;
                let sp = s.sp.as_ref().unwrap();
                if sp.sp_positions.iter().any(|&q| m.input[q] != MASK || m.labels[q] != Some(s.tokens[q])) {
                    return Ok(Outcome::new(false, "MSP left a prompt position unmasked"));
                }
            }
        }
        pass &= within_ci(hits, n, p);
        detail.push_str(&format!("; MSP P={p}: {:.4}", hits as f64 / n as f64));
    }
    detail.push_str(" (99% binomial CIs)");
    Ok(Outcome::new(pass, detail))
}

// ---------------------------------------------------------------------------
// 3

fn small_setup(arch: Architecture, seed: u64) -> Result<(ModelState, Vocabulary, CorpusRegistry)> {
    let spec = SyntheticSpec::disjoint(3, 8, 20, 30, 0.5, 0);
    let reg = generate_synthetic(&spec, seed)?;
    let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
    let mut cfg = ModelConfig::new(arch, vocab.len());
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 20;
    cfg.dropout = 0.1;
    Ok((ModelState::init(cfg, seed)?, vocab, reg))
}

fn c3_reduction() -> Result<Outcome> {
    let mut identical = 0;
    for arch in [Architecture::EncoderOnly, Architecture::EncoderDecoder, Architecture::DecoderOnly] {
        let (m0, vocab, reg) = small_setup(arch, 5)?;
        let base = PretrainConfig {
            steps: 25,
            batch_size: 6,
            seed: 11,
            ..Default::default()
        };
        let (mut a, mut b) = (m0.clone(), m0);
        let rho0 = PretrainConfig {
            sp_include_prob: 0.0,
            sp_mask_prob: 0.3,
            ..base.clone()
        };
        let disabled = PretrainConfig {
            source_prompts: false,
            ..base
        };
        let la = pretrain(&mut a, &vocab, &reg, &rho0)?.to_csv();
        let lb = pretrain(&mut b, &vocab, &reg, &disabled)?.to_csv();
        if la.as_bytes() == lb.as_bytes() && a.params == b.params {
            identical += 1;
        }
    }
    Ok(Outcome::new(
        identical == 3,
        format!("{identical}/3 architectures give byte-identical logs and parameters (25 steps, dropout on)"),
    ))
}

// ---------------------------------------------------------------------------
// 4

fn c4_msp() -> Result<Outcome> {
    let start = Instant::now();
    let spec = SyntheticSpec::disjoint(4, 25, 32, 500, 0.5, 0).with_heldout(50);
    let (reg, held) = generate_split(&spec, 1)?;
    let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
    let mut cfg = ModelConfig::new(Architecture::EncoderOnly, vocab.len());
    cfg.d_model = 64;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.max_seq_len = 34;
    let mut acc = Vec::new();
    for p in [0.3, 0.0] {
        let mut m = ModelState::init(cfg.clone(), 0)?;
        let pc = PretrainConfig {
            steps: 2000,
            batch_size: 16,
            sp_mask_prob: p,
            ..Default::default()
        };
        pretrain(&mut m, &vocab, &reg, &pc)?;
        acc.push(eval_msp(&m, &vocab, &held, &EvalOptions::default())?);
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        acc[0] >= 0.99 && acc[1] <= 0.35 && elapsed <= Duration::from_secs(600),
        format!(
            "held-out MSP accuracy P=0.3: {:.3} (need >= 0.99), P=0: {:.3} (need <= 0.35); 2000 steps each",
            acc[0], acc[1]
        ),
    ))
}

// ---------------------------------------------------------------------------
// 5

fn c5_sp_benefit() -> Result<Outcome> {
    let start = Instant::now();
    let spec = SyntheticSpec::shared(4, 12, 16, 400, 1.0, 3).with_heldout(100);
    let gap = analytic_entropy_gap(&spec, StationaryMode::Exact)?.gap;
    if gap < 0.10 {
        return Ok(Outcome::new(false, format!("generator entropy gap {gap:.4} < 0.10")));
    }
    let mut with_sp = Vec::new();
    let mut baseline = Vec::new();
    for seed in 1..=3u64 {
        let (reg, held) = generate_split(&spec, seed)?;
        let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
        let mut cfg = ModelConfig::new(Architecture::DecoderOnly, vocab.len());
        cfg.d_model = 32;
        cfg.d_ff = 128;
        cfg.max_seq_len = 19;
        for sp in [true, false] {
            let mut m = ModelState::init(cfg.clone(), seed)?;
            let pc = PretrainConfig {
                steps: 1500,
                batch_size: 16,
                seed,
                source_prompts: sp,
                ..Default::default()
            };
            pretrain(&mut m, &vocab, &reg, &pc)?;
            let mode = if sp { SpMode::WithSp } else { SpMode::WithoutSp };
            let loss = eval_lm(&m, &vocab, &held, mode, &EvalOptions::default())?.overall;
            if sp {
                with_sp.push(loss)
            } else {
                baseline.push(loss)
            }
        }
    }
    let cmp = compare_runs(&baseline, &with_sp)?;
    let pass = cmp.sign_consistent
        && cmp.min_difference >= 0.02
        && cmp.max_difference <= gap + 0.05
        && start.elapsed() <= Duration::from_secs(1800);
    Ok(Outcome::new(
        pass,
        format!(
            "analytic gap {gap:.4}; baseline - SP per seed {:?} (need each >= 0.02 and <= gap + 0.05), sign-consistent {}",
            cmp.differences.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>(),
            cmp.sign_consistent
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6

fn c6_auto_sp() -> Result<Outcome> {
    let spec = SyntheticSpec::shared(4, 16, 64, 300, 0.5, 3).with_heldout(50);
    let (reg, held) = generate_split(&spec, 1)?;
    let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
    let mut cfg = ModelConfig::new(Architecture::DecoderOnly, vocab.len());
    cfg.d_model = 32;
    cfg.d_ff = 128;
    cfg.max_seq_len = 67;
    let mut m = ModelState::init(cfg, 0)?;
    let pc = PretrainConfig {
        steps: 1000,
        batch_size: 16,
        ..Default::default()
    };
    pretrain(&mut m, &vocab, &reg, &pc)?;
    let mut bodies = Vec::new();
    let mut truth = Vec::new();
    for (k, d) in held.documents() {
        let post = spec.posterior(&parse_token_ids(d)?);
        if post[k] >= 0.99 {
            bodies.push(vocab.encode(d));
            truth.push(k);
        }
    }
    if truth.len() < 50 {
        return Ok(Outcome::new(false, format!("only {} confident held-out documents", truth.len())));
    }
    let pred = predict_sources(&m, &vocab, &bodies, 32)?;
    let agree = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
    Ok(Outcome::new(
        agree >= 0.95,
        format!(
            "agreement {agree:.3} (need >= 0.95) on {}/{} held-out documents of length 64 with Bayes posterior >= 0.99",
            truth.len(),
            held.total_documents()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7

fn c7_naming() -> Result<Outcome> {
    let spec = SyntheticSpec::shared(4, 12, 16, 400, 1.0, 3)
        .with_heldout(100)
        .with_names(&["WIKI", "BOOK", "NEWS", "WEB"]);

    // Reserved mode: names never reach the model.
    let (reg0, held0) = generate_split(&spec, 1)?;
    let mut logs = Vec::new();
    for pol in [NamingPolicy::abbreviation(), NamingPolicy::Alphabet] {
        let reg = reg0.with_policy(pol)?;
        let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
        let mut cfg = ModelConfig::new(Architecture::EncoderOnly, vocab.len());
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        cfg.max_seq_len = 18;
        let mut m = ModelState::init(cfg, 1)?;
        let pc = PretrainConfig {
            steps: 40,
            batch_size: 8,
            sp_mask_prob: 0.3,
            ..Default::default()
        };
        logs.push(pretrain(&mut m, &vocab, &reg, &pc)?.to_csv());
    }
    let reserved_identical = logs[0] == logs[1];

    // Textual mode: names are spelled with ordinary tokens.
    let policies = [
        NamingPolicy::Abbreviation(vec![
            "wiki".into(),
            "book corpus".into(),
            "cc news".into(),
            "open web text".into(),
        ]),
        NamingPolicy::Alphabet,
        NamingPolicy::misplaced(),
    ];
    let mut losses = vec![Vec::new(); policies.len()];
    for seed in 1..=3u64 {
        let (reg0, held0s) = if seed == 1 { (reg0.clone(), held0.clone()) } else { generate_split(&spec, seed)? };
        for (i, pol) in policies.iter().enumerate() {
            let reg = reg0.with_policy(pol.clone())?;
            let held = held0s.with_policy(pol.clone())?;
            let vocab = Vocabulary::build(
                &reg,
                &VocabOptions {
                    name_words: true,
                    ..Default::default()
                },
            )?;
            let mut cfg = ModelConfig::new(Architecture::DecoderOnly, vocab.len());
            cfg.d_model = 32;
            cfg.d_ff = 128;
            cfg.max_seq_len = 24;
            let mut m = ModelState::init(cfg, seed)?;
            let pc = PretrainConfig {
                steps: 1000,
                batch_size: 16,
                seed,
                sp_token_mode: SpTokenMode::Textual,
                ..Default::default()
            };
            pretrain(&mut m, &vocab, &reg, &pc)?;
            losses[i].push(eval_lm(&m, &vocab, &held, SpMode::WithSp, &EvalOptions::default())?.overall);
        }
    }
    let mut worst = 0.0f64;
    for a in 0..policies.len() {
        for b in a + 1..policies.len() {
            let mean_abs = losses[a].iter().zip(&losses[b]).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0;
            worst = worst.max(mean_abs);
        }
    }
    Ok(Outcome::new(
        reserved_identical && worst <= 0.02,
        format!(
            "reserved abbreviation vs alphabet logs identical: {reserved_identical}; textual worst pairwise mean |loss diff| over 3 seeds {worst:.4} (need <= 0.02)"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8

fn c8_post_sp() -> Result<Outcome> {
    let spec = SyntheticSpec::disjoint(4, 25, 32, 500, 0.5, 0).with_heldout(50);
    let (reg, held) = generate_split(&spec, 1)?;
    let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
    let mut cfg = ModelConfig::new(Architecture::DecoderOnly, vocab.len());
    cfg.d_model = 32;
    cfg.d_ff = 128;
    cfg.max_seq_len = 35;
    let mut m = ModelState::init(cfg, 0)?;
    let pc = PretrainConfig {
        steps: 600,
        batch_size: 16,
        placement: Placement::End,
        ..Default::default()
    };
    pretrain(&mut m, &vocab, &reg, &pc)?;
    let acc = eval_msp(&m, &vocab, &held, &EvalOptions::default())?;

    // Start placement: logits up to position i ignore every later token.
    let prompter = Prompter::new(&vocab, Placement::Start, SpTokenMode::Reserved)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut causal = true;
    for _ in 0..20 {
        let body: Vec<u32> = (0..20).map(|_| rng.random_range(vocab.first_base()..vocab.len() as u32)).collect();
        let s = prompter.prompt(&body, rng.random_range(0..4)).with_prefix(splm::tokenizer::BOS);
        let cut = rng.random_range(1..s.tokens.len());
        let mut other = s.tokens.clone();
        for t in &mut other[cut..] {
            *t = rng.random_range(vocab.first_base()..vocab.len() as u32);
        }
        let a = m.forward_causal(&TokenBatch::from_rows(&[s.tokens.clone()]))?;
        let b = m.forward_causal(&TokenBatch::from_rows(&[other]))?;
        let v = vocab.len();
        causal &= a.data()[..cut * v] == b.data()[..cut * v];
    }
    Ok(Outcome::new(
        acc >= 0.95 && causal,
        format!("post-body source accuracy {acc:.3} (need >= 0.95); start-placement prefix logits bitwise unchanged by later tokens: {causal}"),
    ))
}

// ---------------------------------------------------------------------------
// 9 and 10

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("splm").chain(args.iter().copied());
    let code = run_cli_with(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

struct Pipeline {
    dir: PathBuf,
    elapsed: Duration,
}

impl Pipeline {
    fn p(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }
}

/// gen-corpus → pretrain → finetune --sp-mode auto → eval, in `dir`.
fn run_pipeline(dir: &Path) -> std::result::Result<Pipeline, String> {
    let start = Instant::now();
    let pl = Pipeline {
        dir: dir.to_path_buf(),
        elapsed: Duration::ZERO,
    };
    let spec = data("acceptance.spec").display().to_string();
    let cfg = data("pretrain.cfg").display().to_string();
    let step = |args: &[&str]| -> std::result::Result<(), String> {
        let (code, _, err) = cli(args);
        if code == 0 {
            Ok(())
        } else {
            Err(format!("`{}` exited {code}: {err}", args[0]))
        }
    };
    step(&["gen-corpus", "--spec", &spec, "--out", &pl.s("corpus"), "--heldout-out", &pl.s("heldout"), "--seed", "3"])?;
    let held = load_corpus(&pl.p("heldout"), CorpusFormat::DirectoryPerSource, NamingPolicy::abbreviation())
        .map_err(|e| e.to_string())?;
    let task = TaskDataset::from_sources(&held, &["left", "left", "right", "right"], 0.25).map_err(|e| e.to_string())?;
    std::fs::write(pl.p("task.tsv"), task.to_text()).map_err(|e| e.to_string())?;
    step(&["pretrain", "--config", &cfg, "--corpus", &pl.s("corpus"), "--out", &pl.s("pre.ckpt")])?;
    step(&[
        "finetune", "--checkpoint", &pl.s("pre.ckpt"), "--task", &pl.s("task.tsv"), "--sp-mode", "auto", "--config", &cfg,
        "--out", &pl.s("ft.ckpt"),
    ])?;
    step(&[
        "eval", "--checkpoint", &pl.s("pre.ckpt"), "--corpus", &pl.s("heldout"), "--msp", "--config", &cfg, "--report",
        &pl.s("lm_report.csv"),
    ])?;
    step(&["eval", "--checkpoint", &pl.s("ft.ckpt"), "--task", &pl.s("task.tsv"), "--config", &cfg, "--report", &pl.s("task_report.csv")])?;
    Ok(Pipeline {
        elapsed: start.elapsed(),
        ..pl
    })
}

const METRIC_FILES: [&str; 4] = ["pre.ckpt.metrics.csv", "ft.ckpt.metrics.csv", "lm_report.csv", "task_report.csv"];

fn c9_persistence() -> Result<Outcome> {
    // Bitwise logits after save -> load, for both precisions.
    let dir = tempfile::tempdir().map_err(|e| splm::Error::Data(e.to_string()))?;
    let (mut m, vocab, reg) = small_setup(Architecture::EncoderOnly, 9)?;
    let pc = PretrainConfig {
        steps: 10,
        batch_size: 4,
        ..Default::default()
    };
    pretrain(&mut m, &vocab, &reg, &pc)?;
    let batch = TokenBatch::padded(&[vec![5, 9, 12, 14, 20], vec![7, 8, 6]], 5);
    let before = m.forward_encoder(&batch)?;
    let ckpt = Checkpoint {
        model: m,
        vocab,
        naming: NamingRecord {
            policy: NamingPolicy::abbreviation(),
            registered: reg.names(),
        },
        task: None,
        adam: None,
        rng: RngState::default(),
    };
    let mut bitwise = true;
    for (i, prec) in [Precision::F32, Precision::F64].into_iter().enumerate() {
        let path = dir.path().join(format!("m{i}.ckpt"));
        save_checkpoint(&ckpt, &path, prec)?;
        let after = load_checkpoint(&path)?.model.forward_encoder(&batch)?;
        bitwise &= before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    // Two full pipeline runs with equal seeds.
    let a = tempfile::tempdir().map_err(|e| splm::Error::Data(e.to_string()))?;
    let b = tempfile::tempdir().map_err(|e| splm::Error::Data(e.to_string()))?;
    let (pa, pb) = match (run_pipeline(a.path()), run_pipeline(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return Ok(Outcome::new(false, e)),
    };
    let mut same = 0;
    for f in METRIC_FILES {
        let x = std::fs::read(pa.p(f)).map_err(|e| splm::Error::Data(e.to_string()))?;
        let y = std::fs::read(pb.p(f)).map_err(|e| splm::Error::Data(e.to_string()))?;
        same += usize::from(x == y);
    }
    Ok(Outcome::new(
        bitwise && same == METRIC_FILES.len(),
        format!(
            "save/load logits bitwise identical (32- and 64-bit): {bitwise}; identical metric files across two seeded pipeline runs: {same}/{}",
            METRIC_FILES.len()
        ),
    ))
}

fn check_formats(pl: &Pipeline) -> std::result::Result<String, String> {
    let err = |e: splm::Error| e.to_string();
    for out in ["corpus", "pre.ckpt", "ft.ckpt", "lm_report.csv", "task_report.csv"] {
        let m = Manifest::load(&Manifest::path_for(&pl.p(out))).map_err(err)?;
        m.validate().map_err(err)?;
        if m.finished_unix.is_none() {
            return Err(format!("manifest for {out} was never finished"));
        }
    }
    let pre = load_checkpoint(&pl.p("pre.ckpt")).map_err(err)?;
    let ft = load_checkpoint(&pl.p("ft.ckpt")).map_err(err)?;
    if ft.task.is_none() || pre.adam.is_none() {
        return Err("checkpoint records incomplete".into());
    }
    let metrics = std::fs::read_to_string(pl.p("pre.ckpt.metrics.csv")).map_err(|e| e.to_string())?;
    let header = MetricsLog::header(pre.vocab.num_sources());
    if metrics.lines().next() != Some(header.as_str()) || metrics.lines().count() != 301 {
        return Err("pre-training metrics do not match the log format".into());
    }
    let ftm = std::fs::read_to_string(pl.p("ft.ckpt.metrics.csv")).map_err(|e| e.to_string())?;
    if !ftm.starts_with("epoch,train_loss,train_metric,val_metric\n") || !ftm.contains("# summary") {
        return Err("fine-tuning metrics do not match their format".into());
    }
    let lm = std::fs::read_to_string(pl.p("lm_report.csv")).map_err(|e| e.to_string())?;
    let sources = lm.lines().skip(1).take_while(|l| !l.is_empty()).count();
    if !lm.starts_with("source,loss,tokens\n") || sources != 4 || !lm.contains("overall_loss,") || !lm.contains("msp_accuracy,") {
        return Err("LM report does not match its format".into());
    }
    let task = std::fs::read_to_string(pl.p("task_report.csv")).map_err(|e| e.to_string())?;
    let row: Vec<&str> = task.lines().nth(1).unwrap_or("").split(',').collect();
    if !task.starts_with("split,examples,metric,value\n") || row.len() != 4 || row[3].parse::<f64>().is_err() {
        return Err("task report does not match its format".into());
    }
    let msp = lm.lines().find_map(|l| l.strip_prefix("msp_accuracy,")).unwrap_or("?");
    Ok(format!("held-out MSP accuracy {msp}, test {} {}", row[2], row[3]))
}

fn c10_cli() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| splm::Error::Data(e.to_string()))?;
    let pl = match run_pipeline(dir.path()) {
        Ok(p) => p,
        Err(e) => return Ok(Outcome::new(false, e)),
    };
    let formats = check_formats(&pl);
    let elapsed = pl.elapsed;
    Ok(match formats {
        Ok(summary) => Outcome::new(
            elapsed <= Duration::from_secs(1800),
            format!(
                "gen-corpus -> pretrain -> finetune --sp-mode auto -> eval exit 0 in {:.1}s; manifests, checkpoints, metrics and reports validate; {summary}",
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => Outcome::new(false, e),
    })
}
