//! Acceptance gate. Runs as a plain binary so each criterion prints exactly
//! one PASS/FAIL line; exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use chunkcomp::analysis::{
    attention_profile, bias_report, classify_pattern, context_profile, count_outliers, count_outliers_above,
    decay_fit, entropy, sparsity_sweep, PatternLabel, SparsitySource,
};
use chunkcomp::chunker::split_chunks;
use chunkcomp::cost::{chunk_footprint, kv_bytes, max_parallel_chunks};
use chunkcomp::eviction::{
    calibration_threshold, evict_high_calibration, evict_low, BiasRegion, EvictionMode,
    EvictionPolicy, LayerRange, LayerSchedule,
};
use chunkcomp::local::encode_chunk;
use chunkcomp::model::{Model, ModelConfig, ModelWeights};
use chunkcomp::pipeline::{run_monolithic, run_pipeline, PipelineSettings};
use chunkcomp::queue::ChunkQueue;
use chunkcomp::tensor::dot;
use common::{close, random_tokens, small_config, state_with_scores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn lift<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 ---------------------------------------------------------------------------

fn full_attention_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let cfg = small_config(&mut rng);
        let model = lift(Model::from_seed(cfg, inst))?;
        let n = rng.random_range(1..=96);
        let wq = rng.random_range(1..=16);
        let w = rng.random_range(n..=(n + 8).min(128 - wq));
        let context = random_tokens(&mut rng, n, cfg.vocab_size);
        let query = random_tokens(&mut rng, wq, cfg.vocab_size);
        let mut s = PipelineSettings::new(&cfg, w);
        s.queue_capacity = rng.random_range(1..=3);
        s.max_new = rng.random_range(0..=6);
        let out = lift(run_pipeline(&model, &context, &query, &s))?;
        let mono = lift(run_monolithic(&model, &context, &query, s.max_new))?;
        for (a, b) in out.query_logits.data().iter().zip(mono.query_logits.data()) {
            ensure!(close(*a, *b, 1e-6), "instance {inst}: logit {a} vs {b}");
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
        ensure!(out.generated == mono.generated, "instance {inst}: tokens {:?} vs {:?}", out.generated, mono.generated);
        ensure!(out.truncated == mono.truncated, "instance {inst}: truncation flag differs");
        ensure!(close(out.perplexity, mono.perplexity, 1e-6), "instance {inst}: ppl {} vs {}", out.perplexity, mono.perplexity);
    }
    Ok(format!("50 instances, max relative logit error {worst:.2e}"))
}

// 2 ---------------------------------------------------------------------------

fn eviction_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for inst in 0..1000 {
        let n = rng.random_range(1..=64);
        let q = rng.random_range(1..=4);
        // Coarse values force ties.
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 4.0).collect();
        let budget = rng.random_range(1..=n + 4);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let mut want: Vec<usize> = order.into_iter().take(budget).collect();
        want.sort_unstable();
        let st = state_with_scores(vec![vec![s.clone()]], n, q);
        let kv = lift(evict_low(&st, &st.scores, budget))?;
        ensure!(kv.retained_context(0, 0) == want.as_slice(), "compression instance {inst}");
        let rows: Vec<usize> = (0..kv.heads[0][0].k.rows()).map(|r| kv.heads[0][0].k.get(r, 0) as usize).collect();
        ensure!(rows == kv.heads[0][0].retained, "compression instance {inst}: K rows do not follow the selection");
    }

    let regions = [BiasRegion::Sink, BiasRegion::Middle, BiasRegion::Recency];
    for inst in 0..1000 {
        let n_layers = rng.random_range(1..=6);
        let n = rng.random_range(1..=60);
        let mut schedule = Vec::new();
        for l in 0..n_layers {
            let picked: Vec<BiasRegion> = regions.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
            if !picked.is_empty() {
                schedule.push(LayerRange {
                    start: l,
                    end: l + 1,
                    regions: picked,
                });
            }
        }
        let mut policy = EvictionPolicy::new(n_layers, n);
        policy.schedule = LayerSchedule(schedule);
        policy.lambda_mult = rng.random_range(1.2..6.0);
        policy.sink_len = rng.random_bool(0.5).then(|| rng.random_range(0..=n));
        policy.recency_len = rng.random_bool(0.5).then(|| rng.random_range(0..=n));
        let scores: Vec<Vec<Vec<f64>>> = (0..n_layers)
            .map(|_| {
                vec![(0..n)
                    .map(|_| {
                        let base: f64 = rng.random_range(0.0..1.0);
                        if rng.random_bool(0.08) { base * 40.0 } else { base }
                    })
                    .collect()]
            })
            .collect();
        let st = state_with_scores(scores.clone(), n, 2);
        let kv = lift(evict_high_calibration(&st, &scores, &policy))?;

        // Independent region and threshold arithmetic.
        let default = n.div_ceil(10);
        let (mut sl, mut rl) = (policy.sink_len.unwrap_or(default), policy.recency_len.unwrap_or(default));
        if sl + rl > n {
            let s2 = n * sl / (sl + rl);
            rl = n - s2;
            sl = s2;
        }
        for (l, s) in scores.iter().enumerate() {
            let s = &s[0];
            let lambda = policy.lambda_mult * s.iter().sum::<f64>() / n as f64;
            let sched: Vec<BiasRegion> = policy
                .schedule
                .0
                .iter()
                .filter(|r| r.start <= l && l < r.end)
                .flat_map(|r| r.regions.clone())
                .collect();
            let evicted: BTreeSet<usize> = (0..n)
                .filter(|&j| {
                    let region = if j < sl {
                        BiasRegion::Sink
                    } else if j >= n - rl {
                        BiasRegion::Recency
                    } else {
                        BiasRegion::Middle
                    };
                    s[j] > lambda && sched.contains(&region)
                })
                .collect();
            let kept: BTreeSet<usize> = kv.retained_context(l, 0).iter().copied().collect();
            let want: BTreeSet<usize> = (0..n).filter(|j| !evicted.contains(j)).collect();
            ensure!(kept == want, "calibration instance {inst} layer {l}");
        }
    }
    Ok("1000 compression + 1000 calibration instances".into())
}

// 3 ---------------------------------------------------------------------------

fn queue_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in 0..500 {
        let len = rng.random_range(0..40);
        let cap = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..15) as f64 * 0.5).collect();
        let mut arrival: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            arrival.swap(i, rng.random_range(0..=i));
        }
        let mut q = ChunkQueue::new(cap);
        for &i in &arrival {
            lift(q.push(i, scores[i], ()))?;
        }
        let mut offline: Vec<usize> = (0..len).collect();
        offline.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        offline.truncate(cap);
        offline.sort_unstable();
        ensure!(q.retained_indices() == offline, "sequence {inst}");
        let streamed: Vec<usize> = q.retained_chunks().into_iter().map(|(i, _)| i).collect();
        ensure!(streamed == offline, "sequence {inst}: not in document order");
    }
    Ok("500 shuffled sequences".into())
}

// 4 ---------------------------------------------------------------------------

fn normalization_suite() -> Outcome {
    let mut rows_checked = 0usize;
    let mut profiles = 0usize;
    let modes = [EvictionMode::None, EvictionMode::Compression, EvictionMode::Calibration, EvictionMode::Both];
    for inst in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + inst);
        let cfg = ModelConfig {
            max_train_positions: 64,
            ..small_config(&mut rng)
        };
        let model = lift(Model::new(lift(ModelWeights::init_from_seed(cfg, inst))?.with_attention_gain(2.0)))?;
        let w = rng.random_range(8..=40);
        let wq = rng.random_range(1..=12);
        let n = rng.random_range(1..=200);
        let context = random_tokens(&mut rng, n, cfg.vocab_size);
        let query = random_tokens(&mut rng, wq, cfg.vocab_size);
        let mut s = PipelineSettings::new(&cfg, w);
        s.mode = modes[inst as usize % 4];
        s.capture = true;
        s.max_new = 200; // runs into the position budget
        s.workers = 1 + inst as usize % 3;
        let out = lift(run_pipeline(&model, &context, &query, &s))?;
        ensure!(out.truncated, "instance {inst}: decoding did not reach the budget");
        for c in &out.chunks {
            for layer in c.attention.as_ref().unwrap() {
                for a in layer {
                    for i in 0..a.rows() {
                        let sum: f64 = a.row(i).iter().sum();
                        ensure!((sum - 1.0).abs() < 1e-6, "local row sum {sum}");
                        rows_checked += 1;
                    }
                    let p = lift(context_profile(a, c.context_range.len(), out.q_obs))?;
                    ensure!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6, "context profile");
                    let all: Vec<usize> = (0..a.rows()).collect();
                    let p = lift(attention_profile(a, &all))?;
                    ensure!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6, "profile");
                    profiles += 2;
                }
            }
        }
        for layer in &out.global_attention {
            for a in layer {
                for i in 0..a.rows() {
                    let sum: f64 = a.row(i).iter().sum();
                    ensure!((sum - 1.0).abs() < 1e-6, "global row sum {sum}");
                    rows_checked += 1;
                }
            }
        }
        let report = lift(bias_report(&out, 0.1, 0.1, 5.0))?;
        for h in &report.heads {
            ensure!((h.profile.iter().sum::<f64>() - 1.0).abs() < 1e-6, "bias profile");
            let m = h.masses;
            ensure!((m.head + m.middle + m.tail - 1.0).abs() < 1e-6, "band masses");
            profiles += 1;
        }
        let top = out.max_position.ok_or("no positions recorded")?;
        ensure!(top < cfg.max_train_positions, "position {top} reached budget {}", cfg.max_train_positions);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let model = lift(Model::from_seed(ModelConfig::default(), 0))?;
    for _ in 0..200 {
        let x: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut y = x.clone();
        let pos = rng.random_range(0..128);
        lift(model.rope().rotate_row(&mut y, pos))?;
        let (nx, ny) = (dot(&x, &x).sqrt(), dot(&y, &y).sqrt());
        ensure!((nx - ny).abs() <= 1e-9, "rope norm {nx} -> {ny}");
    }
    ensure!(model.rope().rotate_row(&mut [0.0; 16], 128).is_err(), "rope accepted position 128");
    Ok(format!("{rows_checked} softmax rows, {profiles} profiles, 200 rotations"))
}

// 5 ---------------------------------------------------------------------------

fn sparsity_trend() -> Outcome {
    let widths = [64, 128, 256, 512];
    let curve = lift(sparsity_sweep(SparsitySource::synthetic(), &widths, 0.01, 20, 5))?;
    let trend = curve.trend();
    let means: Vec<String> = curve
        .summary()
        .iter()
        .map(|s| format!("{:.3}", s.effective_mean / s.w as f64))
        .collect();
    ensure!(trend.pass(), "only {}/{} trials non-increasing", trend.passing, trend.trials);
    Ok(format!("{}/{} trials, mean fractions {}", trend.passing, trend.trials, means.join(" > ")))
}

// 6 ---------------------------------------------------------------------------

fn planted_row(alpha: f64, w: usize) -> Vec<(f64, f64)> {
    let raw: Vec<f64> = (0..w).map(|d| (-alpha * d as f64).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().enumerate().map(|(d, a)| (d as f64, a / z)).collect()
}

fn decay_recovery() -> Outcome {
    let mut min_r2_noisy = f64::INFINITY;
    let mut worst_err = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for &alpha in &[0.05, 0.1, 0.3, 0.5, 1.0] {
        let pairs = planted_row(alpha, 64);
        let fit = lift(decay_fit(&pairs))?;
        let err = (fit.rate - alpha).abs() / alpha;
        worst_err = worst_err.max(err);
        ensure!(err <= 0.05 && fit.r_squared >= 0.99, "alpha {alpha}: rate {} r2 {}", fit.rate, fit.r_squared);
        for _ in 0..20 {
            let noisy: Vec<(f64, f64)> = pairs
                .iter()
                .map(|&(d, a)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (d, a * (1.0 + 0.05 * z.clamp(-3.0, 3.0)))
                })
                .collect();
            let f = lift(decay_fit(&noisy))?;
            min_r2_noisy = min_r2_noisy.min(f.r_squared);
            ensure!(f.r_squared >= 0.9, "alpha {alpha} with noise: r2 {}", f.r_squared);
        }
    }
    Ok(format!("max rate error {:.1e}, min noisy r2 {min_r2_noisy:.4}", worst_err))
}

// 7 ---------------------------------------------------------------------------

fn throughput_and_pairs() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 32,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        ff_mult: 4,
        ..ModelConfig::default()
    };
    let (w, wq, budget) = (120, 8, 64usize << 20);
    let full = chunk_footprint(&cfg, w, wq, w);
    let half = chunk_footprint(&cfg, w, wq, w / 2);
    ensure!(full.kv_fraction() >= 0.8, "kv fraction {}", full.kv_fraction());
    let (pf, ph) = (lift(max_parallel_chunks(budget, &full))?, lift(max_parallel_chunks(budget, &half))?);
    let ratio = ph as f64 / pf as f64;
    ensure!(ratio >= 1.7, "parallel chunks {pf} -> {ph}, ratio {ratio}");
    let deeper = ModelConfig { n_layers: 64, ..cfg };
    ensure!(kv_bytes(&deeper, 128) == 2 * kv_bytes(&cfg, 128), "kv bytes not linear in depth");

    let small = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        vocab_size: 32,
        max_train_positions: 128,
        ff_mult: 1,
    };
    let model = lift(Model::from_seed(small, 7))?;
    let twin = lift(Model::from_seed(ModelConfig { max_train_positions: 1024, ..small }, 7))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = vec![format!("kv {:.0}%, chunks {pf} -> {ph} ({ratio:.3}x)", 100.0 * full.kv_fraction())];
    for &(n, w, wq) in &[(960usize, 96usize, 8usize), (480, 120, 8), (1000, 100, 8)] {
        let context = random_tokens(&mut rng, n, 32);
        let query = random_tokens(&mut rng, wq, 32);
        let s = PipelineSettings::new(&small, w);
        let out = lift(run_pipeline(&model, &context, &query, &s))?;
        ensure!(
            out.cost.score_pairs_prefill == out.cost.score_pairs_prefill_expected,
            "counter {} vs closed form {}",
            out.cost.score_pairs_prefill,
            out.cost.score_pairs_prefill_expected
        );
        let before = twin.counters().score_pairs();
        let positions: Vec<usize> = (0..n).collect();
        lift(twin.forward_local(&context, &positions))?;
        let mono = twin.counters().score_pairs() - before;
        let c = lift(split_chunks(&context, &query, w, 128))?.chunk_count();
        let measured = out.cost.score_pairs_prefill as f64 / mono as f64;
        let formula = (c * (w + wq) * (w + wq)) as f64 / (n * n) as f64;
        let dev = (measured - formula).abs() / formula;
        ensure!(dev <= 0.10, "N={n} w={w}: measured {measured} vs {formula}");
        notes.push(format!("N={n},w={w}: {measured:.4} vs {formula:.4}"));
    }
    Ok(notes.join("; "))
}

// 8 ---------------------------------------------------------------------------

struct CalibrationTally {
    states: usize,
    entropy_losses: usize,
    models: u64,
}

/// Encodes random single chunks and calibrates every layer and region.
/// Outlier removal and the shared threshold rule are checked on every state;
/// entropy is only tallied. Stops after `want` states with evictions.
fn calibration_states(
    want: usize,
    seed0: u64,
    gain: std::ops::Range<f64>,
    mult: std::ops::Range<f64>,
) -> Result<CalibrationTally, String> {
    let mut t = CalibrationTally {
        states: 0,
        entropy_losses: 0,
        models: 0,
    };
    while t.states < want {
        ensure!(t.models < 20_000, "only {} states with evictions after {} models", t.states, t.models);
        let seed = seed0 + t.models;
        t.models += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            max_train_positions: 96,
            ..small_config(&mut rng)
        };
        let g = if gain.is_empty() { gain.start } else { rng.random_range(gain.clone()) };
        let model = lift(Model::new(lift(ModelWeights::init_from_seed(cfg, seed))?.with_attention_gain(g)))?;
        let w = rng.random_range(16..=80);
        let wq = rng.random_range(1..=16);
        let context = random_tokens(&mut rng, w, cfg.vocab_size);
        let query = random_tokens(&mut rng, wq, cfg.vocab_size);
        let plan = lift(split_chunks(&context, &query, w, cfg.max_train_positions))?;
        let st = lift(encode_chunk(&model, &plan, 0, 8))?;
        let mut policy = EvictionPolicy::new(cfg.n_layers, w);
        policy.schedule = LayerSchedule::all(cfg.n_layers);
        policy.lambda_mult = if mult.is_empty() { mult.start } else { rng.random_range(mult.clone()) };
        let kv = lift(evict_high_calibration(&st, &st.scores, &policy))?;
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                let s = &st.scores[l][h];
                let kept = kv.retained_context(l, h);
                if kept.len() == s.len() || t.states == want {
                    continue;
                }
                t.states += 1;
                let lambda = calibration_threshold(s, policy.lambda_mult);
                let evicted: Vec<usize> = (0..s.len()).filter(|j| !kept.contains(j)).collect();
                ensure!(evicted == count_outliers(s, policy.lambda_mult), "model {seed}: shared rule disagrees");
                let retained: Vec<f64> = kept.iter().map(|&j| s[j]).collect();
                ensure!(count_outliers_above(&retained, lambda).is_empty(), "model {seed}: outliers survive calibration");
                if entropy(&retained) < entropy(s) - 1e-12 {
                    t.entropy_losses += 1;
                    if std::env::var_os("ACCEPTANCE_DUMP").is_some() {
                        let tot: f64 = s.iter().sum();
                        let p: Vec<String> = s.iter().map(|x| format!("{:.3}", x / tot)).collect();
                        eprintln!("model {seed} l{l} h{h} mult {} evicted {evicted:?} H {:.4} -> {:.4}\n  p = [{}]", policy.lambda_mult, entropy(s), entropy(&retained), p.join(", "));
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Outlier removal and the shared rule are hard requirements. The entropy
/// claim is false in general: evicting an outlier can hand its share to a
/// runner-up just under the threshold (S = [10, 9, 1, 1] with multiplier 1.5
/// drops from 1.01 to ln 2 nats). Entropy losses therefore come back as
/// `Ok(Err(..))` and are reported as the documented expected failure.
fn calibration_property() -> Result<Result<String, String>, String> {
    // Default initialization and the default multiplier of 5.
    let gate = calibration_states(200, 80_000, 1.0..1.0, 5.0..5.0)?;
    // Sharper heads and lower multipliers.
    let stress = calibration_states(200, 90_000, 1.0..4.0, 1.5..5.0)?;
    let detail = format!(
        "outliers always removed; entropy dropped in {}/{} default-configuration states and {}/{} stress states",
        gate.entropy_losses, gate.states, stress.entropy_losses, stress.states
    );
    Ok(if gate.entropy_losses + stress.entropy_losses == 0 {
        Ok(detail)
    } else {
        Err(detail)
    })
}

// 9 ---------------------------------------------------------------------------

fn synthetic_profile(label: PatternLabel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(20..=200);
    let nf = n as f64;
    match label {
        PatternLabel::UShape => {
            let (hm, tm) = (rng.random_range(0.25..0.5), rng.random_range(0.25..0.5));
            let base = (1.0 - hm - tm) / nf;
            let edge = (0.05 * nf).ceil().max(1.0) as usize;
            let decay = |k: usize| (-(k as f64) * 0.7).exp();
            let zs: f64 = (0..edge).map(decay).sum();
            let mut p = vec![base; n];
            for k in 0..edge {
                p[k] += hm * decay(k) / zs;
                p[n - 1 - k] += tm * decay(k) / zs;
            }
            p
        }
        PatternLabel::Mountain => {
            let centre = rng.random_range(0.3..0.7) * nf;
            let width = rng.random_range(nf / 40.0..nf / 10.0).max(1.0);
            (0..n)
                .map(|j| 0.02 / nf + (-0.5 * ((j as f64 - centre) / width).powi(2)).exp())
                .collect()
        }
        PatternLabel::Uniform => (0..n).map(|_| 1.0 + rng.random_range(-0.35..0.35)).collect(),
    }
}

fn classifier() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for label in [PatternLabel::UShape, PatternLabel::Mountain, PatternLabel::Uniform] {
        for i in 0..30 {
            let p = synthetic_profile(label, &mut rng);
            let got = classify_pattern(&p, 0.1, 0.1);
            ensure!(got == label, "{label} profile {i} (n={}) labelled {got}", p.len());
            for _ in 0..5 {
                let k = 10f64.powf(rng.random_range(-6.0..6.0));
                let scaled: Vec<f64> = p.iter().map(|x| x * k).collect();
                ensure!(classify_pattern(&scaled, 0.1, 0.1) == label, "{label} profile {i} changed under scale {k}");
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} profiles, 5 rescalings each"))
}

/// Criteria whose entropy sub-claim is known to be false; see
/// `calibration_property`.
const EXPECTED_FAILURES: &[usize] = &[8];

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome, String>); 9] = [
        ("full-attention oracle", || full_attention_oracle().map(Ok)),
        ("eviction oracle", || eviction_oracle().map(Ok)),
        ("queue online/offline equivalence", || queue_equivalence().map(Ok)),
        ("normalization suite", || normalization_suite().map(Ok)),
        ("effective-entry sparsity trend", || sparsity_trend().map(Ok)),
        ("exponential decay fit", || decay_recovery().map(Ok)),
        ("throughput trend and score-pair counts", || throughput_and_pairs().map(Ok)),
        ("calibration entropy and outlier removal", calibration_property),
        ("pattern classifier", || classifier().map(Ok)),
    ];
    let (mut passed, mut expected, mut unexpected) = (0, 0, 0);
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(Ok(detail)) => {
                passed += 1;
                println!("PASS [{n}] {name} ({secs:.2}s): {detail}");
            }
            Ok(Err(why)) if EXPECTED_FAILURES.contains(&n) => {
                expected += 1;
                println!("FAIL [{n}] {name} ({secs:.2}s): {why} (expected failure, the entropy claim does not hold in general)");
            }
            Ok(Err(why)) | Err(why) => {
                unexpected += 1;
                println!("FAIL [{n}] {name} ({secs:.2}s): {why}");
            }
        }
    }
    println!(
        "acceptance: {passed}/{} criteria passed, {expected} expected failure(s), {unexpected} unexpected failure(s)",
        criteria.len()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
