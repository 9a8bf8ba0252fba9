//! Attention studies: positional profiles and their shape labels, outlier
//! counts, effective-entry sparsity and distance decay.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::eviction::{calibration_threshold, indices_above};
use crate::model::{Model, TokenId};
use crate::pipeline::PipelineOutput;
use crate::tensor::{softmax_rows, Matrix};

/// Mean of the selected attention rows, renormalized to sum to 1.
pub fn attention_profile(a: &Matrix, rows: &[usize]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Empty("row set"));
    }
    let mut acc = vec![0.0; a.cols()];
    for &r in rows {
        if r >= a.rows() {
            return Err(Error::OutOfRange {
                what: "attention row",
                index: r,
                bound: a.rows(),
            });
        }
        for (s, v) in acc.iter_mut().zip(a.row(r)) {
            *s += v;
        }
    }
    normalize(&mut acc)?;
    Ok(acc)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let total: f64 = v.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::NonFinite("profile mass"));
    }
    v.iter_mut().for_each(|x| *x /= total);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternLabel {
    UShape,
    Mountain,
    Uniform,
}

impl fmt::Display for PatternLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternLabel::UShape => "U-shape",
            PatternLabel::Mountain => "Mountain-shape",
            PatternLabel::Uniform => "Uniform-shape",
        })
    }
}

/// Head / middle / tail mass of a profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandMasses {
    pub head: f64,
    pub middle: f64,
    pub tail: f64,
}

struct Bands {
    nh: usize,
    nt: usize,
}

fn bands(n: usize, head_frac: f64, tail_frac: f64) -> Bands {
    let nh = ((head_frac * n as f64).ceil() as usize).max(1).min(n);
    let nt = ((tail_frac * n as f64).ceil() as usize).max(1).min(n - nh);
    Bands { nh, nt }
}

/// Masses of the first `ceil(head_frac*n)` and last `ceil(tail_frac*n)`
/// positions (each at least one position) of the normalized profile.
pub fn band_masses(profile: &[f64], head_frac: f64, tail_frac: f64) -> BandMasses {
    let n = profile.len();
    let total: f64 = profile.iter().sum();
    if n == 0 || !(total > 0.0) {
        return BandMasses {
            head: 0.0,
            middle: 0.0,
            tail: 0.0,
        };
    }
    let b = bands(n, head_frac, tail_frac);
    let head = profile[..b.nh].iter().sum::<f64>() / total;
    let tail = profile[n - b.nt..].iter().sum::<f64>() / total;
    BandMasses {
        head,
        middle: 1.0 - head - tail,
        tail,
    }
}

/// Labels a profile (any positive scale). Rules in order: U-shape when head
/// and tail both hold more than twice their uniform share; Mountain when the
/// middle does and the peak lies in the middle; Uniform when every entry is
/// within half the uniform level of it; otherwise the band with the largest
/// over-representation decides (head or tail: U-shape, middle: Mountain).
/// Empty or zero profiles are Uniform.
pub fn classify_pattern(profile: &[f64], head_frac: f64, tail_frac: f64) -> PatternLabel {
    let n = profile.len();
    let total: f64 = profile.iter().sum();
    if n == 0 || !(total > 0.0) {
        return PatternLabel::Uniform;
    }
    let p: Vec<f64> = profile.iter().map(|x| x / total).collect();
    let b = bands(n, head_frac, tail_frac);
    let m = band_masses(&p, head_frac, tail_frac);
    let u_h = b.nh as f64 / n as f64;
    let u_t = b.nt as f64 / n as f64;
    let u_m = 1.0 - u_h - u_t;

    if b.nt > 0 && m.head > 2.0 * u_h && m.tail > 2.0 * u_t {
        return PatternLabel::UShape;
    }
    let peak = crate::tensor::argmax(&p).unwrap_or(0);
    let peak_in_middle = peak >= b.nh && peak < n - b.nt;
    if u_m > 0.0 && m.middle > 2.0 * u_m && peak_in_middle {
        return PatternLabel::Mountain;
    }
    let level = 1.0 / n as f64;
    if p.iter().all(|&x| (x - level).abs() < 0.5 * level) {
        return PatternLabel::Uniform;
    }
    let ratio = |mass: f64, u: f64| if u > 0.0 { mass / u } else { 0.0 };
    let rh = ratio(m.head, u_h);
    let rm = ratio(m.middle, u_m);
    let rt = ratio(m.tail, u_t);
    if rm > rh && rm > rt {
        PatternLabel::Mountain
    } else {
        PatternLabel::UShape
    }
}

/// Indices with `S > lambda_mult * mean(S)`; the calibration rule.
pub fn count_outliers(scores: &[f64], lambda_mult: f64) -> Vec<usize> {
    indices_above(scores, calibration_threshold(scores, lambda_mult))
}

/// Indices above a fixed threshold, for re-counting after eviction with the
/// threshold of the original scores.
pub fn count_outliers_above(scores: &[f64], lambda: f64) -> Vec<usize> {
    indices_above(scores, lambda)
}

pub fn effective_entries(row: &[f64], epsilon: f64) -> usize {
    row.iter().filter(|&&a| a > epsilon).count()
}

/// Shannon entropy (nats) of `v` after renormalization.
pub fn entropy(v: &[f64]) -> f64 {
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    v.iter()
        .map(|&x| x / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

// ---------------------------------------------------------------------------
// Sparsity

pub const DEFAULT_DECAY_ALPHA: f64 = 0.5;
pub const DEFAULT_DECAY_SIGMA: f64 = 1.0;
pub const DEFAULT_SPARSITY_EPSILON: f64 = 0.01;

/// Where attention rows come from.
#[derive(Debug, Clone, Copy)]
pub enum SparsitySource<'a> {
    /// Last-token attention rows of a model on random tokens, every layer
    /// and head. Widths beyond its position budget use the synthetic source.
    ToyModel(&'a Model),
    /// Logits `-alpha*d + sigma*z` over distance `d` to the attending token.
    SyntheticDecay { alpha: f64, sigma: f64 },
}

impl SparsitySource<'_> {
    pub fn synthetic() -> Self {
        SparsitySource::SyntheticDecay {
            alpha: DEFAULT_DECAY_ALPHA,
            sigma: DEFAULT_DECAY_SIGMA,
        }
    }
}

/// One attention row sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityRecord {
    pub w: usize,
    pub trial: usize,
    pub epsilon: f64,
    pub effective: usize,
    pub ineffective: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySummary {
    pub w: usize,
    pub epsilon: f64,
    pub effective_mean: f64,
    pub effective_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityCurve {
    pub records: Vec<SparsityRecord>,
    /// Widths that exceeded the model's budget and used synthetic rows.
    pub synthetic_fallback: Vec<usize>,
}

impl SparsityCurve {
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.records.iter().map(|r| r.w).collect();
        w.dedup();
        w
    }

    pub fn summary(&self) -> Vec<SparsitySummary> {
        self.widths()
            .into_iter()
            .map(|w| {
                let xs: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.w == w)
                    .map(|r| r.effective as f64)
                    .collect();
                let (mean, std) = mean_std(&xs);
                SparsitySummary {
                    w,
                    epsilon: self.records.iter().find(|r| r.w == w).map_or(0.0, |r| r.epsilon),
                    effective_mean: mean,
                    effective_std: std,
                }
            })
            .collect()
    }

    /// Mean effective fraction per width for one trial.
    fn trial_fractions(&self, trial: usize) -> Vec<f64> {
        self.widths()
            .into_iter()
            .map(|w| {
                let xs: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.w == w && r.trial == trial)
                    .map(|r| r.effective as f64 / w as f64)
                    .collect();
                mean_std(&xs).0
            })
            .collect()
    }

    /// Per-trial check that the effective fraction never rises with width,
    /// and whether a strict majority of trials pass.
    pub fn trend(&self) -> TrendResult {
        let trials = self.records.iter().map(|r| r.trial + 1).max().unwrap_or(0);
        let passing = (0..trials)
            .filter(|&t| self.trial_fractions(t).windows(2).all(|p| p[1] <= p[0]))
            .count();
        TrendResult {
            trials,
            passing,
            single_width: self.widths().len() < 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrendResult {
    pub trials: usize,
    pub passing: usize,
    pub single_width: bool,
}

impl TrendResult {
    pub fn pass(&self) -> bool {
        self.single_width || 2 * self.passing > self.trials
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Softmax over `-alpha*d + sigma*z`, index `j` at distance `w-1-j` from the
/// last token.
pub fn synthetic_decay_row(w: usize, alpha: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..w)
        .map(|j| {
            let z: f64 = StandardNormal.sample(rng);
            -alpha * (w - 1 - j) as f64 + sigma * z
        })
        .collect();
    let m = Matrix::new(1, w, logits).expect("finite logits");
    softmax_rows(&m, 1.0).expect("positive scale").into_data()
}

fn trial_rng(seed: u64, trial: usize, w: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((trial as u64) << 32) ^ (w as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Last-token attention rows (all layers and heads) of the model on
/// `w` random tokens.
fn toy_rows(model: &Model, w: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let vocab = Uniform::new(0, model.config().vocab_size as TokenId).map_err(|e| Error::config(e.to_string()))?;
    let tokens: Vec<TokenId> = (0..w).map(|_| vocab.sample(rng)).collect();
    let positions: Vec<usize> = (0..w).collect();
    let f = model.forward_local(&tokens, &positions)?;
    Ok(f.attention
        .iter()
        .flatten()
        .map(|a| a.row(w - 1).to_vec())
        .collect())
}

fn sample_rows(source: SparsitySource<'_>, w: usize, rng: &mut ChaCha8Rng, fallback: &mut bool) -> Result<Vec<Vec<f64>>> {
    match source {
        SparsitySource::ToyModel(model) if w <= model.config().max_train_positions => toy_rows(model, w, rng),
        SparsitySource::ToyModel(_) => {
            *fallback = true;
            Ok(vec![synthetic_decay_row(w, DEFAULT_DECAY_ALPHA, DEFAULT_DECAY_SIGMA, rng)])
        }
        SparsitySource::SyntheticDecay { alpha, sigma } => Ok(vec![synthetic_decay_row(w, alpha, sigma, rng)]),
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.is_empty() {
        return Err(Error::Empty("widths"));
    }
    if widths.contains(&0) || widths.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::config("widths must be positive and strictly ascending"));
    }
    Ok(())
}

/// Effective-entry counts of last-token attention rows for each width and
/// trial.
pub fn sparsity_sweep(
    source: SparsitySource<'_>,
    widths: &[usize],
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<SparsityCurve> {
    check_widths(widths)?;
    if trials == 0 {
        return Err(Error::config("trials must be >= 1"));
    }
    if epsilon.is_nan() {
        return Err(Error::config("epsilon must not be NaN"));
    }
    let mut records = Vec::new();
    let mut synthetic_fallback = Vec::new();
    for &w in widths {
        let mut fallback = false;
        for trial in 0..trials {
            let mut rng = trial_rng(seed, trial, w);
            for row in sample_rows(source, w, &mut rng, &mut fallback)? {
                let effective = effective_entries(&row, epsilon);
                records.push(SparsityRecord {
                    w,
                    trial,
                    epsilon,
                    effective,
                    ineffective: w - effective,
                });
            }
        }
        if fallback {
            synthetic_fallback.push(w);
        }
    }
    Ok(SparsityCurve {
        records,
        synthetic_fallback,
    })
}

/// Mean attention of the last token by distance over `trials` samples of
/// width `w`; distance 0 is the token itself.
pub fn decay_samples(source: SparsitySource<'_>, w: usize, trials: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if w == 0 || trials == 0 {
        return Err(Error::config("decay width and trials must be >= 1"));
    }
    let mut acc = vec![0.0; w];
    let mut count = 0usize;
    let mut fallback = false;
    for trial in 0..trials {
        let mut rng = trial_rng(seed ^ 0xdeca_7000, trial, w);
        for row in sample_rows(source, w, &mut rng, &mut fallback)? {
            for (j, a) in row.iter().enumerate() {
                acc[w - 1 - j] += a;
            }
            count += 1;
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(d, s)| (d as f64, s / count as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Magnitude of the fitted slope of `ln(attention)` against distance.
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `ln(attention)` on distance.
pub fn decay_fit(pairs: &[(f64, f64)]) -> Result<DecayFit> {
    if pairs.len() < 8 {
        return Err(Error::config(format!("decay fit needs >= 8 points, got {}", pairs.len())));
    }
    if pairs.iter().any(|&(d, a)| !d.is_finite() || !(a > 0.0) || !a.is_finite()) {
        return Err(Error::config("decay fit needs finite distances and positive attention"));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::config("decay fit: all distances are equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).max(0.0) } else { 0.0 };
    Ok(DecayFit {
        rate: slope.abs(),
        intercept,
        r_squared,
    })
}

// ---------------------------------------------------------------------------
// Reports over pipeline runs

/// Query-row attention over the context columns of a local attention
/// matrix, normalized.
pub fn context_profile(attention: &Matrix, context_len: usize, q_obs: usize) -> Result<Vec<f64>> {
    let n = attention.rows();
    if context_len == 0 || context_len > n || q_obs == 0 || q_obs > n - context_len {
        return Err(Error::config("context profile: bad context length or observation window"));
    }
    let band = attention.column_band(0..context_len);
    let rows: Vec<usize> = (n - q_obs..n).collect();
    attention_profile(&band, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadBias {
    pub layer: usize,
    pub head: usize,
    /// Over positions inside a chunk, averaged over full-width chunks.
    pub profile: Vec<f64>,
    pub label: PatternLabel,
    pub masses: BandMasses,
    /// `(chunk, index)` of retained context tokens whose score exceeds the
    /// calibration threshold of their chunk's original scores.
    pub outliers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub heads: Vec<HeadBias>,
    pub head_frac: f64,
    pub tail_frac: f64,
    pub lambda_mult: f64,
}

impl BiasReport {
    pub fn total_outliers(&self) -> usize {
        self.heads.iter().map(|h| h.outliers.len()).sum()
    }

    pub fn label_counts(&self) -> [(PatternLabel, usize); 3] {
        let c = |l| self.heads.iter().filter(|h| h.label == l).count();
        [
            (PatternLabel::UShape, c(PatternLabel::UShape)),
            (PatternLabel::Mountain, c(PatternLabel::Mountain)),
            (PatternLabel::Uniform, c(PatternLabel::Uniform)),
        ]
    }
}

/// Builds the per-head report from a run made with `capture` on.
pub fn bias_report(out: &PipelineOutput, head_frac: f64, tail_frac: f64, lambda_mult: f64) -> Result<BiasReport> {
    let first = out.chunks.first().ok_or(Error::Empty("chunks"))?;
    let n_layers = first.scores.len();
    let n_heads = first.scores.first().map_or(0, Vec::len);
    let w = out.plan.max_chunk_len();
    let q_obs = out.q_obs;
    let full: Vec<_> = out.chunks.iter().filter(|c| c.context_range.len() == w).collect();

    let mut heads = Vec::with_capacity(n_layers * n_heads);
    for l in 0..n_layers {
        for h in 0..n_heads {
            let mut profile = vec![0.0; w];
            for c in &full {
                let att = c
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::config("bias report needs a run with attention capture"))?;
                let p = context_profile(&att[l][h], w, q_obs)?;
                profile.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
            normalize(&mut profile)?;
            let mut outliers = Vec::new();
            for c in &out.chunks {
                let s = &c.scores[l][h];
                let lambda = calibration_threshold(s, lambda_mult);
                outliers.extend(
                    c.retained[l][h]
                        .iter()
                        .filter(|&&j| s[j] > lambda)
                        .map(|&j| (c.chunk_index, j)),
                );
            }
            heads.push(HeadBias {
                layer: l,
                head: h,
                label: classify_pattern(&profile, head_frac, tail_frac),
                masses: band_masses(&profile, head_frac, tail_frac),
                profile,
                outliers,
            });
        }
    }
    Ok(BiasReport {
        heads,
        head_frac,
        tail_frac,
        lambda_mult,
    })
}

/// Total variation distance between the parallel context profile of each
/// head (chunks concatenated in document order) and the profile of a single
/// causal pass over the whole context plus query. Needs the whole sequence
/// inside the model's position budget.
pub fn compare_profiles(model: &Model, out: &PipelineOutput) -> Result<Vec<(usize, usize, f64)>> {
    let plan = &out.plan;
    let n = plan.context().len();
    let seq: Vec<TokenId> = plan.context().iter().chain(plan.query()).copied().collect();
    let positions: Vec<usize> = (0..seq.len()).collect();
    let f = model.forward_local(&seq, &positions)?;
    let mut rows = Vec::new();
    for (l, layer) in f.attention.iter().enumerate() {
        for (h, a) in layer.iter().enumerate() {
            let full = context_profile(a, n, out.q_obs)?;
            let mut parallel = Vec::with_capacity(n);
            for c in &out.chunks {
                let att = c
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::config("comparison needs a run with attention capture"))?;
                parallel.extend(context_profile(&att[l][h], c.context_range.len(), out.q_obs)?);
            }
            normalize(&mut parallel)?;
            let tv = 0.5 * full.iter().zip(&parallel).map(|(a, b)| (a - b).abs()).sum::<f64>();
            rows.push((l, h, tv));
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV

pub fn profile_csv(report: &BiasReport) -> String {
    let mut s = String::from("layer,head,position,mass\n");
    for h in &report.heads {
        for (p, m) in h.profile.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", h.layer, h.head, p, m));
        }
    }
    s
}

pub fn patterns_csv(report: &BiasReport) -> String {
    let mut s = String::from("layer,head,label,h,m,t\n");
    for h in &report.heads {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.layer, h.head, h.label, h.masses.head, h.masses.middle, h.masses.tail
        ));
    }
    s
}

pub fn outliers_csv(report: &BiasReport) -> String {
    let mut s = String::from("layer,head,chunk,index\n");
    for h in &report.heads {
        for (c, j) in &h.outliers {
            s.push_str(&format!("{},{},{},{}\n", h.layer, h.head, c, j));
        }
    }
    s
}

pub fn sparsity_csv(summary: &[SparsitySummary]) -> String {
    let mut s = String::from("w,epsilon,effective_mean,effective_std\n");
    for r in summary {
        s.push_str(&format!("{},{},{},{}\n", r.w, r.epsilon, r.effective_mean, r.effective_std));
    }
    s
}

pub fn decay_csv(pairs: &[(f64, f64)]) -> String {
    let mut s = String::from("distance,attention\n");
    for (d, a) in pairs {
        s.push_str(&format!("{},{}\n", d, a));
    }
    s
}
