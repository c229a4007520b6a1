//! Detection-error rates for presentation-attack scoring.
//!
//! Scores are liveness probabilities in [0, 1]; larger means more bona fide.
//! A sample is *accepted* as bona fide when its score is at least the
//! threshold, so equality accepts. From that convention:
//!
//! * APCER (per attack species): fraction of that species' samples accepted.
//! * BPCER: fraction of bona fide samples rejected (score below threshold).
//! * ACER: mean of BPCER and the across-species mean APCER.
//!
//! ROC points carry raw integer counts so the area under the curve can be
//! computed exactly: the trapezoid sum and the pairwise win/tie count are the
//! same integer before the final division, and therefore the same float after
//! it.

use crate::{Error, Result};
use std::collections::BTreeMap;

/// Scores grouped into bona fide and per-species attack lists. Species names
/// are sorted, so iteration order is stable everywhere downstream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub bona: Vec<f64>,
    pub attacks: BTreeMap<String, Vec<f64>>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_bona(&mut self, score: f64) -> Result<()> {
        check_score(score)?;
        self.bona.push(score);
        Ok(())
    }

    pub fn push_attack(&mut self, species: &str, score: f64) -> Result<()> {
        check_score(score)?;
        if species.is_empty() {
            return Err(Error::Usage("attack species name is empty".into()));
        }
        self.attacks.entry(species.to_string()).or_default().push(score);
        Ok(())
    }

    pub fn attack_count(&self) -> usize {
        self.attacks.values().map(Vec::len).sum()
    }

    /// Errors unless both populations are non-empty.
    pub fn require_both(&self) -> Result<()> {
        if self.bona.is_empty() {
            return Err(Error::Usage("score set has no bona fide samples".into()));
        }
        if self.attack_count() == 0 {
            return Err(Error::Usage("score set has no attack samples".into()));
        }
        Ok(())
    }
}

fn check_score(score: f64) -> Result<()> {
    if !score.is_finite() || !(0.0..=1.0).contains(&score) {
        return Err(Error::Usage(format!(
            "scores must be finite within [0, 1], got {score}"
        )));
    }
    Ok(())
}

/// Fraction of `scores` at or above the threshold.
fn frac_accepted(scores: &[f64], threshold: f64) -> f64 {
    let n = scores.len();
    let hits = scores.iter().filter(|&&s| s >= threshold).count();
    hits as f64 / n as f64
}

/// APCER of a single species at `threshold`.
pub fn apcer(species_scores: &[f64], threshold: f64) -> Result<f64> {
    if species_scores.is_empty() {
        return Err(Error::Usage("APCER of an empty species".into()));
    }
    Ok(frac_accepted(species_scores, threshold))
}

/// BPCER of the bona fide population at `threshold`.
pub fn bpcer(bona_scores: &[f64], threshold: f64) -> Result<f64> {
    if bona_scores.is_empty() {
        return Err(Error::Usage("BPCER of an empty bona fide set".into()));
    }
    let rejected = bona_scores.iter().filter(|&&s| s < threshold).count();
    Ok(rejected as f64 / bona_scores.len() as f64)
}

/// One operating point with raw acceptance counts. `fp` attacks (pooled
/// across species) and `tp` bona fide samples score at or above `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fp: usize,
    pub tp: usize,
}

impl RocPoint {
    pub fn fpr(&self, attack_total: usize) -> f64 {
        self.fp as f64 / attack_total as f64
    }

    pub fn tpr(&self, bona_total: usize) -> f64 {
        self.tp as f64 / bona_total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Points in descending threshold order, from the +inf sentinel that
    /// accepts nothing to the -inf sentinel that accepts everything.
    pub points: Vec<RocPoint>,
    pub bona_total: usize,
    pub attack_total: usize,
}

/// Builds the ROC over every distinct score plus the two infinite sentinels.
pub fn roc(set: &ScoreSet) -> Result<RocCurve> {
    set.require_both()?;
    let mut bona = set.bona.clone();
    let mut attacks: Vec<f64> = set.attacks.values().flatten().copied().collect();
    bona.sort_by(|a, b| b.partial_cmp(a).expect("scores validated finite"));
    attacks.sort_by(|a, b| b.partial_cmp(a).expect("scores validated finite"));
    let (p, n) = (bona.len(), attacks.len());

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fp: 0, tp: 0 }];
    let (mut bi, mut ai) = (0usize, 0usize);
    while bi < p || ai < n {
        // Next distinct threshold is the larger of the two heads.
        let t = match (bona.get(bi), attacks.get(ai)) {
            (Some(&b), Some(&a)) => b.max(a),
            (Some(&b), None) => b,
            (None, Some(&a)) => a,
            (None, None) => unreachable!(),
        };
        while bi < p && bona[bi] >= t {
            bi += 1;
        }
        while ai < n && attacks[ai] >= t {
            ai += 1;
        }
        points.push(RocPoint { threshold: t, fp: ai, tp: bi });
    }
    points.push(RocPoint { threshold: f64::NEG_INFINITY, fp: n, tp: p });
    Ok(RocCurve { points, bona_total: p, attack_total: n })
}

impl RocCurve {
    /// Area under the curve by exact trapezoid sums over integer counts.
    /// The numerator is twice the Mann-Whitney win/tie statistic, so this is
    /// bit-identical to [`auc_pairwise`] on the same scores.
    pub fn auc(&self) -> f64 {
        let mut num2: u128 = 0;
        for w in self.points.windows(2) {
            let dfp = (w[1].fp - w[0].fp) as u128;
            num2 += dfp * (w[0].tp + w[1].tp) as u128;
        }
        num2 as f64 / (2 * self.bona_total as u128 * self.attack_total as u128) as f64
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for pt in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                pt.threshold,
                pt.fpr(self.attack_total),
                pt.tpr(self.bona_total)
            ));
        }
        out
    }
}

/// Probability that a random bona fide sample outscores a random attack,
/// counting ties as half. Computed with integer win/tie counts.
pub fn auc_pairwise(set: &ScoreSet) -> Result<f64> {
    set.require_both()?;
    let mut bona = set.bona.clone();
    bona.sort_by(|a, b| a.partial_cmp(b).expect("scores validated finite"));
    let p = bona.len() as u128;
    let mut n: u128 = 0;
    let mut num2: u128 = 0;
    for scores in set.attacks.values() {
        for &a in scores {
            let ge = bona.partition_point(|&b| b < a); // first index with b >= a
            let gt = bona.partition_point(|&b| b <= a); // first index with b > a
            let wins = bona.len() - gt;
            let ties = gt - ge;
            num2 += 2 * wins as u128 + ties as u128;
            n += 1;
        }
    }
    Ok(num2 as f64 / (2 * p * n) as f64)
}

/// How the working threshold is chosen before computing an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// Use this threshold as given.
    Fixed(f64),
    /// Scan every distinct score (plus the accept-nothing sentinel) and
    /// return the midpoint of the widest score interval that minimizes ACER,
    /// so the operating point keeps the largest margin to both classes.
    MinAcer,
}

/// Applies the policy against a score set (for `MinAcer`, typically the
/// validation scores).
pub fn select_threshold(set: &ScoreSet, policy: ThresholdPolicy) -> Result<f64> {
    match policy {
        ThresholdPolicy::Fixed(t) => {
            if t.is_nan() {
                return Err(Error::Usage("threshold is NaN".into()));
            }
            Ok(t)
        }
        ThresholdPolicy::MinAcer => {
            set.require_both()?;
            let mut grid: Vec<f64> = set
                .bona
                .iter()
                .chain(set.attacks.values().flatten())
                .copied()
                .collect();
            grid.sort_by(|a, b| a.partial_cmp(b).expect("scores validated finite"));
            grid.dedup();
            grid.push(f64::INFINITY);
            let rates: Vec<f64> =
                grid.iter().map(|&t| acer(set, t)).collect::<Result<_>>()?;
            let best = rates.iter().copied().fold(f64::INFINITY, f64::min);
            // ACER is constant between consecutive candidates, so each run of
            // minimizing candidates covers one score interval. Its lower edge
            // is the candidate before the run (0 for the leftmost run, since
            // scores live in [0, 1]); its upper edge is the run's last finite
            // candidate. The widest interval keeps the largest margin, so its
            // midpoint is the returned threshold. A run holding only the
            // sentinel means no finite threshold minimizes ACER.
            let mut widest: Option<(f64, f64)> = None;
            let mut i = 0;
            while i < grid.len() {
                if rates[i] > best {
                    i += 1;
                    continue;
                }
                let mut j = i;
                while j + 1 < grid.len() && rates[j + 1] <= best {
                    j += 1;
                }
                let lo = if i == 0 { 0.0 } else { grid[i - 1] };
                let hi = if grid[j].is_finite() {
                    grid[j]
                } else if j > i {
                    grid[j - 1]
                } else {
                    i = j + 1;
                    continue;
                };
                if widest.map_or(true, |(wl, wh)| hi - lo > wh - wl) {
                    widest = Some((lo, hi));
                }
                i = j + 1;
            }
            match widest {
                Some((lo, hi)) => Ok((lo + hi) / 2.0),
                None => Ok(f64::INFINITY),
            }
        }
    }
}

/// ACER at a threshold: mean of BPCER and the across-species APCER mean.
pub fn acer(set: &ScoreSet, threshold: f64) -> Result<f64> {
    set.require_both()?;
    let mut apcer_sum = 0.0;
    for scores in set.attacks.values() {
        apcer_sum += apcer(scores, threshold)?;
    }
    let apcer_mean = apcer_sum / set.attacks.len() as f64;
    Ok((apcer_mean + bpcer(&set.bona, threshold)?) / 2.0)
}

/// BPCER at the loosest operating point whose pooled APCER does not exceed
/// `target`. `unattainable` is set when only the accept-nothing sentinel
/// qualifies, which happens when too many attacks saturate the score ceiling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpcerAt {
    pub target: f64,
    pub threshold: f64,
    pub bpcer: f64,
    pub unattainable: bool,
}

pub fn bpcer_at_apcer(set: &ScoreSet, target: f64) -> Result<BpcerAt> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Usage(format!(
            "APCER target must lie in [0, 1], got {target}"
        )));
    }
    set.require_both()?;
    let pooled: Vec<f64> = set.attacks.values().flatten().copied().collect();
    let mut grid: Vec<f64> = set.bona.iter().chain(pooled.iter()).copied().collect();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("scores validated finite"));
    grid.dedup();
    grid.push(f64::INFINITY);
    for &t in &grid {
        if frac_accepted(&pooled, t) <= target {
            return Ok(BpcerAt {
                target,
                threshold: t,
                bpcer: bpcer(&set.bona, t)?,
                unattainable: t == f64::INFINITY,
            });
        }
    }
    unreachable!("the accept-nothing sentinel always satisfies the target");
}

/// Full evaluation of a score set at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub apcer_per_species: BTreeMap<String, f64>,
    pub apcer_mean: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub auc: f64,
    pub bona_count: usize,
    pub attack_counts: BTreeMap<String, usize>,
    pub bpcer_at: Vec<BpcerAt>,
}

/// Computes every rate at `threshold` plus BPCER at each APCER target.
pub fn evaluate(set: &ScoreSet, threshold: f64, bpcer_targets: &[f64]) -> Result<EvalReport> {
    set.require_both()?;
    let mut apcer_per_species = BTreeMap::new();
    let mut attack_counts = BTreeMap::new();
    for (species, scores) in &set.attacks {
        apcer_per_species.insert(species.clone(), apcer(scores, threshold)?);
        attack_counts.insert(species.clone(), scores.len());
    }
    let apcer_mean =
        apcer_per_species.values().sum::<f64>() / apcer_per_species.len() as f64;
    let bpcer = bpcer(&set.bona, threshold)?;
    let mut bpcer_at = Vec::new();
    for &target in bpcer_targets {
        bpcer_at.push(bpcer_at_apcer(set, target)?);
    }
    Ok(EvalReport {
        threshold,
        apcer_per_species,
        apcer_mean,
        bpcer,
        acer: (apcer_mean + bpcer) / 2.0,
        auc: roc(set)?.auc(),
        bona_count: set.bona.len(),
        attack_counts,
        bpcer_at,
    })
}

impl EvalReport {
    /// Sorted `key=value` lines with full-precision values.
    pub fn render_machine(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        kv.insert("threshold".into(), format!("{}", self.threshold));
        kv.insert("acer".into(), format!("{}", self.acer));
        kv.insert("apcer_mean".into(), format!("{}", self.apcer_mean));
        kv.insert("bpcer".into(), format!("{}", self.bpcer));
        kv.insert("auc".into(), format!("{}", self.auc));
        kv.insert("bona_count".into(), format!("{}", self.bona_count));
        for (species, rate) in &self.apcer_per_species {
            kv.insert(format!("apcer.{species}"), format!("{rate}"));
            kv.insert(
                format!("attack_count.{species}"),
                format!("{}", self.attack_counts[species]),
            );
        }
        for b in &self.bpcer_at {
            let key = format!("bpcer_at_apcer_{}", b.target);
            kv.insert(key.clone(), format!("{}", b.bpcer));
            kv.insert(format!("{key}.threshold"), format!("{}", b.threshold));
            kv.insert(format!("{key}.unattainable"), format!("{}", b.unattainable));
        }
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Aligned human-readable table; rates shown with two decimals, ties
    /// rounded to even.
    pub fn render_human(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("threshold   {}\n", self.threshold));
        out.push_str(&format!("auc         {:.4}\n", self.auc));
        out.push_str(&format!("bpcer       {}\n", fmt2(self.bpcer)));
        out.push_str(&format!("apcer mean  {}\n", fmt2(self.apcer_mean)));
        out.push_str(&format!("acer        {}\n", fmt2(self.acer)));
        for b in &self.bpcer_at {
            let mark = if b.unattainable { "  (unattainable)" } else { "" };
            out.push_str(&format!(
                "bpcer @ apcer<={}  {}{}\n",
                b.target,
                fmt2(b.bpcer),
                mark
            ));
        }
        out.push_str(&format!("bona fide samples: {}\n", self.bona_count));
        out.push_str("species            n   apcer\n");
        for (species, rate) in &self.apcer_per_species {
            out.push_str(&format!(
                "{:<16} {:>4}   {}\n",
                species, self.attack_counts[species], fmt2(*rate)
            ));
        }
        out
    }
}

/// Rounds to two decimal places with ties going to the even digit, so 0.375
/// becomes 0.38 and 0.125 becomes 0.12.
pub fn round_half_even2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let units = if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    };
    units / 100.0
}

fn fmt2(x: f64) -> String {
    format!("{:.2}", round_half_even2(x))
}
