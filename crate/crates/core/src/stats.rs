//! Paired comparison of augmentation strategies: relative loss differences
//! and a Monte-Carlo Bayesian signed-rank posterior with a rope.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentMethod;
use crate::error::{Error, Result};

/// Relative difference `(a - b) / (0.5 (a + b))`; negative when `a` is the
/// smaller loss. Two perfect losses compare as equal.
pub fn loss_ratio(a: f64, b: f64) -> f64 {
    let s = a + b;
    if s == 0.0 {
        return 0.0;
    }
    (a - b) / (0.5 * s)
}

/// Matched `(loss_a, loss_b)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRuns {
    pairs: Vec<(f64, f64)>,
}

impl PairedRuns {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        for (i, &(a, b)) in pairs.iter().enumerate() {
            if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Data(format!("pair {i} has invalid losses ({a}, {b})")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.pairs.iter().map(|&(a, b)| loss_ratio(a, b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub p_a_better: f64,
    pub p_rope: f64,
    pub p_b_better: f64,
    pub n_pairs: usize,
    pub rope_width: f64,
    pub mc_draws: usize,
    /// Votes for `[a better, rope, b better]`.
    pub counts: [u64; 3],
}

pub const DEFAULT_ROPE: f64 = 0.05;
pub const DEFAULT_DRAWS: usize = 50_000;

/// Bayesian signed-rank test. Each draw weights the pseudo-observation 0 and
/// the ratios with a flat Dirichlet and accumulates the weight products of
/// every Walsh average into left of, inside, or right of the rope; the draw
/// votes for the largest of the three masses.
pub fn bayesian_signed_rank(pairs: &PairedRuns, rope: f64, mc_draws: usize, seed: u64) -> Result<ComparisonResult> {
    if pairs.len() < 2 {
        return Err(Error::Data(format!("signed-rank test needs at least 2 pairs, got {}", pairs.len())));
    }
    if !(rope >= 0.0 && rope.is_finite()) || mc_draws == 0 {
        return Err(Error::Config(format!("invalid rope {rope} or draw count {mc_draws}")));
    }
    let mut z = vec![0.0];
    z.extend(pairs.ratios());
    let m = z.len();
    // region of each Walsh average: 0 left, 1 rope, 2 right
    let mut region = vec![0u8; m * m];
    for i in 0..m {
        for j in 0..m {
            let w = 0.5 * (z[i] + z[j]);
            region[i * m + j] = if w < -rope {
                0
            } else if w > rope {
                2
            } else {
                1
            };
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0u64; 3];
    let mut w = vec![0.0; m];
    for _ in 0..mc_draws {
        let mut total = 0.0;
        for wi in w.iter_mut() {
            *wi = rng.sample::<f64, _>(Exp1);
            total += *wi;
        }
        for wi in w.iter_mut() {
            *wi /= total;
        }
        let mut mass = [0.0; 3];
        for i in 0..m {
            let row = &region[i * m..(i + 1) * m];
            for j in 0..m {
                mass[row[j] as usize] += w[i] * w[j];
            }
        }
        let vote = if mass[0] > mass[1] && mass[0] > mass[2] {
            0
        } else if mass[2] > mass[1] && mass[2] > mass[0] {
            2
        } else {
            1
        };
        counts[vote] += 1;
    }
    let n = mc_draws as f64;
    let p_a_better = counts[0] as f64 / n;
    let p_b_better = counts[2] as f64 / n;
    Ok(ComparisonResult {
        p_a_better,
        p_rope: 1.0 - p_a_better - p_b_better,
        p_b_better,
        n_pairs: pairs.len(),
        rope_width: rope,
        mc_draws,
        counts,
    })
}

/// One downstream run as written by the experiment runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub net: String,
    pub method: AugmentMethod,
    pub conditional: bool,
    pub r: Option<f64>,
    pub steps: Option<usize>,
    pub rep: usize,
    pub seed: u64,
    pub test_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub train_seconds: Option<f64>,
    pub config_hash: String,
    #[serde(default)]
    pub denoiser_checkpoint_hash: Option<String>,
    #[serde(default)]
    pub model_checkpoint_hash: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Augmentation strategy being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Arm {
    pub method: AugmentMethod,
    pub conditional: bool,
}

impl Arm {
    pub fn new(method: AugmentMethod, conditional: bool) -> Self {
        Self {
            method,
            conditional: conditional && method.denoises(),
        }
    }

    pub fn of(rec: &ResultRecord) -> Self {
        Self::new(rec.method, rec.conditional)
    }

    pub fn label(&self) -> String {
        if self.conditional {
            format!("{}_cond", self.method.as_str())
        } else {
            self.method.as_str().to_string()
        }
    }

    /// Parses labels such as `raw`, `noise`, `dpm`, `dpm_cond`.
    pub fn parse(s: &str) -> Result<Self> {
        let (m, cond) = match s.strip_suffix("_cond") {
            Some(m) => (m, true),
            None => (s, false),
        };
        let method = match m {
            "raw" => AugmentMethod::Raw,
            "noise" => AugmentMethod::Noise,
            "dae" => AugmentMethod::Dae,
            "dpm" => AugmentMethod::Dpm,
            _ => return Err(Error::Config(format!("unknown strategy '{s}'"))),
        };
        if cond && !method.denoises() {
            return Err(Error::Config(format!("'{s}' cannot be conditional")));
        }
        Ok(Self::new(method, cond))
    }
}

/// Experimental cell without the repetition index. Absent `r` or `steps`
/// mean the strategy has no such dimension and match any value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub dataset: String,
    pub net: String,
    pub r: Option<f64>,
    pub steps: Option<usize>,
}

impl CellKey {
    fn of(rec: &ResultRecord) -> Self {
        Self {
            dataset: rec.dataset.clone(),
            net: rec.net.clone(),
            r: rec.r,
            steps: rec.steps,
        }
    }

    fn matches(&self, other: &CellKey) -> bool {
        fn opt<T: PartialEq>(a: &Option<T>, b: &Option<T>) -> bool {
            match (a, b) {
                (Some(x), Some(y)) => x == y,
                _ => true,
            }
        }
        self.dataset == other.dataset && self.net == other.net && opt(&self.r, &other.r) && opt(&self.steps, &other.steps)
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.dataset, self.net)?;
        if let Some(r) = self.r {
            write!(f, "/r={r}")?;
        }
        if let Some(s) = self.steps {
            write!(f, "/steps={s}")?;
        }
        Ok(())
    }
}

impl Eq for CellKey {}

impl Ord for CellKey {
    fn cmp(&self, o: &Self) -> Ordering {
        let r = |k: &CellKey| k.r.map(f64::to_bits);
        (&self.dataset, &self.net)
            .cmp(&(&o.dataset, &o.net))
            .then_with(|| match (self.r, o.r) {
                (Some(a), Some(b)) => a.total_cmp(&b),
                _ => r(self).cmp(&r(o)),
            })
            .then_with(|| self.steps.cmp(&o.steps))
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Reads every `*.jsonl` file of a results directory.
pub fn load_results(dir: &Path) -> Result<Vec<ResultRecord>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ResultRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                row: i,
                col: None,
                msg: format!("{}: {e}", f.display()),
            })?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Mean test loss over the successful repetitions of each cell of one arm.
pub fn cell_means(records: &[ResultRecord], arm: Arm) -> BTreeMap<CellKey, f64> {
    let mut acc: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for rec in records.iter().filter(|r| Arm::of(r) == arm) {
        if let Some(l) = rec.test_loss {
            acc.entry(CellKey::of(rec)).or_default().push(l);
        }
    }
    acc.into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k, mean)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregated {
    pub a: Arm,
    pub b: Arm,
    pub pairs: PairedRuns,
    /// Key of each pair, taken from the more specific side.
    pub keys: Vec<String>,
    /// Cells of either side left without a partner.
    pub dropped: Vec<String>,
}

/// Pairs cell means of two strategies. Cells are matched on dataset and
/// network and on every grid dimension both sides have.
pub fn aggregate_records(records: &[ResultRecord], a: Arm, b: Arm) -> Result<Aggregated> {
    let ma = cell_means(records, a);
    let mb = cell_means(records, b);
    let mut pairs = Vec::new();
    let mut keys = Vec::new();
    let mut used_b = vec![false; mb.len()];
    let mut dropped = Vec::new();
    for (ka, la) in &ma {
        let mut hit = false;
        for (j, (kb, lb)) in mb.iter().enumerate() {
            if ka.matches(kb) {
                hit = true;
                used_b[j] = true;
                pairs.push((*la, *lb));
                let specific = if ka.r.is_some() || ka.steps.is_some() { ka } else { kb };
                keys.push(specific.to_string());
            }
        }
        if !hit {
            dropped.push(format!("{} {ka}", a.label()));
        }
    }
    for ((kb, _), used) in mb.iter().zip(used_b) {
        if !used {
            dropped.push(format!("{} {kb}", b.label()));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no matched cells between {} and {}",
            a.label(),
            b.label()
        )));
    }
    for d in &dropped {
        log::warn!("unmatched cell dropped: {d}");
    }
    Ok(Aggregated {
        a,
        b,
        pairs: PairedRuns::new(pairs)?,
        keys,
        dropped,
    })
}

pub fn aggregate_cells(results_dir: &Path, a: Arm, b: Arm) -> Result<Aggregated> {
    aggregate_records(&load_results(results_dir)?, a, b)
}

/// `(dataset, r, steps, mean loss)` rows of one arm, for heatmaps over the
/// noise rate and step grid.
pub fn grid_means(records: &[ResultRecord], arm: Arm) -> Vec<(String, Option<f64>, Option<usize>, f64)> {
    cell_means(records, arm)
        .into_iter()
        .map(|(k, v)| (k.dataset, k.r, k.steps, v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: AugmentMethod, r: Option<f64>, steps: Option<usize>, rep: usize, loss: f64) -> ResultRecord {
        ResultRecord {
            dataset: "d".into(),
            net: "cnn".into(),
            method,
            conditional: false,
            r,
            steps,
            rep,
            seed: 0,
            test_loss: Some(loss),
            best_val_loss: Some(loss),
            train_seconds: None,
            config_hash: String::new(),
            denoiser_checkpoint_hash: None,
            model_checkpoint_hash: None,
            error: None,
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(loss_ratio(2.0, 2.0), 0.0);
        assert_eq!(loss_ratio(1.0, 3.0), -1.0);
        assert_eq!(loss_ratio(0.0, 0.0), 0.0);
    }

    #[test]
    fn all_ties_fall_in_rope() {
        let p = PairedRuns::new(vec![(1.0, 1.0); 5]).unwrap();
        let r = bayesian_signed_rank(&p, DEFAULT_ROPE, 2000, 1).unwrap();
        assert_eq!(r.p_rope, 1.0);
        assert_eq!(r.counts, [0, 2000, 0]);
    }

    #[test]
    fn too_few_pairs() {
        let p = PairedRuns::new(vec![(1.0, 2.0)]).unwrap();
        assert!(bayesian_signed_rank(&p, 0.05, 10, 0).is_err());
        assert!(PairedRuns::new(vec![(f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let p = PairedRuns::new((1..8).map(|i| (i as f64, 1.1 * i as f64 + 0.2)).collect()).unwrap();
        let a = bayesian_signed_rank(&p, 0.05, 3000, 4).unwrap();
        assert_eq!(a, bayesian_signed_rank(&p, 0.05, 3000, 4).unwrap());
        assert!((a.p_a_better + a.p_rope + a.p_b_better - 1.0).abs() < 1e-9);
    }

    #[test]
    fn arm_labels_round_trip() {
        for s in ["raw", "noise", "dae", "dae_cond", "dpm", "dpm_cond"] {
            assert_eq!(Arm::parse(s).unwrap().label(), s);
        }
        assert!(Arm::parse("noise_cond").is_err());
        assert!(Arm::parse("gan").is_err());
    }

    #[test]
    fn two_cells_three_reps_give_two_pairs() {
        let mut recs = Vec::new();
        for (i, r) in [0.1, 0.3].into_iter().enumerate() {
            for rep in 0..3 {
                recs.push(rec(AugmentMethod::Noise, Some(r), None, rep, 1.0 + i as f64 + rep as f64));
                recs.push(rec(AugmentMethod::Dpm, Some(r), Some(1), rep, 2.0 + rep as f64 * 0.1));
            }
        }
        let agg = aggregate_records(&recs, Arm::parse("dpm").unwrap(), Arm::parse("noise").unwrap()).unwrap();
        assert_eq!(agg.pairs.len(), 2);
        assert!(agg.dropped.is_empty());
        assert!((agg.pairs.pairs()[0].1 - 2.0).abs() < 1e-12);
        assert!((agg.pairs.pairs()[0].0 - 2.1).abs() < 1e-12);
    }

    #[test]
    fn raw_matches_every_grid_cell() {
        let mut recs = vec![rec(AugmentMethod::Raw, None, None, 0, 1.0)];
        for s in 1..=3 {
            recs.push(rec(AugmentMethod::Dpm, Some(0.2), Some(s), 0, s as f64));
        }
        let agg = aggregate_records(&recs, Arm::parse("dpm").unwrap(), Arm::parse("raw").unwrap()).unwrap();
        assert_eq!(agg.pairs.len(), 3);
        assert_eq!(agg.keys[2], "d/cnn/r=0.2/steps=3");
    }

    #[test]
    fn mismatched_cells_are_dropped_and_listed() {
        let recs = vec![
            rec(AugmentMethod::Noise, Some(0.1), None, 0, 1.0),
            rec(AugmentMethod::Dpm, Some(0.1), Some(1), 0, 1.0),
            rec(AugmentMethod::Dpm, Some(0.7), Some(1), 0, 1.0),
        ];
        let agg = aggregate_records(&recs, Arm::parse("dpm").unwrap(), Arm::parse("noise").unwrap()).unwrap();
        assert_eq!(agg.pairs.len(), 1);
        assert_eq!(agg.dropped, vec!["dpm d/cnn/r=0.7/steps=1".to_string()]);
        let none = aggregate_records(&recs, Arm::parse("dae").unwrap(), Arm::parse("noise").unwrap());
        assert!(none.is_err());
    }

    #[test]
    fn failed_runs_are_skipped_in_means() {
        let mut bad = rec(AugmentMethod::Raw, None, None, 2, 0.0);
        bad.test_loss = None;
        let recs = vec![
            rec(AugmentMethod::Raw, None, None, 0, 1.0),
            rec(AugmentMethod::Raw, None, None, 1, 2.0),
            bad,
        ];
        let m = cell_means(&recs, Arm::parse("raw").unwrap());
        assert_eq!(m.values().copied().collect::<Vec<_>>(), vec![1.5]);
    }
}
