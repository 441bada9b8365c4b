//! Bradley-Terry strengths from pairwise preferences, fitted by the
//! minorization-maximization iteration and reported as label-preserving
//! factors relative to a reference item.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const VIRTUAL_ITEM: &str = "\u{0}virtual";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Winner {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Comparison {
    pub item_a: String,
    pub item_b: String,
    pub winner: Winner,
}

impl Comparison {
    pub fn new(item_a: impl Into<String>, item_b: impl Into<String>, winner: Winner) -> Self {
        Comparison {
            item_a: item_a.into(),
            item_b: item_b.into(),
            winner,
        }
    }

    pub fn winner_name(&self) -> &str {
        match self.winner {
            Winner::A => &self.item_a,
            Winner::B => &self.item_b,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtOptions {
    /// Item whose LP factor is pinned to 1.
    pub groundtruth: String,
    pub max_iter: usize,
    /// Convergence threshold on the largest relative strength change.
    pub tol: f64,
    /// Adds half a win and half a loss for every item against a virtual
    /// opponent, which keeps the estimate finite for unbeaten or winless
    /// items.
    pub virtual_ties: bool,
}

impl Default for BtOptions {
    fn default() -> Self {
        BtOptions {
            groundtruth: "groundtruth".into(),
            max_iter: 10_000,
            tol: 1e-8,
            virtual_ties: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtScores {
    /// Strengths normalised to unit geometric mean.
    pub scores: BTreeMap<String, f64>,
    pub lp_factors: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first update and after every iteration.
    pub log_likelihoods: Vec<f64>,
}

impl BtScores {
    /// `(item, lp_factor)` sorted by descending factor, ties by name.
    pub fn ranked(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.lp_factors.iter().map(|(k, &v)| (k.clone(), v)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

struct Tally {
    names: Vec<String>,
    /// `wins[i][j]`: times i beat j (may be fractional with virtual ties).
    wins: Vec<Vec<f64>>,
}

impl Tally {
    fn build(comparisons: &[Comparison], virtual_ties: bool) -> Result<Tally> {
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for c in comparisons {
            if c.item_a == c.item_b {
                return Err(Error::BradleyTerry(format!("item '{}' compared with itself", c.item_a)));
            }
            names.insert(&c.item_a);
            names.insert(&c.item_b);
        }
        let mut names: Vec<String> = names.into_iter().map(String::from).collect();
        if virtual_ties {
            names.push(VIRTUAL_ITEM.to_string());
        }
        let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let k = names.len();
        let mut wins = vec![vec![0.0; k]; k];
        for c in comparisons {
            let (a, b) = (index[c.item_a.as_str()], index[c.item_b.as_str()]);
            match c.winner {
                Winner::A => wins[a][b] += 1.0,
                Winner::B => wins[b][a] += 1.0,
            }
        }
        if virtual_ties {
            let v = k - 1;
            for i in 0..v {
                wins[i][v] += 0.5;
                wins[v][i] += 0.5;
            }
        }
        Ok(Tally { names, wins })
    }

    fn len(&self) -> usize {
        self.names.len()
    }

    fn games(&self, i: usize, j: usize) -> f64 {
        self.wins[i][j] + self.wins[j][i]
    }

    fn reach(&self, start: usize, forward: bool) -> Vec<bool> {
        let k = self.len();
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..k {
                let edge = if forward { self.wins[i][j] } else { self.wins[j][i] };
                if edge > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen
    }

    fn display_names(&self, members: &[usize]) -> String {
        let names: Vec<&str> = members
            .iter()
            .filter(|&&i| self.names[i] != VIRTUAL_ITEM)
            .map(|&i| self.names[i].as_str())
            .collect();
        format!("{{{}}}", names.join(", "))
    }

    /// Connected components of the undirected comparison graph.
    fn components(&self) -> Vec<Vec<usize>> {
        let k = self.len();
        let mut comp = vec![usize::MAX; k];
        let mut out = Vec::new();
        for s in 0..k {
            if comp[s] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![s];
            comp[s] = id;
            let mut queue = VecDeque::from([s]);
            while let Some(i) = queue.pop_front() {
                for j in 0..k {
                    if self.games(i, j) > 0.0 && comp[j] == usize::MAX {
                        comp[j] = id;
                        members.push(j);
                        queue.push_back(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    /// Strongly connected components of the "beat" graph.
    fn strong_components(&self) -> Vec<Vec<usize>> {
        let k = self.len();
        let mut assigned = vec![false; k];
        let mut out = Vec::new();
        for s in 0..k {
            if assigned[s] {
                continue;
            }
            let fwd = self.reach(s, true);
            let bwd = self.reach(s, false);
            let members: Vec<usize> = (0..k).filter(|&j| fwd[j] && bwd[j]).collect();
            members.iter().for_each(|&j| assigned[j] = true);
            out.push(members);
        }
        out
    }

    fn log_likelihood(&self, s: &[f64]) -> f64 {
        let k = self.len();
        let mut ll = 0.0;
        for i in 0..k {
            for j in 0..k {
                if self.wins[i][j] > 0.0 {
                    ll += self.wins[i][j] * (s[i] / (s[i] + s[j])).ln();
                }
            }
        }
        ll
    }
}

/// Maximum-likelihood Bradley-Terry fit.
///
/// Rejects datasets without a finite maximiser: a disconnected comparison
/// graph, or items that never win or never lose (unless `virtual_ties`).
pub fn bt_fit(comparisons: &[Comparison], opts: &BtOptions) -> Result<BtScores> {
    if comparisons.is_empty() {
        return Err(Error::BradleyTerry("no comparisons".into()));
    }
    let tally = Tally::build(comparisons, opts.virtual_ties)?;
    let k = tally.len();
    let gt = tally
        .names
        .iter()
        .position(|n| *n == opts.groundtruth)
        .ok_or_else(|| {
            Error::BradleyTerry(format!(
                "reference item '{}' has zero wins and zero losses",
                opts.groundtruth
            ))
        })?;

    let components = tally.components();
    if components.len() > 1 {
        let listed: Vec<String> = components.iter().map(|c| tally.display_names(c)).collect();
        return Err(Error::BradleyTerry(format!(
            "comparison graph is disconnected; components: {}",
            listed.join(" ")
        )));
    }
    for i in 0..k {
        let won: f64 = tally.wins[i].iter().sum();
        let lost: f64 = (0..k).map(|j| tally.wins[j][i]).sum();
        if won == 0.0 {
            return Err(Error::BradleyTerry(format!(
                "item '{}' never wins; its strength has no finite estimate",
                tally.names[i]
            )));
        }
        if lost == 0.0 {
            return Err(Error::BradleyTerry(format!(
                "item '{}' never loses; its strength has no finite estimate",
                tally.names[i]
            )));
        }
    }
    let strong = tally.strong_components();
    if strong.len() > 1 {
        let listed: Vec<String> = strong.iter().map(|c| tally.display_names(c)).collect();
        return Err(Error::BradleyTerry(format!(
            "some group of items never beats the rest; strongly connected groups: {}",
            listed.join(" ")
        )));
    }

    let total_wins: Vec<f64> = tally.wins.iter().map(|row| row.iter().sum()).collect();
    let mut s = vec![1.0; k];
    let mut log_likelihoods = vec![tally.log_likelihood(&s)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut next = vec![0.0; k];
        for i in 0..k {
            let denom: f64 = (0..k)
                .filter(|&j| j != i)
                .map(|j| tally.games(i, j) / (s[i] + s[j]))
                .sum();
            next[i] = total_wins[i] / denom;
        }
        let log_mean = next.iter().map(|v| v.ln()).sum::<f64>() / k as f64;
        let g = log_mean.exp();
        next.iter_mut().for_each(|v| *v /= g);
        let change = next
            .iter()
            .zip(&s)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        s = next;
        log_likelihoods.push(tally.log_likelihood(&s));
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let mut scores = BTreeMap::new();
    let mut lp_factors = BTreeMap::new();
    for (i, name) in tally.names.iter().enumerate() {
        if name == VIRTUAL_ITEM {
            continue;
        }
        scores.insert(name.clone(), s[i]);
        lp_factors.insert(name.clone(), s[i] / s[gt]);
    }
    Ok(BtScores {
        scores,
        lp_factors,
        iterations,
        converged,
        log_likelihoods,
    })
}

/// Random pairings with Bradley-Terry outcomes: each comparison picks two
/// distinct items uniformly and the first wins with `s_a / (s_a + s_b)`.
pub fn simulate_tournament(true_scores: &[(String, f64)], n_comparisons: usize, seed: u64) -> Result<Vec<Comparison>> {
    if true_scores.len() < 2 {
        return Err(Error::BradleyTerry("need at least two items to simulate".into()));
    }
    if let Some((name, _)) = true_scores.iter().find(|(_, s)| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::BradleyTerry(format!("strength of '{}' must be positive", name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = true_scores.len();
    let mut out = Vec::with_capacity(n_comparisons);
    for _ in 0..n_comparisons {
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        let (sa, sb) = (true_scores[a].1, true_scores[b].1);
        let winner = if rng.random::<f64>() < sa / (sa + sb) { Winner::A } else { Winner::B };
        out.push(Comparison::new(true_scores[a].0.clone(), true_scores[b].0.clone(), winner));
    }
    Ok(out)
}

/// Parses `item_a,item_b,winner` lines. `winner` names one of the two items
/// (or is the literal `a`/`b`). Blank lines and `#` comments are skipped.
pub fn parse_comparisons(text: &str) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::Parse {
            path: "<comparisons>".into(),
            line: lineno as u64 + 1,
            msg,
        };
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        }
        let (a, b, w) = (fields[0], fields[1], fields[2]);
        let winner = if w == a {
            Winner::A
        } else if w == b {
            Winner::B
        } else if w == "a" {
            Winner::A
        } else if w == "b" {
            Winner::B
        } else {
            return Err(bad(format!("winner '{}' is neither '{}' nor '{}'", w, a, b)));
        };
        if a == b {
            return Err(bad(format!("item '{}' compared with itself", a)));
        }
        out.push(Comparison::new(a, b, winner));
    }
    Ok(out)
}

/// `item,lp_factor` lines sorted by descending factor.
pub fn format_lp_factors(scores: &BtScores) -> String {
    scores
        .ranked()
        .into_iter()
        .map(|(name, f)| format!("{},{}\n", name, f))
        .collect()
}
