//! Inclusion and ordering policy over the encoded candidate rows.
//!
//! Each candidate `i` is included independently with probability
//! `p_i = σ(x_q · W_m · x_iᵀ / √d)` and every unordered pair is oriented
//! `i → j` ("i comes first") with probability `σ(2 · sin(x_i − x_j) · w)`.
//! The drawn inclusion vector is then repaired to hold between 1 and
//! `k_max` candidates and the selected set is ordered by the tournament.
//!
//! `log_prob` is the log-density of the draw that produced the action: the
//! full Bernoulli likelihood of the pre-repair inclusion vector plus the
//! orientation terms of every pair whose direction can change the rendered
//! sequence (co-selected pairs, and the tied pairs when a forced pick is a
//! tie). Scoring the drawn vector rather than the repaired one keeps the
//! score-function gradient unbiased when repair fires.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamSet, TensorVisitor};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Pairwise order weights, length `d`.
    pub w: Array1<f64>,
    /// Query/candidate matching matrix, `d × d`.
    pub w_m: Array2<f64>,
}

impl PolicyParams {
    /// Uniform Xavier-style init on both tensors.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (6.0 / (dim + 1) as f64).sqrt();
        let w = Array1::from_shape_simple_fn(dim, || rng.random_range(-s..=s));
        let s = (6.0 / (2 * dim) as f64).sqrt();
        let w_m = Array2::from_shape_simple_fn((dim, dim), || rng.random_range(-s..=s));
        Self { w, w_m }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Array1::zeros(dim),
            w_m: Array2::zeros((dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

impl ParamSet for PolicyParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        f("policy.w", &[self.w.len()], self.w.as_slice().unwrap());
        let (r, c) = self.w_m.dim();
        f("policy.w_m", &[r, c], self.w_m.as_slice().unwrap());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("policy.w", self.w.as_slice_mut().unwrap());
        f("policy.w_m", self.w_m.as_slice_mut().unwrap());
    }
}

/// Orientation of every unordered pair of `n` nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tournament {
    n: usize,
    /// For each `i < j` in lexicographic order: `true` means `i → j`.
    forward: Vec<bool>,
}

impl Tournament {
    /// `first(i, j)` is called once per pair `i < j` and decides whether `i`
    /// precedes `j`.
    pub fn from_fn(n: usize, mut first: impl FnMut(usize, usize) -> bool) -> Self {
        let mut forward = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                forward.push(first(i, j));
            }
        }
        Self { n, forward }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    /// Whether `a` precedes `b`.
    pub fn beats(&self, a: usize, b: usize) -> bool {
        assert!(a != b, "a node does not play itself");
        if a < b {
            self.forward[self.slot(a, b)]
        } else {
            !self.forward[self.slot(b, a)]
        }
    }

    /// The pair `{i, j}` as `(winner, loser)`.
    pub fn oriented(&self, i: usize, j: usize) -> (usize, usize) {
        if self.beats(i, j) {
            (i, j)
        } else {
            (j, i)
        }
    }
}

/// Orders `selected` by the tournament restricted to it.
///
/// Nodes are sorted by descending win count within the selected set, ties by
/// ascending index. A tournament is acyclic exactly when its win counts are
/// all distinct, and then this sort is its unique topological order; on
/// cyclic tournaments it is the Copeland order.
pub fn order_selected(tournament: &Tournament, selected: &[usize]) -> Vec<usize> {
    let wins = |a: usize| selected.iter().filter(|&&b| b != a && tournament.beats(a, b)).count();
    let mut keyed: Vec<(usize, usize)> = selected.iter().map(|&a| (wins(a), a)).collect();
    keyed.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
    keyed.into_iter().map(|(_, a)| a).collect()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(s)`, stable for large `|s|`.
fn log_sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

fn check_dim(a: usize, b: usize, what: &str) -> Result<(), PolicyError> {
    if a == b {
        Ok(())
    } else {
        Err(PolicyError::Argument(format!("{what}: dimension {a} vs {b}")))
    }
}

fn pair_logit(xi: ArrayView1<f64>, xj: ArrayView1<f64>, w: ArrayView1<f64>) -> f64 {
    xi.iter().zip(xj).zip(w).map(|((a, b), w)| (a - b).sin() * w).sum()
}

/// Probability that `x_i` precedes `x_j`: `σ(2s)` with `s = sin(x_i − x_j) · w`.
pub fn pair_score(xi: &[f64], xj: &[f64], w: &[f64]) -> Result<f64, PolicyError> {
    check_dim(xi.len(), xj.len(), "pair_score")?;
    check_dim(xi.len(), w.len(), "pair_score")?;
    Ok(sigmoid(2.0 * pair_logit(xi.into(), xj.into(), w.into())))
}

fn match_logit(xq: ArrayView1<f64>, xc: ArrayView1<f64>, w_m: &Array2<f64>) -> f64 {
    xq.dot(&w_m.dot(&xc)) / (xq.len() as f64).sqrt()
}

/// Inclusion probability `σ(x_q · W_m · x_cᵀ / √d)`.
pub fn match_prob(xq: &[f64], xc: &[f64], w_m: &Array2<f64>) -> Result<f64, PolicyError> {
    check_dim(xq.len(), xc.len(), "match_prob")?;
    check_dim(w_m.nrows(), xq.len(), "match_prob")?;
    check_dim(w_m.ncols(), xq.len(), "match_prob")?;
    Ok(sigmoid(match_logit(xq.into(), xc.into(), w_m)))
}

/// Inclusion logits and pairwise order logits for one encoded graph.
#[derive(Debug, Clone)]
pub struct Scores {
    /// `s_i`; `p_i = σ(s_i)`.
    pub inclusion: Vec<f64>,
    /// `t_ij = sin(x_i − x_j) · w`; `P(i → j) = σ(2 t_ij)`.
    pub order: Array2<f64>,
}

impl Scores {
    /// `x` holds the candidate rows followed by the query row.
    pub fn compute(x: &Array2<f64>, params: &PolicyParams) -> Result<Self, PolicyError> {
        if x.nrows() < 2 {
            return Err(PolicyError::Argument("need at least one candidate and the query".into()));
        }
        check_dim(x.ncols(), params.dim(), "policy input")?;
        check_dim(params.w_m.nrows(), params.dim(), "policy W_m")?;
        check_dim(params.w_m.ncols(), params.dim(), "policy W_m")?;
        let n = x.nrows() - 1;
        let xq = x.row(n);
        let inclusion = (0..n).map(|i| match_logit(xq, x.row(i), &params.w_m)).collect();
        let mut order = Array2::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let t = pair_logit(x.row(i), x.row(j), params.w.view());
                order[[i, j]] = t;
                order[[j, i]] = -t;
            }
        }
        Ok(Self { inclusion, order })
    }

    pub fn num_candidates(&self) -> usize {
        self.inclusion.len()
    }

    pub fn inclusion_prob(&self, i: usize) -> f64 {
        sigmoid(self.inclusion[i])
    }

    pub fn order_prob(&self, i: usize, j: usize) -> f64 {
        sigmoid(2.0 * self.order[[i, j]])
    }

    /// Log-probability of a draw, scoring only the listed oriented pairs.
    pub fn log_prob(&self, drawn: &[bool], scored: &[(usize, usize)]) -> f64 {
        let bern: f64 = drawn
            .iter()
            .zip(&self.inclusion)
            .map(|(&z, &s)| if z { log_sigmoid(s) } else { log_sigmoid(-s) })
            .sum();
        let pairs: f64 = scored.iter().map(|&(a, b)| log_sigmoid(2.0 * self.order[[a, b]])).sum();
        bern + pairs
    }

    /// Full product-measure log-probability of an atom (all pairs scored).
    pub fn atom_log_prob(&self, drawn: &[bool], tournament: &Tournament) -> f64 {
        let n = self.num_candidates();
        let mut all = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                all.push(tournament.oriented(i, j));
            }
        }
        self.log_prob(drawn, &all)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSample {
    /// Post-repair inclusion vector.
    pub include: Vec<bool>,
    /// Inclusion vector as drawn, before repair.
    pub drawn: Vec<bool>,
    pub tournament: Tournament,
    pub sequence: Vec<usize>,
    /// Oriented `(first, second)` pairs that contribute to `log_prob`.
    pub scored_pairs: Vec<(usize, usize)>,
    pub log_prob: f64,
}

/// Applies the repair rules and ordering to a drawn atom.
pub fn resolve(scores: &Scores, drawn: Vec<bool>, tournament: Tournament, k_max: usize) -> ActionSample {
    let n = scores.num_candidates();
    let s = &scores.inclusion;
    let mut chosen: Vec<usize> = (0..n).filter(|&i| drawn[i]).collect();
    let mut scored_pairs = Vec::new();
    if chosen.is_empty() {
        let best = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..n).filter(|&i| s[i] == best).collect();
        for (a, &i) in tied.iter().enumerate() {
            for &j in &tied[a + 1..] {
                scored_pairs.push(tournament.oriented(i, j));
            }
        }
        chosen = vec![order_selected(&tournament, &tied)[0]];
    } else if chosen.len() > k_max {
        chosen.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        chosen.truncate(k_max);
        chosen.sort_unstable();
    }
    if chosen.len() > 1 {
        for (a, &i) in chosen.iter().enumerate() {
            for &j in &chosen[a + 1..] {
                scored_pairs.push(tournament.oriented(i, j));
            }
        }
    }
    let mut include = vec![false; n];
    for &i in &chosen {
        include[i] = true;
    }
    let sequence = order_selected(&tournament, &chosen);
    let log_prob = scores.log_prob(&drawn, &scored_pairs);
    ActionSample {
        include,
        drawn,
        tournament,
        sequence,
        scored_pairs,
        log_prob,
    }
}

fn check_k(k_max: usize) -> Result<(), PolicyError> {
    if k_max == 0 {
        Err(PolicyError::Argument("k_max must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Draws inclusions (candidate order) then orientations (pairs `i < j` in
/// lexicographic order) from `rng`.
pub fn sample_action(scores: &Scores, k_max: usize, rng: &mut impl Rng) -> Result<ActionSample, PolicyError> {
    check_k(k_max)?;
    let n = scores.num_candidates();
    let drawn: Vec<bool> = (0..n).map(|i| rng.random::<f64>() < scores.inclusion_prob(i)).collect();
    let tournament = Tournament::from_fn(n, |i, j| rng.random::<f64>() < scores.order_prob(i, j));
    Ok(resolve(scores, drawn, tournament, k_max))
}

/// Includes `p_i ≥ 0.5` and orients each pair toward its likelier direction
/// (ties put the lower index first).
pub fn greedy_action(scores: &Scores, k_max: usize) -> Result<ActionSample, PolicyError> {
    check_k(k_max)?;
    let drawn = scores.inclusion.iter().map(|&s| s >= 0.0).collect();
    let tournament = Tournament::from_fn(scores.num_candidates(), |i, j| scores.order[[i, j]] >= 0.0);
    Ok(resolve(scores, drawn, tournament, k_max))
}

/// Gradient of `action.log_prob` w.r.t. the policy parameters and the
/// encoded rows `x`.
///
/// The action must have been produced from this same `x`; a stale pairing
/// cannot be detected.
pub fn action_log_prob_grad(
    x: &Array2<f64>,
    params: &PolicyParams,
    action: &ActionSample,
) -> Result<(PolicyParams, Array2<f64>), PolicyError> {
    let scores = Scores::compute(x, params)?;
    let n = scores.num_candidates();
    check_dim(action.drawn.len(), n, "action")?;
    let d = params.dim();
    let root_d = (d as f64).sqrt();
    let mut grad = PolicyParams::zeros(d);
    let mut dx = Array2::zeros(x.dim());
    let xq = x.row(n).to_owned();
    let wt_xq = params.w_m.t().dot(&xq);

    for i in 0..n {
        let z = if action.drawn[i] { 1.0 } else { 0.0 };
        let c = (z - scores.inclusion_prob(i)) / root_d;
        if c == 0.0 {
            continue;
        }
        let xi = x.row(i);
        for a in 0..d {
            for b in 0..d {
                grad.w_m[[a, b]] += c * xq[a] * xi[b];
            }
        }
        let w_xi = params.w_m.dot(&xi);
        dx.row_mut(n).scaled_add(c, &w_xi);
        dx.row_mut(i).scaled_add(c, &wt_xq);
    }

    for &(a, b) in &action.scored_pairs {
        // ln σ(2t), t = sin(x_a − x_b) · w
        let g = 2.0 * (1.0 - scores.order_prob(a, b));
        for k in 0..d {
            let diff = x[[a, k]] - x[[b, k]];
            grad.w[k] += g * diff.sin();
            let dt = g * diff.cos() * params.w[k];
            dx[[a, k]] += dt;
            dx[[b, k]] -= dt;
        }
    }
    Ok((grad, dx))
}

/// One atom of the product measure and the action it resolves to.
#[derive(Debug, Clone)]
pub struct Atom {
    pub prob: f64,
    pub action: ActionSample,
}

/// Every (inclusion draw, tournament) atom with its probability. Only
/// feasible for small pools.
pub fn enumerate_atoms(scores: &Scores, k_max: usize) -> Result<Vec<Atom>, PolicyError> {
    check_k(k_max)?;
    let n = scores.num_candidates();
    if n > 5 {
        return Err(PolicyError::Argument(format!("enumeration over {n} candidates is too large")));
    }
    let pairs = n * n.saturating_sub(1) / 2;
    let mut atoms = Vec::with_capacity((1 << n) << pairs);
    for zmask in 0u32..(1 << n) {
        let drawn: Vec<bool> = (0..n).map(|i| zmask >> i & 1 == 1).collect();
        for omask in 0u32..(1 << pairs) {
            let mut bit = 0;
            let tournament = Tournament::from_fn(n, |_, _| {
                let f = omask >> bit & 1 == 1;
                bit += 1;
                f
            });
            let prob = scores.atom_log_prob(&drawn, &tournament).exp();
            atoms.push(Atom {
                prob,
                action: resolve(scores, drawn.clone(), tournament, k_max),
            });
        }
    }
    Ok(atoms)
}
