//! Tree-based genetic programming for symbolic regression.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::expr::{BinaryOp, Expr, LagRef, UnaryOp};
use super::optim::levenberg_marquardt;
use super::training::{TrainingSet, DEFAULT_LAG_BUDGET};
use crate::error::{Error, Result};
use crate::ingest::Channel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    /// Node-count limit for every tree.
    pub max_complexity: usize,
    /// Deepest tree drawn at initialization (ramped half-and-half).
    pub init_max_depth: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Per-kind probabilities applied independently inside [`mutate`].
    pub subtree_mutation_prob: f64,
    pub point_mutation_prob: f64,
    pub constant_jitter_prob: f64,
    /// Fitness is `mse + parsimony * complexity`.
    pub parsimony: f64,
    /// Model evaluations per constant spent tuning each individual's
    /// constants (Levenberg-Marquardt) before scoring; tuned values are
    /// kept. 0 disables tuning.
    pub tune_evals_per_constant: usize,
    pub seed: u64,
    pub lag_budget: usize,
    pub channels: Vec<Channel>,
    pub binary_ops: Vec<BinaryOp>,
    pub unary_ops: Vec<UnaryOp>,
    /// Chance that a fresh terminal is a variable rather than a constant.
    pub variable_prob: f64,
    pub constant_min: f64,
    pub constant_max: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            population: 500,
            generations: 40,
            tournament_size: 3,
            max_complexity: 30,
            init_max_depth: 5,
            crossover_prob: 0.7,
            mutation_prob: 0.3,
            subtree_mutation_prob: 0.5,
            point_mutation_prob: 0.5,
            constant_jitter_prob: 0.5,
            parsimony: 1e-4,
            tune_evals_per_constant: 10,
            seed: 0,
            lag_budget: DEFAULT_LAG_BUDGET,
            channels: Channel::ALL.to_vec(),
            binary_ops: vec![BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul],
            unary_ops: Vec::new(),
            variable_prob: 0.6,
            constant_min: -2.0,
            constant_max: 2.0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, p) in [
            ("crossover_prob", self.crossover_prob),
            ("mutation_prob", self.mutation_prob),
            ("subtree_mutation_prob", self.subtree_mutation_prob),
            ("point_mutation_prob", self.point_mutation_prob),
            ("constant_jitter_prob", self.constant_jitter_prob),
            ("variable_prob", self.variable_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.crossover_prob + self.mutation_prob > 1.0 + 1e-12 {
            return bad("crossover_prob + mutation_prob exceeds 1".into());
        }
        if self.population < 2 {
            return bad(format!("population must be at least 2, got {}", self.population));
        }
        if self.tournament_size == 0 || self.max_complexity == 0 || self.init_max_depth == 0 {
            return bad("tournament_size, max_complexity and init_max_depth must be positive".into());
        }
        if self.lag_budget == 0 || self.channels.is_empty() || self.binary_ops.is_empty() {
            return bad("lag budget, channels and binary operators must be non-empty".into());
        }
        if !(self.parsimony >= 0.0 && self.constant_min <= self.constant_max) {
            return bad("parsimony must be >= 0 and constant_min <= constant_max".into());
        }
        Ok(())
    }

    /// A seeded generator for this configuration.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Lags are drawn log-uniformly over `1..=budget`, so short lags are about
/// as likely as whole-day ones in log scale.
fn random_lag(budget: usize, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let lag = ((budget as f64 + 1.0).ln() * u).exp().floor() as usize;
    lag.clamp(1, budget)
}

fn random_terminal(config: &GpConfig, rng: &mut impl Rng) -> Expr {
    if rng.gen_bool(config.variable_prob) {
        let channel = *config.channels.choose(rng).expect("channels validated non-empty");
        Expr::Var(LagRef::new(channel, random_lag(config.lag_budget, rng)))
    } else {
        Expr::Const(rng.gen_range(config.constant_min..=config.constant_max))
    }
}

fn random_tree(config: &GpConfig, depth: usize, full: bool, rng: &mut impl Rng) -> Expr {
    let n_ops = config.binary_ops.len() + config.unary_ops.len();
    if depth <= 1 || (!full && rng.gen_bool(0.3)) {
        return random_terminal(config, rng);
    }
    let pick = rng.gen_range(0..n_ops);
    if pick < config.binary_ops.len() {
        let left = random_tree(config, depth - 1, full, rng);
        let right = random_tree(config, depth - 1, full, rng);
        Expr::binary(config.binary_ops[pick], left, right)
    } else {
        let op = config.unary_ops[pick - config.binary_ops.len()];
        Expr::unary(op, random_tree(config, depth - 1, full, rng))
    }
}

fn tree_within(config: &GpConfig, mut depth: usize, full: bool, rng: &mut impl Rng) -> Expr {
    loop {
        let tree = random_tree(config, depth, full, rng);
        if tree.complexity() <= config.max_complexity {
            return tree;
        }
        depth = (depth - 1).max(1);
    }
}

/// Ramped half-and-half: a uniform depth in `1..=init_max_depth`, grown
/// either full or by random early termination. Constants are uniform in
/// `[constant_min, constant_max]`.
pub fn random_expression(config: &GpConfig, rng: &mut impl Rng) -> Expr {
    let depth = rng.gen_range(1..=config.init_max_depth);
    let full = rng.gen_bool(0.5);
    tree_within(config, depth, full, rng)
}

fn point_mutation(node: &Expr, config: &GpConfig, rng: &mut impl Rng) -> Expr {
    match node {
        Expr::Var(r) => {
            if rng.gen_bool(0.5) {
                let channel = *config.channels.choose(rng).expect("non-empty");
                Expr::Var(LagRef::new(channel, r.lag.min(config.lag_budget)))
            } else {
                Expr::Var(LagRef::new(r.channel, random_lag(config.lag_budget, rng)))
            }
        }
        Expr::Const(_) => random_terminal(config, rng),
        Expr::Unary(op, x) => {
            let op = if config.unary_ops.is_empty() {
                *op
            } else {
                *config.unary_ops.choose(rng).expect("non-empty")
            };
            Expr::Unary(op, x.clone())
        }
        Expr::Binary(_, a, b) => {
            let op = *config.binary_ops.choose(rng).expect("non-empty");
            Expr::Binary(op, a.clone(), b.clone())
        }
    }
}

/// Applies subtree replacement, point mutation and constant jitter, each
/// with its own probability. An offspring over the complexity limit is
/// discarded in favour of the parent.
pub fn mutate(expr: &Expr, config: &GpConfig, rng: &mut impl Rng) -> Expr {
    let mut out = expr.clone();
    if rng.gen_bool(config.subtree_mutation_prob) {
        let at = rng.gen_range(0..out.complexity());
        let depth = rng.gen_range(1..=config.init_max_depth.min(4));
        let full = rng.gen_bool(0.5);
        out = out.replace_node(at, tree_within(config, depth, full, rng));
    }
    if rng.gen_bool(config.point_mutation_prob) {
        let at = rng.gen_range(0..out.complexity());
        let node = out.node(at).expect("index within tree");
        let replacement = point_mutation(node, config, rng);
        out = out.replace_node(at, replacement);
    }
    if rng.gen_bool(config.constant_jitter_prob) {
        let mut constants = out.constants();
        if !constants.is_empty() {
            let i = rng.gen_range(0..constants.len());
            let c = constants[i];
            constants[i] = c * (1.0 + rng.gen_range(-0.1..=0.1)) + rng.gen_range(-0.05..=0.05);
            out = out.with_constants(&constants);
        }
    }
    if out.complexity() > config.max_complexity {
        expr.clone()
    } else {
        out
    }
}

/// Replaces a random subtree of `a` with a random subtree of `b`.
pub fn crossover(a: &Expr, b: &Expr, config: &GpConfig, rng: &mut impl Rng) -> Expr {
    let at = rng.gen_range(0..a.complexity());
    let from = rng.gen_range(0..b.complexity());
    let donor = b.node(from).expect("index within tree").clone();
    let child = a.replace_node(at, donor);
    if child.complexity() > config.max_complexity {
        a.clone()
    } else {
        child
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionResult {
    pub best: Expr,
    pub best_fitness: f64,
    pub best_mse: f64,
    /// Best-so-far fitness after initialization and after each generation.
    pub history: Vec<f64>,
}

fn fitness(expr: &Expr, data: &TrainingSet, parsimony: f64) -> f64 {
    let mse = data.mse(expr);
    if mse.is_finite() {
        mse + parsimony * expr.complexity() as f64
    } else {
        f64::INFINITY
    }
}

/// Short local search over the constants, then the fitness of the result.
fn tune_and_score(expr: Expr, data: &TrainingSet, config: &GpConfig) -> (Expr, f64) {
    let constants = expr.constants();
    if config.tune_evals_per_constant == 0 || constants.is_empty() {
        let f = fitness(&expr, data, config.parsimony);
        return (expr, f);
    }
    let (x, _) = levenberg_marquardt(
        |c| data.predict(&expr.with_constants(c)),
        data.targets(),
        &constants,
        config.tune_evals_per_constant * constants.len(),
    );
    let tuned = if x != constants && x.iter().all(|c| c.is_finite()) {
        expr.with_constants(&x)
    } else {
        expr
    };
    let f = fitness(&tuned, data, config.parsimony);
    (tuned, f)
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn tournament<'a>(population: &'a [Expr], fitness: &[f64], size: usize, rng: &mut impl Rng) -> &'a Expr {
    let mut best = rng.gen_range(0..population.len());
    for _ in 1..size {
        let i = rng.gen_range(0..population.len());
        if fitness[i] < fitness[best] || (fitness[i] == fitness[best] && i < best) {
            best = i;
        }
    }
    &population[best]
}

/// Generational GP with tournament selection and an elite of one.
///
/// Fitness is evaluated in parallel; all random draws come from a single
/// seeded stream, so results depend only on the seed.
pub fn run_evolution(train: &TrainingSet, config: &GpConfig) -> Result<EvolutionResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::TooFew {
            what: "training rows",
            needed: 1,
            got: 0,
        });
    }
    if config.lag_budget > train.lag_budget() {
        return Err(Error::InvalidArgument(format!(
            "GP lag budget {} exceeds the training set's {}",
            config.lag_budget,
            train.lag_budget()
        )));
    }
    let mut rng = config.rng();
    let evaluate = |pop: Vec<Expr>| -> (Vec<Expr>, Vec<f64>) {
        pop.into_par_iter().map(|e| tune_and_score(e, train, config)).unzip()
    };

    let (mut population, mut scores) = evaluate(
        (0..config.population)
            .map(|_| random_expression(config, &mut rng))
            .collect(),
    );
    let first = argmin(&scores);
    let mut best = (population[first].clone(), scores[first]);
    let mut history = vec![best.1];

    for _ in 0..config.generations {
        let elite = argmin(&scores);
        let mut next = Vec::with_capacity(config.population);
        next.push(population[elite].clone());
        while next.len() < config.population {
            let r: f64 = rng.gen();
            let child = if r < config.crossover_prob {
                let a = tournament(&population, &scores, config.tournament_size, &mut rng);
                let b = tournament(&population, &scores, config.tournament_size, &mut rng);
                crossover(a, b, config, &mut rng)
            } else if r < config.crossover_prob + config.mutation_prob {
                let a = tournament(&population, &scores, config.tournament_size, &mut rng);
                mutate(a, config, &mut rng)
            } else {
                tournament(&population, &scores, config.tournament_size, &mut rng).clone()
            };
            next.push(child);
        }
        (population, scores) = evaluate(next);
        let gen_best = argmin(&scores);
        if scores[gen_best] < best.1 {
            best = (population[gen_best].clone(), scores[gen_best]);
        }
        history.push(best.1);
    }

    let best_mse = train.mse(&best.0);
    Ok(EvolutionResult {
        best: best.0,
        best_fitness: best.1,
        best_mse,
        history,
    })
}
