//! Synthetic search logs drawn from an explicit causal model, with oracle
//! relevance, preference, sensitivity and Venn-area labels.
//!
//! Latent factors: users `z_u`, queries `z_q` and items `z_i` in `R^k`. Item
//! factors are rescaled to norm `√k`, which makes the per-item marginal
//! relevance and preference rates identical across items, so `P*` and `R*`
//! are uncorrelated under uniform exposure.
//!
//! * `R* ~ Bernoulli(σ(a⟨z_q, z_i⟩/√k + c_R))`
//! * `P* ~ Bernoulli(σ(a⟨z_u, z_i⟩/√k + c_P))`
//!
//! with offsets `c_R`, `c_P` calibrated to the target marginal rates. With
//! probability `γ` a candidate comes from the query's relevant pool,
//! re-weighted towards the user's taste (a personalized engine), which is
//! what entangles `P*` and `R*` in the logs. Behavior follows the area
//! semantics:
//!
//! | P* | R* | y |
//! |----|----|---|
//! | 1  | 1  | 1 |
//! | 1  | 0  | Bernoulli(π_P · (1 − κ·s)) |
//! | 0  | 1  | Bernoulli(π_R · s) |
//! | 0  | 0  | 0 |
//!
//! where `s = √(s_u · s_q)` is the per-(user, query) relevance sensitivity and
//! `κ` the irrelevance aversion.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{FeatureSpec, SessionExample, MAX_HISTORY};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, dot, rng_from_seed, sigmoid, DrpRng};

pub const AREA_COUNT: usize = 6;

/// Maps a `(P, R, B)` triple to its Venn area.
pub fn label_area(p: u8, r: u8, b: u8) -> Result<u8> {
    match (p, r, b) {
        (0, 0, 0) => Ok(0),
        (1, 0, 0) => Ok(1),
        (1, 0, 1) => Ok(2),
        (1, 1, 1) => Ok(3),
        (0, 1, 1) => Ok(4),
        (0, 1, 0) => Ok(5),
        (0, 0, 1) | (1, 1, 0) => Err(Error::Contradiction { p, r, b }),
        _ => Err(Error::Domain(format!(
            "({p}, {r}, {b}) is not a binary triple"
        ))),
    }
}

/// `(P, R, B)` of an area id.
pub fn area_triple(area: u8) -> Option<(u8, u8, u8)> {
    const TABLE: [(u8, u8, u8); AREA_COUNT] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
        (0, 1, 0),
    ];
    TABLE.get(area as usize).copied()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub preference: u8,
    pub relevance: u8,
    pub sensitivity: f64,
    pub area: u8,
}

/// An impression plus, for synthetic data, its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub example: SessionExample,
    pub oracle: Option<OracleLabels>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub users: usize,
    pub queries: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Total impressions to emit.
    pub interactions: usize,
    /// Impressions per search session.
    pub session_size: usize,
    /// Probability a candidate is drawn from the relevant pool instead of uniformly.
    pub gamma: f64,
    /// Click rate for preferred but irrelevant items (before sensitivity).
    pub pi_p: f64,
    /// Click rate for relevant but non-preferred items (before sensitivity).
    pub pi_r: f64,
    pub sensitivity_alpha: f64,
    pub sensitivity_beta: f64,
    /// How strongly high sensitivity suppresses clicks on irrelevant preferred items.
    pub irrelevance_aversion: f64,
    /// Target mean of `σ(relevance logit)` under uniform exposure.
    pub relevance_rate: f64,
    pub preference_rate: f64,
    /// Latent inner-product scale `a`.
    pub signal_scale: f64,
    /// Share of the catalogue forming each query's relevant pool.
    pub pool_fraction: f64,
    /// Temperature of the user-taste tilt inside the relevant pool.
    pub exposure_personalization: f64,
    /// Zipf exponent of item exposure; item popularity ranks are a random
    /// permutation independent of the latent factors. Zero means uniform.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            users: 2_000,
            queries: 5_000,
            items: 20_000,
            latent_dim: 8,
            interactions: 200_000,
            session_size: 10,
            gamma: 0.5,
            pi_p: 0.6,
            pi_r: 0.8,
            sensitivity_alpha: 0.5,
            sensitivity_beta: 0.5,
            irrelevance_aversion: 1.0,
            relevance_rate: 0.25,
            preference_rate: 0.25,
            signal_scale: 3.0,
            pool_fraction: 0.05,
            exposure_personalization: 1.0,
            popularity_exponent: 1.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {x}")))
            }
        };
        prob("gamma", self.gamma)?;
        prob("pi_p", self.pi_p)?;
        prob("pi_r", self.pi_r)?;
        prob("irrelevance_aversion", self.irrelevance_aversion)?;
        prob("pool_fraction", self.pool_fraction)?;
        for (name, x) in [
            ("relevance_rate", self.relevance_rate),
            ("preference_rate", self.preference_rate),
        ] {
            if !(x > 0.0 && x < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {x}")));
            }
        }
        for (name, n) in [
            ("users", self.users),
            ("queries", self.queries),
            ("items", self.items),
            ("latent_dim", self.latent_dim),
            ("interactions", self.interactions),
            ("session_size", self.session_size),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.sensitivity_alpha > 0.0 && self.sensitivity_beta > 0.0) {
            return Err(Error::Config(
                "sensitivity Beta parameters must be positive".into(),
            ));
        }
        if !self.signal_scale.is_finite() || !self.exposure_personalization.is_finite() {
            return Err(Error::Config(
                "signal_scale and exposure_personalization must be finite".into(),
            ));
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return Err(Error::Config(format!(
                "popularity_exponent must be finite and non-negative, got {}",
                self.popularity_exponent
            )));
        }
        Ok(())
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec::new(self.users, self.queries, self.items)
    }

    fn pool_size(&self) -> usize {
        (self.pool_fraction * self.items as f64).floor() as usize
    }
}

/// Latent state of a generated world, kept for analysis and tests.
pub struct World {
    pub config: WorldConfig,
    k: usize,
    users: Vec<f64>,
    queries: Vec<f64>,
    items: Vec<f64>,
    pub user_sensitivity: Vec<f64>,
    pub query_sensitivity: Vec<f64>,
    pub relevance_offset: f64,
    pub preference_offset: f64,
    pools: Vec<Option<Vec<u32>>>,
    /// Exposure weight of each item.
    popularity: Vec<f64>,
    catalogue: WeightedIndex<f64>,
}

fn gaussian_rows(n: usize, k: usize, rng: &mut DrpRng) -> Vec<f64> {
    (0..n * k).map(|_| StandardNormal.sample(rng)).collect()
}

/// Finds `c` with `mean σ(a·x + c) = target` by bisection.
fn calibrate_offset(scores: &[f64], scale: f64, target: f64) -> f64 {
    let mean =
        |c: f64| scores.iter().map(|&x| sigmoid(scale * x + c)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

const CALIBRATION_PAIRS: usize = 8192;

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        if config.gamma > 0.0 && config.pool_size() == 0 {
            return Err(Error::Generation(format!(
                "gamma = {} needs a relevant pool, but pool_fraction {} of {} items selects none",
                config.gamma, config.pool_fraction, config.items
            )));
        }
        let k = config.latent_dim;
        let mut rng = rng_from_seed(derive_seed(config.seed, 100));
        let users = gaussian_rows(config.users, k, &mut rng);
        let queries = gaussian_rows(config.queries, k, &mut rng);
        let mut items = gaussian_rows(config.items, k, &mut rng);
        let target = (k as f64).sqrt();
        for row in items.chunks_mut(k) {
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x *= target / n);
            } else {
                row[0] = target;
            }
        }
        let beta = Beta::new(config.sensitivity_alpha, config.sensitivity_beta)
            .map_err(|e| Error::Config(format!("sensitivity distribution: {e}")))?;
        let user_sensitivity = (0..config.users).map(|_| beta.sample(&mut rng)).collect();
        let query_sensitivity = (0..config.queries).map(|_| beta.sample(&mut rng)).collect();

        let mut ranks: Vec<usize> = (0..config.items).collect();
        ranks.shuffle(&mut rng_from_seed(derive_seed(config.seed, 103)));
        let popularity: Vec<f64> = ranks
            .iter()
            .map(|&r| ((r + 1) as f64).powf(-config.popularity_exponent))
            .collect();
        let catalogue = WeightedIndex::new(&popularity)
            .map_err(|e| Error::Generation(format!("item popularity weights: {e}")))?;

        let mut world = World {
            k,
            users,
            queries,
            items,
            user_sensitivity,
            query_sensitivity,
            relevance_offset: 0.0,
            preference_offset: 0.0,
            pools: vec![None; config.queries],
            popularity,
            catalogue,
            config,
        };
        let mut cal = rng_from_seed(derive_seed(world.config.seed, 101));
        let (mut rel, mut pref) = (Vec::new(), Vec::new());
        for _ in 0..CALIBRATION_PAIRS {
            let i = cal.random_range(0..world.config.items);
            rel.push(world.relevance_score(cal.random_range(0..world.config.queries), i));
            pref.push(world.preference_score(cal.random_range(0..world.config.users), i));
        }
        let a = world.config.signal_scale;
        world.relevance_offset = calibrate_offset(&rel, a, world.config.relevance_rate);
        world.preference_offset = calibrate_offset(&pref, a, world.config.preference_rate);
        Ok(world)
    }

    fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.k..(i + 1) * self.k]
    }

    fn relevance_score(&self, q: usize, i: usize) -> f64 {
        dot(&self.queries[q * self.k..(q + 1) * self.k], self.item(i)) / (self.k as f64).sqrt()
    }

    fn preference_score(&self, u: usize, i: usize) -> f64 {
        dot(&self.users[u * self.k..(u + 1) * self.k], self.item(i)) / (self.k as f64).sqrt()
    }

    pub fn relevance_prob(&self, q: usize, i: usize) -> f64 {
        sigmoid(self.config.signal_scale * self.relevance_score(q, i) + self.relevance_offset)
    }

    pub fn preference_prob(&self, u: usize, i: usize) -> f64 {
        sigmoid(self.config.signal_scale * self.preference_score(u, i) + self.preference_offset)
    }

    pub fn sensitivity(&self, u: usize, q: usize) -> f64 {
        (self.user_sensitivity[u] * self.query_sensitivity[q]).sqrt()
    }

    /// Top items of query `q` by relevance score.
    fn pool(&mut self, q: usize) -> &[u32] {
        if self.pools[q].is_none() {
            let size = self.config.pool_size();
            let mut scored: Vec<(f64, u32)> = (0..self.config.items)
                .map(|i| (self.relevance_score(q, i), i as u32))
                .collect();
            scored.select_nth_unstable_by(size - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut top: Vec<u32> = scored[..size].iter().map(|&(_, i)| i).collect();
            top.sort_unstable();
            self.pools[q] = Some(top);
        }
        self.pools[q].as_deref().expect("filled above")
    }

    fn draw_candidate(&mut self, u: usize, q: usize, rng: &mut DrpRng) -> Result<usize> {
        if self.config.gamma > 0.0 && rng.random::<f64>() < self.config.gamma {
            let tau = self.config.exposure_personalization;
            let pool = self.pool(q).to_vec();
            let weights: Vec<f64> = pool
                .iter()
                .map(|&i| {
                    self.popularity[i as usize] * (tau * self.preference_score(u, i as usize)).exp()
                })
                .collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::Generation(format!("relevant pool of query {q}: {e}")))?;
            Ok(pool[dist.sample(rng)] as usize)
        } else {
            Ok(self.catalogue.sample(rng))
        }
    }

    fn behavior(&self, p: u8, r: u8, s: f64, rng: &mut DrpRng) -> u8 {
        let c = &self.config;
        let rate = match (p, r) {
            (1, 1) => return 1,
            (0, 0) => return 0,
            (1, _) => c.pi_p * (1.0 - c.irrelevance_aversion * s),
            _ => c.pi_r * s,
        };
        (rng.random::<f64>() < rate) as u8
    }

    /// Emits `interactions` impressions in strictly increasing time order.
    pub fn generate(&mut self) -> Result<Vec<LabeledExample>> {
        let cfg = self.config.clone();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 102));
        let mut clicks: Vec<Vec<u32>> = vec![Vec::new(); cfg.users];
        let mut out = Vec::with_capacity(cfg.interactions);
        let sessions = cfg.interactions.div_ceil(cfg.session_size);
        for session in 0..sessions {
            let u = rng.random_range(0..cfg.users);
            let q = rng.random_range(0..cfg.queries);
            let s = self.sensitivity(u, q);
            let start = session as i64 * (cfg.session_size as i64 + 1);
            let history = clicks[u].clone();
            let size = cfg.session_size.min(cfg.interactions - out.len());
            let mut session_clicks = Vec::new();
            for j in 0..size {
                let i = self.draw_candidate(u, q, &mut rng)?;
                let r = (rng.random::<f64>() < self.relevance_prob(q, i)) as u8;
                let p = (rng.random::<f64>() < self.preference_prob(u, i)) as u8;
                let y = self.behavior(p, r, s, &mut rng);
                let area = label_area(p, r, y)?;
                if y == 1 {
                    session_clicks.push(i as u32);
                }
                out.push(LabeledExample {
                    example: SessionExample {
                        user_id: u as u32,
                        query_id: q as u32,
                        item_id: i as u32,
                        history: history.clone(),
                        label: y,
                        timestamp: start + j as i64,
                        session_id: session as u64,
                    },
                    oracle: Some(OracleLabels {
                        preference: p,
                        relevance: r,
                        sensitivity: s,
                        area,
                    }),
                });
            }
            let h = &mut clicks[u];
            h.extend(session_clicks);
            if h.len() > MAX_HISTORY {
                h.drain(..h.len() - MAX_HISTORY);
            }
        }
        Ok(out)
    }
}

/// Builds the world described by `cfg` and samples its log.
pub fn generate_world(cfg: &WorldConfig) -> Result<Vec<LabeledExample>> {
    World::new(cfg.clone())?.generate()
}

/// Summary statistics of a generated (or loaded) labeled log.
#[derive(Clone, Debug, Serialize)]
pub struct WorldSummary {
    pub examples: usize,
    pub area_counts: [usize; AREA_COUNT],
    pub click_rate: f64,
    pub relevance_rate: f64,
    pub preference_rate: f64,
    /// Pearson correlation of oracle `P*` and `R*`.
    pub pr_correlation: f64,
}

pub fn summarize(examples: &[LabeledExample]) -> WorldSummary {
    let mut area_counts = [0usize; AREA_COUNT];
    let (mut n, mut sp, mut sr, mut spr, mut clicks) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ex in examples {
        clicks += ex.example.label as f64;
        if let Some(o) = &ex.oracle {
            area_counts[o.area as usize] += 1;
            let (p, r) = (o.preference as f64, o.relevance as f64);
            n += 1.0;
            sp += p;
            sr += r;
            spr += p * r;
        }
    }
    let (mp, mr) = (sp / n, sr / n);
    let cov = spr / n - mp * mr;
    let denom = (mp * (1.0 - mp) * mr * (1.0 - mr)).sqrt();
    WorldSummary {
        examples: examples.len(),
        area_counts,
        click_rate: clicks / examples.len().max(1) as f64,
        relevance_rate: mr,
        preference_rate: mp,
        pr_correlation: if denom > 0.0 { cov / denom } else { 0.0 },
    }
}
