//! ID-embedding encoders producing the dense `(q, v, u)` triple.
//!
//! `q` and `v` are plain lookups. `u` is an affine map of the user-id
//! embedding concatenated with the mean of the (truncated) clicked-item
//! history; an empty history pools to the zero vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed, Linear, ParamBlock, Tensor};

/// Most recent history items kept per example.
pub const MAX_HISTORY: usize = 50;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

const INIT_BOUND: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub users: usize,
    pub queries: usize,
    pub items: usize,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

impl FeatureSpec {
    pub fn new(users: usize, queries: usize, items: usize) -> Self {
        FeatureSpec {
            users,
            queries,
            items,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.queries == 0 || self.items == 0 {
            return Err(Error::Config(format!(
                "vocabulary sizes must be positive (users={}, queries={}, items={})",
                self.users, self.queries, self.items
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }
}

/// One logged impression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionExample {
    pub user_id: u32,
    pub query_id: u32,
    pub item_id: u32,
    /// Clicked items before this impression, oldest first.
    pub history: Vec<u32>,
    pub label: u8,
    pub timestamp: i64,
    pub session_id: u64,
}

impl SessionExample {
    /// The history window actually fed to the encoder.
    pub fn recent_history(&self) -> &[u32] {
        let n = self.history.len();
        &self.history[n.saturating_sub(MAX_HISTORY)..]
    }

    pub fn check_vocab(&self, spec: &FeatureSpec) -> Result<()> {
        let check = |field, id: u32, size| {
            if (id as usize) < size {
                Ok(())
            } else {
                Err(Error::Vocabulary {
                    field,
                    id: id as u64,
                    size,
                })
            }
        };
        check("user_id", self.user_id, spec.users)?;
        check("query_id", self.query_id, spec.queries)?;
        check("item_id", self.item_id, spec.items)?;
        for &h in &self.history {
            check("history", h, spec.items)?;
        }
        if self.label > 1 {
            return Err(Error::Config(format!(
                "label must be 0 or 1, got {}",
                self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub users: ParamBlock,
    pub queries: ParamBlock,
    pub items: ParamBlock,
}

/// One table per vocabulary, entries i.i.d. uniform in `[-0.05, 0.05]`.
pub fn init_tables(spec: &FeatureSpec, seed: u64) -> Result<EmbeddingTables> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut table = |name: &str, rows: usize| {
        let data = (0..rows * spec.embedding_dim)
            .map(|_| rng.random_range(-INIT_BOUND..=INIT_BOUND))
            .collect();
        ParamBlock::new_sparse(
            name,
            Tensor::matrix(rows, spec.embedding_dim, data).expect("finite"),
        )
    };
    Ok(EmbeddingTables {
        users: table("emb.user", spec.users),
        queries: table("emb.query", spec.queries),
        items: table("emb.item", spec.items),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTriple {
    pub q: Tensor,
    pub v: Tensor,
    pub u: Tensor,
}

/// Row-stacked triples for a batch.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub q: Tensor,
    pub v: Tensor,
    pub u: Tensor,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triple(&self, i: usize) -> EncodedTriple {
        let v = |t: &Tensor| Tensor::vector(t.row(i).to_vec()).expect("finite");
        EncodedTriple {
            q: v(&self.q),
            v: v(&self.v),
            u: v(&self.u),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    users: Vec<u32>,
    queries: Vec<u32>,
    items: Vec<u32>,
    histories: Vec<Vec<u32>>,
    user_input: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: FeatureSpec,
    pub tables: EmbeddingTables,
    /// `2d → d` map from `[user-id embedding | pooled history]` to `u`.
    pub user_proj: Linear,
}

impl Encoder {
    pub fn new(spec: FeatureSpec, seed: u64) -> Result<Self> {
        let tables = init_tables(&spec, derive_seed(seed, 1))?;
        let mut rng = rng_from_seed(derive_seed(seed, 2));
        let d = spec.embedding_dim;
        Ok(Encoder {
            spec,
            tables,
            user_proj: Linear::glorot("enc.user_proj", 2 * d, d, &mut rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn encode(&self, example: &SessionExample) -> Result<EncodedTriple> {
        let (batch, _) = self.encode_batch(&[example])?;
        Ok(batch.triple(0))
    }

    pub fn encode_batch(
        &self,
        examples: &[&SessionExample],
    ) -> Result<(EncodedBatch, EncodeCache)> {
        let d = self.dim();
        let n = examples.len();
        if n == 0 {
            return Err(Error::Config("cannot encode an empty batch".into()));
        }
        let mut q = Tensor::zeros(&[n, d]);
        let mut v = Tensor::zeros(&[n, d]);
        let mut user_input = Tensor::zeros(&[n, 2 * d]);
        let mut cache = EncodeCache {
            users: Vec::with_capacity(n),
            queries: Vec::with_capacity(n),
            items: Vec::with_capacity(n),
            histories: Vec::with_capacity(n),
            user_input: Tensor::zeros(&[1]),
        };
        let items = &self.tables.items.value;
        for (r, ex) in examples.iter().enumerate() {
            ex.check_vocab(&self.spec)?;
            q.row_mut(r)
                .copy_from_slice(self.tables.queries.value.row(ex.query_id as usize));
            v.row_mut(r).copy_from_slice(items.row(ex.item_id as usize));
            let row = user_input.row_mut(r);
            row[..d].copy_from_slice(self.tables.users.value.row(ex.user_id as usize));
            let hist = ex.recent_history();
            if !hist.is_empty() {
                let pooled = &mut row[d..];
                for &h in hist {
                    for (p, e) in pooled.iter_mut().zip(items.row(h as usize)) {
                        *p += e;
                    }
                }
                let inv = 1.0 / hist.len() as f64;
                pooled.iter_mut().for_each(|p| *p *= inv);
            }
            cache.users.push(ex.user_id);
            cache.queries.push(ex.query_id);
            cache.items.push(ex.item_id);
            cache.histories.push(hist.to_vec());
        }
        let u = self.user_proj.forward(&user_input)?;
        cache.user_input = user_input;
        Ok((EncodedBatch { q, v, u }, cache))
    }

    /// Scatters upstream gradients into every touched embedding row.
    pub fn backward(&mut self, cache: &EncodeCache, dq: &Tensor, dv: &Tensor, du: &Tensor) {
        let d = self.dim();
        let d_input = self.user_proj.backward(&cache.user_input, du);
        for r in 0..cache.users.len() {
            self.tables
                .queries
                .accumulate_row(cache.queries[r] as usize, dq.row(r), 1.0);
            self.tables
                .items
                .accumulate_row(cache.items[r] as usize, dv.row(r), 1.0);
            let g = d_input.row(r);
            self.tables
                .users
                .accumulate_row(cache.users[r] as usize, &g[..d], 1.0);
            let hist = &cache.histories[r];
            if !hist.is_empty() {
                let scale = 1.0 / hist.len() as f64;
                for &h in hist {
                    self.tables.items.accumulate_row(h as usize, &g[d..], scale);
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&ParamBlock> {
        let mut p = vec![&self.tables.users, &self.tables.queries, &self.tables.items];
        p.extend(self.user_proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut p = vec![
            &mut self.tables.users,
            &mut self.tables.queries,
            &mut self.tables.items,
        ];
        p.extend(self.user_proj.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckOptions, HasParams};

    fn example(history: Vec<u32>) -> SessionExample {
        SessionExample {
            user_id: 1,
            query_id: 0,
            item_id: 2,
            history,
            label: 1,
            timestamp: 10,
            session_id: 3,
        }
    }

    /// Pooled history component, recovered through the encoder's own input cache.
    fn pooled(enc: &Encoder, ex: &SessionExample) -> Vec<f64> {
        let (_, cache) = enc.encode_batch(&[ex]).unwrap();
        cache.user_input.row(0)[enc.dim()..].to_vec()
    }

    #[test]
    fn init_tables_is_deterministic_with_expected_shapes() {
        let spec = FeatureSpec::new(2, 2, 2).with_dim(4);
        let a = init_tables(&spec, 9).unwrap();
        let b = init_tables(&spec, 9).unwrap();
        for (x, y) in [
            (&a.users, &b.users),
            (&a.queries, &b.queries),
            (&a.items, &b.items),
        ] {
            assert_eq!(x.value.shape(), &[2, 4]);
            assert_eq!(x.value, y.value);
            assert!(x.value.data().iter().all(|v| v.abs() <= INIT_BOUND));
        }
    }

    #[test]
    fn vocab_of_one_gives_single_row() {
        let t = init_tables(&FeatureSpec::new(1, 1, 1).with_dim(3), 0).unwrap();
        assert_eq!(t.users.value.shape(), &[1, 3]);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = FeatureSpec::new(2, 2, 2).with_dim(4);
        let a = init_tables(&spec, 1).unwrap();
        let b = init_tables(&spec, 2).unwrap();
        assert_ne!(a.items.value, b.items.value);
    }

    #[test]
    fn empty_history_pools_to_zero() {
        let enc = Encoder::new(FeatureSpec::new(2, 2, 4), 0).unwrap();
        assert!(pooled(&enc, &example(vec![])).iter().all(|&x| x == 0.0));
        assert_eq!(enc.encode(&example(vec![])).unwrap().u.len(), 64);
    }

    #[test]
    fn repeated_history_pools_to_that_row() {
        let enc = Encoder::new(FeatureSpec::new(2, 2, 4), 0).unwrap();
        let p = pooled(&enc, &example(vec![3, 3, 3]));
        for (a, b) in p.iter().zip(enc.tables.items.value.row(3)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_item_history_pools_to_mean() {
        let mut enc = Encoder::new(FeatureSpec::new(2, 2, 4).with_dim(3), 0).unwrap();
        enc.tables
            .items
            .value
            .row_mut(0)
            .copy_from_slice(&[1.0, 2.0, -4.0]);
        enc.tables
            .items
            .value
            .row_mut(1)
            .copy_from_slice(&[3.0, 0.0, 4.0]);
        assert_eq!(pooled(&enc, &example(vec![0, 1])), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn history_truncated_to_most_recent() {
        let mut h: Vec<u32> = vec![0; 10];
        h.extend(std::iter::repeat(1).take(MAX_HISTORY));
        let ex = example(h);
        assert_eq!(ex.recent_history().len(), MAX_HISTORY);
        assert!(ex.recent_history().iter().all(|&i| i == 1));
    }

    #[test]
    fn out_of_vocab_names_field() {
        let enc = Encoder::new(FeatureSpec::new(2, 2, 4), 0).unwrap();
        let mut ex = example(vec![]);
        ex.query_id = 5;
        let err = enc.encode(&ex).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Vocabulary {
                    field: "query_id",
                    ..
                }
            ),
            "{err}"
        );
        let mut ex = example(vec![9]);
        ex.query_id = 0;
        assert!(matches!(
            enc.encode(&ex).unwrap_err(),
            Error::Vocabulary {
                field: "history",
                ..
            }
        ));
    }

    #[test]
    fn encode_is_pure() {
        let enc = Encoder::new(FeatureSpec::new(3, 3, 5), 4).unwrap();
        let ex = example(vec![0, 4]);
        assert_eq!(enc.encode(&ex).unwrap(), enc.encode(&ex).unwrap());
    }

    struct Harness(Encoder);

    impl HasParams for Harness {
        fn params(&self) -> Vec<&ParamBlock> {
            self.0.params()
        }
        fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
            self.0.params_mut()
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut h = Harness(Encoder::new(FeatureSpec::new(3, 2, 6).with_dim(5), 11).unwrap());
        let a = example(vec![0, 4, 4]);
        let mut b = example(vec![]);
        b.user_id = 2;
        b.item_id = 4;
        // fixed random linear read-out of (q, v, u)
        let weights: Vec<f64> = (0..30)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let report = check_gradients(
            &mut h,
            |h| {
                h.zero_grads();
                let (batch, cache) = h.0.encode_batch(&[&a, &b])?;
                let mut loss = 0.0;
                let mut grads = [batch.q.clone(), batch.v.clone(), batch.u.clone()];
                for (k, t) in [&batch.q, &batch.v, &batch.u].iter().enumerate() {
                    for (i, (x, g)) in t.data().iter().zip(grads[k].data_mut()).enumerate() {
                        let w = weights[(i + k * 5) % 30];
                        loss += w * x * x;
                        *g = 2.0 * w * x;
                    }
                }
                let [dq, dv, du] = grads;
                h.0.backward(&cache, &dq, &dv, &du);
                Ok(loss)
            },
            GradCheckOptions {
                tolerance: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
