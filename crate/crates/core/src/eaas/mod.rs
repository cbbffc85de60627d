//! The simulated encoder-as-a-service provider: account-scoped feature
//! queries, defense application and per-image billing.

pub mod wire;

pub use wire::{serve, HttpClient, ServerHandle};

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use ndarray::{s, Array2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::ImageShape;
use crate::defense::{Defense, NoDefense};
use crate::encoder::{EncoderParams, FeatureBatch, FeatureExtractor, FeatureOrigin};
use crate::{Error, Result};

/// Dollars per 1,000 queries.
pub const DEFAULT_PRICE_PER_1000: f64 = 3.2;

/// Images per service call when a client splits a large request.
pub const CLIENT_CHUNK: usize = 256;

pub fn cost_of(queries: u64, price_per_1000: f64) -> f64 {
    queries as f64 * price_per_1000 / 1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountSpec {
    pub name: String,
    #[serde(default)]
    pub budget_cap: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub price_per_1000: f64,
    pub accounts: Vec<AccountSpec>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            price_per_1000: DEFAULT_PRICE_PER_1000,
            accounts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub account: String,
    pub query_count: u64,
    pub cost_dollars: f64,
    pub budget_cap: Option<u64>,
    pub budget_remaining: Option<u64>,
}

impl fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} queries, ${:.4}", self.account, self.query_count, self.cost_dollars)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Account {
    count: u64,
    cap: Option<u64>,
}

/// Per-account query counters. Counts only ever grow.
#[derive(Debug, Default)]
pub struct QueryLedger {
    accounts: Mutex<HashMap<String, Account>>,
    price_per_1000: f64,
}

impl QueryLedger {
    pub fn new(price_per_1000: f64) -> Self {
        QueryLedger {
            accounts: Mutex::new(HashMap::new()),
            price_per_1000,
        }
    }

    pub fn price_per_1000(&self) -> f64 {
        self.price_per_1000
    }

    pub fn open(&self, name: &str, cap: Option<u64>) {
        let mut acc = self.accounts.lock().expect("ledger lock");
        acc.entry(name.to_string()).or_default().cap = cap;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.accounts.lock().expect("ledger lock").contains_key(name)
    }

    fn admit(acc: &Account, name: &str, n: u64) -> Result<()> {
        match acc.cap {
            Some(cap) if acc.count + n > cap => Err(Error::Quota {
                account: name.to_string(),
                used: acc.count,
                cap,
                requested: n,
            }),
            _ => Ok(()),
        }
    }

    /// Fails fast without recording anything.
    pub fn check(&self, name: &str, n: u64) -> Result<()> {
        let acc = self.accounts.lock().expect("ledger lock");
        let a = acc.get(name).ok_or_else(|| Error::Auth(name.to_string()))?;
        Self::admit(a, name, n)
    }

    /// Atomically re-checks the budget and records `n` queries.
    pub fn commit(&self, name: &str, n: u64) -> Result<LedgerReport> {
        let mut acc = self.accounts.lock().expect("ledger lock");
        let a = acc.get_mut(name).ok_or_else(|| Error::Auth(name.to_string()))?;
        Self::admit(a, name, n)?;
        a.count += n;
        Ok(self.snapshot(name, a))
    }

    fn snapshot(&self, name: &str, a: &Account) -> LedgerReport {
        LedgerReport {
            account: name.to_string(),
            query_count: a.count,
            cost_dollars: cost_of(a.count, self.price_per_1000),
            budget_cap: a.cap,
            budget_remaining: a.cap.map(|c| c.saturating_sub(a.count)),
        }
    }

    pub fn report(&self, name: &str) -> Result<LedgerReport> {
        let acc = self.accounts.lock().expect("ledger lock");
        let a = acc.get(name).ok_or_else(|| Error::Auth(name.to_string()))?;
        Ok(self.snapshot(name, a))
    }
}

/// Public description of the service; never includes target weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub feature_dim: usize,
    pub input_shape: ImageShape,
    pub defense: String,
    pub price_per_1000: f64,
}

pub struct EaasService {
    target: EncoderParams,
    defense: Box<dyn Defense>,
    ledger: QueryLedger,
}

impl fmt::Debug for EaasService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EaasService")
            .field("target", &self.target.arch_id)
            .field("defense", &self.defense.descriptor())
            .finish_non_exhaustive()
    }
}

impl EaasService {
    pub fn new(target: EncoderParams, defense: Box<dyn Defense>, cfg: ServiceConfig) -> Self {
        let ledger = QueryLedger::new(cfg.price_per_1000);
        for a in &cfg.accounts {
            ledger.open(&a.name, a.budget_cap);
        }
        EaasService { target, defense, ledger }
    }

    /// An undefended service with default pricing.
    pub fn undefended(target: EncoderParams) -> Self {
        EaasService::new(target, Box::new(NoDefense), ServiceConfig::default())
    }

    pub fn open_account(&self, name: &str, budget_cap: Option<u64>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::config("account name must be non-empty"));
        }
        self.ledger.open(name, budget_cap);
        Ok(())
    }

    pub fn info(&self) -> ServiceInfo {
        ServiceInfo {
            feature_dim: self.target.feature_dim,
            input_shape: self.target.input_shape,
            defense: self.defense.descriptor(),
            price_per_1000: self.ledger.price_per_1000(),
        }
    }

    /// Defense-transformed target features, billed one query per image.
    /// On any error the ledger is unchanged and nothing is returned.
    pub fn query(&self, account: &str, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        let n = images.len_of(Axis(0)) as u64;
        self.ledger.check(account, n)?;
        self.target.check_batch(&images)?;
        let clean = self.target.forward_with(&self.target.weights, images);
        let defended = self.defense.apply(images, clean)?;
        let batch = FeatureBatch::new(defended, FeatureOrigin::Eaas, Some(self.defense.descriptor()))?;
        self.ledger.commit(account, n)?;
        Ok(batch)
    }

    pub fn ledger_report(&self, account: &str) -> Result<LedgerReport> {
        self.ledger.report(account)
    }

    pub fn client(self: &Arc<Self>, account: &str) -> ApiClient {
        ApiClient {
            service: Arc::clone(self),
            account: account.to_string(),
        }
    }
}

/// What an attacker or downstream user can do with the service.
pub trait EmbeddingApi: Send + Sync {
    /// One call; the whole batch is billed or nothing is.
    fn embed(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch>;

    fn ledger(&self) -> Result<LedgerReport>;

    fn info(&self) -> Result<ServiceInfo>;

    /// Splits large requests into calls of [`CLIENT_CHUNK`] images. A
    /// failure part way through reports how many rows were obtained.
    fn embed_all(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        let n = images.len_of(Axis(0));
        let mut rows: Option<Array2<f64>> = None;
        let mut defense = None;
        let mut start = 0;
        while start < n {
            let end = (start + CLIENT_CHUNK).min(n);
            let part = self.embed(images.slice(s![start..end, .., .., ..])).map_err(|e| Error::Partial {
                completed: start,
                source: Box::new(e),
            })?;
            defense = part.defense_applied.clone();
            let out = rows.get_or_insert_with(|| Array2::zeros((n, part.dim())));
            out.slice_mut(s![start..end, ..]).assign(&part.vectors);
            start = end;
        }
        let vectors = match rows {
            Some(r) => r,
            None => Array2::zeros((0, self.info()?.feature_dim)),
        };
        FeatureBatch::new(vectors, FeatureOrigin::Eaas, defense)
    }
}

/// In-process client bound to one account.
#[derive(Clone, Debug)]
pub struct ApiClient {
    service: Arc<EaasService>,
    account: String,
}

impl ApiClient {
    pub fn account(&self) -> &str {
        &self.account
    }
}

impl EmbeddingApi for ApiClient {
    fn embed(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        self.service.query(&self.account, images)
    }

    fn ledger(&self) -> Result<LedgerReport> {
        self.service.ledger_report(&self.account)
    }

    fn info(&self) -> Result<ServiceInfo> {
        Ok(self.service.info())
    }
}

impl FeatureExtractor for ApiClient {
    fn extract(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        self.embed_all(images)
    }

    fn feature_dim(&self) -> Option<usize> {
        Some(self.service.target.feature_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_encoder, EncoderProvenance};
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn service() -> Arc<EaasService> {
        let t = init_encoder("mlp", 16, ImageShape::new(8, 8, 3), 1, EncoderProvenance::PretrainedTarget).unwrap();
        let s = Arc::new(EaasService::undefended(t));
        s.open_account("alice", None).unwrap();
        s
    }

    fn images(n: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        Array4::from_shape_fn((n, 8, 8, 3), |_| rng.gen::<f64>())
    }

    #[test]
    fn undefended_query_equals_encode() {
        let s = service();
        let x = images(1);
        let got = s.query("alice", x.view()).unwrap();
        assert_eq!(got.vectors, s.target.encode(x.view()).unwrap().vectors);
        assert_eq!(got.source, FeatureOrigin::Eaas);
        assert_eq!(got.defense_applied.as_deref(), Some("none"));
    }

    #[test]
    fn billing_is_per_image() {
        let s = service();
        s.query("alice", images(3).view()).unwrap();
        s.query("alice", images(5).view()).unwrap();
        let r = s.ledger_report("alice").unwrap();
        assert_eq!(r.query_count, 8);
        assert_abs_diff_eq!(r.cost_dollars, 0.0256, epsilon = 1e-12);
    }

    #[test]
    fn fresh_and_unknown_accounts() {
        let s = service();
        let r = s.ledger_report("alice").unwrap();
        assert_eq!((r.query_count, r.cost_dollars), (0, 0.0));
        assert!(matches!(s.ledger_report("mallory"), Err(Error::Auth(_))));
        assert!(matches!(s.query("mallory", images(1).view()), Err(Error::Auth(_))));
    }

    #[test]
    fn pricing_examples() {
        assert_abs_diff_eq!(cost_of(5000, DEFAULT_PRICE_PER_1000), 16.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cost_of(2500, DEFAULT_PRICE_PER_1000), 8.0, epsilon = 1e-9);
    }

    #[test]
    fn budget_cap_withholds_response() {
        let s = service();
        s.open_account("bob", Some(5)).unwrap();
        let err = s.query("bob", images(6).view()).unwrap_err();
        assert!(matches!(err, Error::Quota { .. }));
        assert_eq!(s.ledger_report("bob").unwrap().query_count, 0);
        s.query("bob", images(5).view()).unwrap();
        assert_eq!(s.ledger_report("bob").unwrap().budget_remaining, Some(0));
    }

    #[test]
    fn bad_shape_is_not_billed() {
        let s = service();
        let x = Array4::<f64>::zeros((2, 4, 4, 3));
        assert!(matches!(s.query("alice", x.view()), Err(Error::Precondition(_))));
        assert_eq!(s.ledger_report("alice").unwrap().query_count, 0);
    }

    #[test]
    fn concurrent_queries_are_counted_exactly() {
        let s = service();
        std::thread::scope(|scope| {
            for t in 0..8 {
                let s = &s;
                scope.spawn(move || {
                    for _ in 0..10 {
                        s.query("alice", images(t + 1).view()).unwrap();
                    }
                });
            }
        });
        let expected: u64 = (1..=8).map(|n| 10 * n).sum();
        assert_eq!(s.ledger_report("alice").unwrap().query_count, expected);
    }

    #[test]
    fn chunked_embedding_reports_partial_progress() {
        let s = service();
        s.open_account("carol", Some(300)).unwrap();
        let err = s.client("carol").embed_all(images(400).view()).unwrap_err();
        match err {
            Error::Partial { completed, source } => {
                assert_eq!(completed, CLIENT_CHUNK);
                assert!(matches!(*source, Error::Quota { .. }));
            }
            other => panic!("{other}"),
        }
        assert_eq!(s.ledger_report("carol").unwrap().query_count, CLIENT_CHUNK as u64);
        let all = s.client("alice").embed_all(images(300).view()).unwrap();
        assert_eq!(all.vectors, s.target.encode(images(300).view()).unwrap().vectors);
    }
}
