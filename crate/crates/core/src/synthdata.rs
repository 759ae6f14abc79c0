//! Seeded synthetic clickstream generator.
//!
//! Users and items carry latent vectors; the label propensity is
//! `σ(u·v/√d + price_beta·price)` with a negative price effect by default.
//! Privileged features are derived from quantities a deployed model could
//! never see at request time: the interaction components `u_f·v_f` (the
//! coarse-ranking case) and the post-event dwell/viewed-comments signals (the
//! conversion case). Dwell carries a controllable price confound:
//! `dwell = logit + confound_alpha·price + noise`, so a ranker looking at
//! dwell alone is systematically misled on expensive items while one that
//! also sees the price can subtract the confound back out.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::attention::{BehaviorEvent, BehaviorSequence};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, indexed_rng};
use crate::tensor::sigmoid;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_records: usize,
    /// Records `[0, split_index)` are the train split, the rest are test.
    pub split_index: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Strength of the price confound injected into post-event dwell.
    pub confound_alpha: f64,
    /// Price effect on the label logit, negative by default.
    pub price_beta: f64,
    /// Scale of an optional fine-grained crossed effect over feature
    /// buckets (off by default). The effect is real signal, but with ~50
    /// records per cell it drowns in Bernoulli label noise and is only
    /// recoverable through the post-event dwell, which carries the full
    /// logit.
    pub interaction_scale: f64,
    pub behavior_len_min: usize,
    pub behavior_len_max: usize,
    pub num_categories: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_users: 2000,
            num_items: 500,
            num_records: 220_000,
            split_index: 200_000,
            latent_dim: 8,
            noise_sigma: 0.25,
            confound_alpha: 1.0,
            price_beta: -0.8,
            interaction_scale: 0.0,
            behavior_len_min: 0,
            behavior_len_max: 6,
            num_categories: 20,
            buckets: 8,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0
            || self.num_items == 0
            || self.num_records == 0
            || self.latent_dim == 0
            || self.num_categories == 0
        {
            return Err(Error::InvalidConfig("generator counts must be positive".into()));
        }
        if self.split_index == 0 || self.split_index >= self.num_records {
            return Err(Error::InvalidConfig(format!(
                "split_index {} must leave both train and test records (num_records {})",
                self.split_index, self.num_records
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        if self.behavior_len_min > self.behavior_len_max {
            return Err(Error::InvalidConfig("behavior length range is inverted".into()));
        }
        if self.buckets < 2 {
            return Err(Error::InvalidConfig("need at least 2 buckets".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    RegularUser,
    RegularItem,
    Behavior,
    Privileged,
}

/// One categorical feature: name, raw vocabulary size, role, and the frozen
/// discretization boundaries when the feature comes from a numeric source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureDecl {
    pub name: String,
    pub vocab: usize,
    pub role: FeatureRole,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub boundaries: Option<Vec<f64>>,
}

/// Ordered feature declarations. Declaration order fixes the concatenation
/// order of every model input, so it is part of the artifact contract.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureSchema {
    pub features: Vec<FeatureDecl>,
}

impl FeatureSchema {
    pub fn find(&self, name: &str) -> Option<&FeatureDecl> {
        self.features.iter().find(|d| d.name == name)
    }

    pub fn user_feature_decls(&self) -> Vec<&FeatureDecl> {
        self.features
            .iter()
            .filter(|d| d.role == FeatureRole::RegularUser && d.name != "user_id")
            .collect()
    }

    pub fn item_feature_decls(&self) -> Vec<&FeatureDecl> {
        self.features
            .iter()
            .filter(|d| d.role == FeatureRole::RegularItem && d.name != "item_id")
            .collect()
    }

    pub fn interacted_decls(&self) -> Vec<&FeatureDecl> {
        self.features
            .iter()
            .filter(|d| d.role == FeatureRole::Privileged && d.name.starts_with("inter_"))
            .collect()
    }

    /// Post-event privileged declarations (dwell bucket, viewed flag).
    pub fn post_event_decls(&self) -> Vec<&FeatureDecl> {
        self.features
            .iter()
            .filter(|d| d.role == FeatureRole::Privileged && !d.name.starts_with("inter_"))
            .collect()
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_digest(&hasher.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.features {
            if !seen.insert(d.name.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate feature `{}`", d.name)));
            }
            if d.vocab == 0 {
                return Err(Error::InvalidConfig(format!("feature `{}` has empty vocab", d.name)));
            }
            if let Some(b) = &d.boundaries {
                if b.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidConfig(format!(
                        "boundaries of `{}` are not strictly increasing",
                        d.name
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Bucket id = number of boundaries <= value (a value equal to a boundary
/// goes to the higher bucket). Ids range over `[0, boundaries.len()]`.
pub fn discretize(value: f64, boundaries: &[f64]) -> u32 {
    debug_assert!(boundaries.windows(2).all(|w| w[0] < w[1]));
    boundaries.partition_point(|b| *b <= value) as u32
}

/// One training example. Privileged fields are present in the data but the
/// schema marks them so models can refuse to read them on the student path.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub user_id: u32,
    pub item_id: u32,
    pub user_feats: Vec<u32>,
    /// Item bucket features; the last entry is the price bucket.
    pub item_feats: Vec<u32>,
    pub behavior: BehaviorSequence,
    /// Interacted privileged features (coarse-ranking case).
    pub interacted_feats: Vec<u32>,
    /// Post-event privileged features (conversion case).
    pub dwell: f64,
    pub dwell_bucket: u32,
    pub viewed_comments: bool,
    pub label: bool,
    /// Generator-side ground truth, never fed to any model.
    pub true_propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub config: GeneratorConfig,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn train(&self) -> &[Record] {
        &self.records[..self.config.split_index]
    }

    pub fn test(&self) -> &[Record] {
        &self.records[self.config.split_index..]
    }
}

struct RawRecord {
    user: usize,
    item: usize,
    label: bool,
    propensity: f64,
    interacted_raw: Vec<f64>,
    dwell_raw: f64,
    viewed: bool,
    behavior_items: Vec<usize>,
    behavior_recency_raw: Vec<f64>,
    behavior_dwell_raw: Vec<f64>,
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn quantile_boundaries(mut values: Vec<f64>, buckets: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    let mut out = Vec::with_capacity(buckets - 1);
    for k in 1..buckets {
        let idx = (k * n / buckets).min(n - 1);
        let v = values[idx];
        if out.last().map_or(true, |&last| v > last) {
            out.push(v);
        }
    }
    out
}

/// Generate a full dataset: catalogs, raw draws, train-split quantile
/// boundaries, then discretized records in canonical record-index order.
/// Entity features are fixed per user/item; interaction and post-event
/// features are drawn per record from an index-derived stream, so output is
/// independent of any sharding of the record range.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let d = config.latent_dim;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // user catalog: latents + fixed noisy feature views
    let mut rng_u = derived_rng(config.seed, "gen/users");
    let mut users: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(config.num_users);
    for _ in 0..config.num_users {
        let u: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng_u)).collect();
        let feats = u
            .iter()
            .map(|&x| x + config.noise_sigma * standard_normal(&mut rng_u))
            .collect();
        users.push((u, feats));
    }

    // item catalog: latents, price score, category, fixed feature views
    struct Item {
        v: Vec<f64>,
        price: f64,
        category: u32,
        feats: Vec<f64>,
    }
    let mut rng_i = derived_rng(config.seed, "gen/items");
    let mut items: Vec<Item> = Vec::with_capacity(config.num_items);
    for _ in 0..config.num_items {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng_i)).collect();
        let price = standard_normal(&mut rng_i);
        let category = rng_i.gen_range(0..config.num_categories) as u32;
        let feats = v
            .iter()
            .map(|&x| x + config.noise_sigma * standard_normal(&mut rng_i))
            .collect();
        items.push(Item {
            v,
            price,
            category,
            feats,
        });
    }

    // entity-level quantile boundaries and buckets, fixed before any record
    // is drawn: the crossed effect below is indexed by these buckets
    let buckets = config.buckets;
    let user_feat_bounds: Vec<Vec<f64>> = (0..d)
        .map(|f| quantile_boundaries(users.iter().map(|(_, feats)| feats[f]).collect(), buckets))
        .collect();
    let item_feat_bounds: Vec<Vec<f64>> = (0..d)
        .map(|f| quantile_boundaries(items.iter().map(|it| it.feats[f]).collect(), buckets))
        .collect();
    let price_bounds = quantile_boundaries(items.iter().map(|it| it.price).collect(), buckets);
    let user_buckets: Vec<Vec<u32>> = users
        .iter()
        .map(|(_, feats)| {
            (0..d)
                .map(|f| discretize(feats[f], &user_feat_bounds[f]))
                .collect()
        })
        .collect();
    let item_buckets: Vec<Vec<u32>> = items
        .iter()
        .map(|it| {
            (0..d)
                .map(|f| discretize(it.feats[f], &item_feat_bounds[f]))
                .collect()
        })
        .collect();

    // crossed effect: one random logit offset per (user_f0, user_f1,
    // item_f0, item_f1) bucket cell
    let mut rng_cross = derived_rng(config.seed, "gen/cross");
    let cross_table: Vec<f64> = (0..buckets.pow(4))
        .map(|_| config.interaction_scale * standard_normal(&mut rng_cross))
        .collect();
    let f1 = 1.min(d - 1);
    let cross_effect = |j: usize, m: usize| -> f64 {
        let idx = ((user_buckets[j][0] as usize * buckets + user_buckets[j][f1] as usize)
            * buckets
            + item_buckets[m][0] as usize)
            * buckets
            + item_buckets[m][f1] as usize;
        cross_table[idx]
    };

    // per-user pool of highest-propensity items for behavior sampling
    let pool_size = 50.min(config.num_items);
    let pools: Vec<Vec<usize>> = users
        .iter()
        .enumerate()
        .map(|(j, (u, _))| {
            let mut scored: Vec<(f64, usize)> = items
                .iter()
                .enumerate()
                .map(|(m, it)| {
                    let dot: f64 = u.iter().zip(&it.v).map(|(a, b)| a * b).sum();
                    (
                        dot * inv_sqrt_d + config.price_beta * it.price + cross_effect(j, m),
                        m,
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            scored.truncate(pool_size);
            scored.into_iter().map(|(_, m)| m).collect()
        })
        .collect();

    // raw records, each from its own index-derived stream
    let mut raw: Vec<RawRecord> = Vec::with_capacity(config.num_records);
    for r in 0..config.num_records {
        let mut rng = indexed_rng(config.seed, "gen/rec", r as u64);
        let j = rng.gen_range(0..config.num_users);
        let m = rng.gen_range(0..config.num_items);
        let (u, _) = &users[j];
        let item = &items[m];
        let dot: f64 = u.iter().zip(&item.v).map(|(a, b)| a * b).sum();
        let logit = dot * inv_sqrt_d + config.price_beta * item.price + cross_effect(j, m);
        let propensity = sigmoid(logit);
        let label = rng.gen::<f64>() < propensity;

        let interacted_raw: Vec<f64> = (0..d)
            .map(|f| u[f] * item.v[f] + config.noise_sigma * standard_normal(&mut rng))
            .collect();
        let dwell_raw = logit
            + config.confound_alpha * item.price
            + config.noise_sigma * standard_normal(&mut rng);
        let viewed = rng.gen::<f64>() < sigmoid(1.5 * logit);

        let len = rng.gen_range(config.behavior_len_min..=config.behavior_len_max);
        let mut behavior_items = Vec::with_capacity(len);
        let mut behavior_recency_raw = Vec::with_capacity(len);
        let mut behavior_dwell_raw = Vec::with_capacity(len);
        for _ in 0..len {
            let e = pools[j][rng.gen_range(0..pools[j].len())];
            behavior_items.push(e);
            behavior_recency_raw.push(standard_normal(&mut rng));
            let affinity: f64 = u.iter().zip(&items[e].v).map(|(a, b)| a * b).sum();
            behavior_dwell_raw
                .push(affinity * inv_sqrt_d + config.noise_sigma * standard_normal(&mut rng));
        }

        raw.push(RawRecord {
            user: j,
            item: m,
            label,
            propensity,
            interacted_raw,
            dwell_raw,
            viewed,
            behavior_items,
            behavior_recency_raw,
            behavior_dwell_raw,
        });
    }

    // record-level quantile boundaries over the train split only
    let train = &raw[..config.split_index];
    let inter_bounds: Vec<Vec<f64>> = (0..d)
        .map(|f| quantile_boundaries(train.iter().map(|r| r.interacted_raw[f]).collect(), buckets))
        .collect();
    let dwell_bounds = quantile_boundaries(train.iter().map(|r| r.dwell_raw).collect(), buckets);
    let recency_values: Vec<f64> = train
        .iter()
        .flat_map(|r| r.behavior_recency_raw.iter().copied())
        .collect();
    let recency_bounds = quantile_boundaries(recency_values, buckets);
    let beh_dwell_values: Vec<f64> = train
        .iter()
        .flat_map(|r| r.behavior_dwell_raw.iter().copied())
        .collect();
    let beh_dwell_bounds = quantile_boundaries(beh_dwell_values, buckets);

    let mut features = Vec::new();
    features.push(FeatureDecl {
        name: "user_id".into(),
        vocab: config.num_users,
        role: FeatureRole::RegularUser,
        boundaries: None,
    });
    for (f, b) in user_feat_bounds.iter().enumerate() {
        features.push(FeatureDecl {
            name: format!("user_f{f}"),
            vocab: buckets,
            role: FeatureRole::RegularUser,
            boundaries: Some(b.clone()),
        });
    }
    features.push(FeatureDecl {
        name: "item_id".into(),
        vocab: config.num_items,
        role: FeatureRole::RegularItem,
        boundaries: None,
    });
    for (f, b) in item_feat_bounds.iter().enumerate() {
        features.push(FeatureDecl {
            name: format!("item_f{f}"),
            vocab: buckets,
            role: FeatureRole::RegularItem,
            boundaries: Some(b.clone()),
        });
    }
    features.push(FeatureDecl {
        name: "price_bucket".into(),
        vocab: buckets,
        role: FeatureRole::RegularItem,
        boundaries: Some(price_bounds.clone()),
    });
    features.push(FeatureDecl {
        name: "beh_item".into(),
        vocab: config.num_items,
        role: FeatureRole::Behavior,
        boundaries: None,
    });
    features.push(FeatureDecl {
        name: "beh_category".into(),
        vocab: config.num_categories,
        role: FeatureRole::Behavior,
        boundaries: None,
    });
    features.push(FeatureDecl {
        name: "beh_recency".into(),
        vocab: buckets,
        role: FeatureRole::Behavior,
        boundaries: Some(recency_bounds.clone()),
    });
    features.push(FeatureDecl {
        name: "beh_dwell".into(),
        vocab: buckets,
        role: FeatureRole::Behavior,
        boundaries: Some(beh_dwell_bounds.clone()),
    });
    for (f, b) in inter_bounds.iter().enumerate() {
        features.push(FeatureDecl {
            name: format!("inter_f{f}"),
            vocab: buckets,
            role: FeatureRole::Privileged,
            boundaries: Some(b.clone()),
        });
    }
    features.push(FeatureDecl {
        name: "dwell_bucket".into(),
        vocab: buckets,
        role: FeatureRole::Privileged,
        boundaries: Some(dwell_bounds.clone()),
    });
    features.push(FeatureDecl {
        name: "viewed_comments".into(),
        vocab: 2,
        role: FeatureRole::Privileged,
        boundaries: None,
    });
    let schema = FeatureSchema { features };
    schema.validate()?;

    let records: Vec<Record> = raw
        .iter()
        .map(|r| {
            let user_feats: Vec<u32> = user_buckets[r.user].clone();
            let mut item_feats: Vec<u32> = item_buckets[r.item].clone();
            item_feats.push(discretize(items[r.item].price, &price_bounds));
            let interacted_feats: Vec<u32> = (0..d)
                .map(|f| discretize(r.interacted_raw[f], &inter_bounds[f]))
                .collect();
            let events: Vec<BehaviorEvent> = r
                .behavior_items
                .iter()
                .enumerate()
                .map(|(e, &m)| BehaviorEvent {
                    item_id: m as u32,
                    category_id: items[m].category,
                    recency_bucket: discretize(r.behavior_recency_raw[e], &recency_bounds),
                    dwell_bucket: discretize(r.behavior_dwell_raw[e], &beh_dwell_bounds),
                })
                .collect();
            Record {
                user_id: r.user as u32,
                item_id: r.item as u32,
                user_feats,
                item_feats,
                behavior: BehaviorSequence::new(events),
                interacted_feats,
                dwell: r.dwell_raw,
                dwell_bucket: discretize(r.dwell_raw, &dwell_bounds),
                viewed_comments: r.viewed,
                label: r.label,
                true_propensity: r.propensity,
            }
        })
        .collect();

    Ok(Dataset {
        schema,
        config: config.clone(),
        records,
    })
}

fn record_to_json(rec: &Record) -> Value {
    let behavior: Vec<Value> = rec
        .behavior
        .valid_events()
        .iter()
        .map(|e| {
            json!({
                "beh_item": e.item_id,
                "beh_category": e.category_id,
                "beh_recency": e.recency_bucket,
                "beh_dwell": e.dwell_bucket,
            })
        })
        .collect();
    json!({
        "user_id": rec.user_id,
        "item_id": rec.item_id,
        "user_feats": rec.user_feats,
        "item_feats": rec.item_feats,
        "behavior": behavior,
        "interacted_feats": rec.interacted_feats,
        "dwell": rec.dwell,
        "dwell_bucket": rec.dwell_bucket,
        "viewed_comments": rec.viewed_comments,
        "label": if rec.label { 1 } else { 0 },
        "true_propensity": rec.true_propensity,
    })
}

const RECORD_FIELDS: &[&str] = &[
    "user_id",
    "item_id",
    "user_feats",
    "item_feats",
    "behavior",
    "interacted_feats",
    "dwell",
    "dwell_bucket",
    "viewed_comments",
    "label",
    "true_propensity",
];

const EVENT_FIELDS: &[&str] = &["beh_item", "beh_category", "beh_recency", "beh_dwell"];

fn get_u32(map: &Map<String, Value>, key: &str) -> Result<u32> {
    map.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as u32)
        .ok_or_else(|| Error::InvalidArg(format!("missing or non-integer field `{key}`")))
}

fn get_u32_list(map: &Map<String, Value>, key: &str) -> Result<Vec<u32>> {
    let arr = map
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidArg(format!("missing list field `{key}`")))?;
    arr.iter()
        .map(|v| {
            v.as_u64()
                .map(|x| x as u32)
                .ok_or_else(|| Error::InvalidArg(format!("non-integer id in `{key}`")))
        })
        .collect()
}

fn record_from_json(value: Value) -> Result<Record> {
    let map = match value {
        Value::Object(m) => m,
        _ => return Err(Error::InvalidArg("record line is not a JSON object".into())),
    };
    for key in map.keys() {
        if !RECORD_FIELDS.contains(&key.as_str()) {
            return Err(Error::UnknownField(key.clone()));
        }
    }
    let behavior_val = map
        .get("behavior")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidArg("missing list field `behavior`".into()))?;
    let mut events = Vec::with_capacity(behavior_val.len());
    for ev in behavior_val {
        let em = ev
            .as_object()
            .ok_or_else(|| Error::InvalidArg("behavior event is not an object".into()))?;
        for key in em.keys() {
            if !EVENT_FIELDS.contains(&key.as_str()) {
                return Err(Error::UnknownField(key.clone()));
            }
        }
        events.push(BehaviorEvent {
            item_id: get_u32(em, "beh_item")?,
            category_id: get_u32(em, "beh_category")?,
            recency_bucket: get_u32(em, "beh_recency")?,
            dwell_bucket: get_u32(em, "beh_dwell")?,
        });
    }
    let dwell = map
        .get("dwell")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::InvalidArg("missing numeric field `dwell`".into()))?;
    let prop = map
        .get("true_propensity")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::InvalidArg("missing numeric field `true_propensity`".into()))?;
    let viewed = map
        .get("viewed_comments")
        .and_then(Value::as_bool)
        .ok_or_else(|| Error::InvalidArg("missing bool field `viewed_comments`".into()))?;
    Ok(Record {
        user_id: get_u32(&map, "user_id")?,
        item_id: get_u32(&map, "item_id")?,
        user_feats: get_u32_list(&map, "user_feats")?,
        item_feats: get_u32_list(&map, "item_feats")?,
        behavior: BehaviorSequence::new(events),
        interacted_feats: get_u32_list(&map, "interacted_feats")?,
        dwell,
        dwell_bucket: get_u32(&map, "dwell_bucket")?,
        viewed_comments: viewed,
        label: get_u32(&map, "label")? != 0,
        true_propensity: prop,
    })
}

/// Write a dataset as JSON Lines: a header object (format version, schema,
/// generator config, seed, schema hash) followed by one record per line.
pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = json!({
        "format_version": DATASET_FORMAT_VERSION,
        "schema": dataset.schema,
        "config": dataset.config,
        "seed": dataset.config.seed,
        "num_records": dataset.records.len(),
        "split_index": dataset.config.split_index,
        "schema_hash": dataset.schema.hash(),
    });
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for rec in &dataset.records {
        writeln!(w, "{}", serde_json::to_string(&record_to_json(rec))?)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset back. Refuses to load when the header's recorded schema
/// hash does not match the schema it carries, or when `expected_schema_hash`
/// (e.g. from a model checkpoint) disagrees.
pub fn read_jsonl(path: &Path, expected_schema_hash: Option<&str>) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| Error::DatasetParse {
        line: 1,
        msg: "empty file".into(),
    })??;
    let header: Value = serde_json::from_str(&header_line).map_err(|e| Error::DatasetParse {
        line: 1,
        msg: e.to_string(),
    })?;
    let schema: FeatureSchema = serde_json::from_value(
        header
            .get("schema")
            .cloned()
            .ok_or_else(|| Error::DatasetParse {
                line: 1,
                msg: "header missing `schema`".into(),
            })?,
    )?;
    schema.validate()?;
    let config: GeneratorConfig = serde_json::from_value(
        header
            .get("config")
            .cloned()
            .ok_or_else(|| Error::DatasetParse {
                line: 1,
                msg: "header missing `config`".into(),
            })?,
    )?;
    let declared_hash = header
        .get("schema_hash")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::DatasetParse {
            line: 1,
            msg: "header missing `schema_hash`".into(),
        })?;
    let computed = schema.hash();
    if declared_hash != computed {
        return Err(Error::SchemaHashMismatch {
            expected: declared_hash.to_string(),
            got: computed,
        });
    }
    if let Some(expect) = expected_schema_hash {
        if expect != computed {
            return Err(Error::SchemaHashMismatch {
                expected: expect.to_string(),
                got: computed,
            });
        }
    }
    let num_records = header
        .get("num_records")
        .and_then(Value::as_u64)
        .unwrap_or(0) as usize;

    let mut records = Vec::with_capacity(num_records);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::DatasetParse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let rec = record_from_json(value).map_err(|e| match e {
            Error::UnknownField(f) => Error::UnknownField(f),
            other => Error::DatasetParse {
                line: line_no,
                msg: other.to_string(),
            },
        })?;
        records.push(rec);
    }
    if records.len() != num_records {
        return Err(Error::DatasetParse {
            line: records.len() + 1,
            msg: format!(
                "header declares {} records, file holds {}",
                num_records,
                records.len()
            ),
        });
    }
    Ok(Dataset {
        schema,
        config,
        records,
    })
}

/// CSV of ground-truth propensities for oracle studies.
pub fn export_propensities(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "record_index,true_propensity")?;
    for (i, rec) in dataset.records.iter().enumerate() {
        writeln!(w, "{},{}", i, rec.true_propensity)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            num_users: 50,
            num_items: 30,
            num_records: 1200,
            split_index: 1000,
            seed: 7,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn discretize_tie_and_bounds() {
        let b = [1.0, 2.0, 3.0];
        assert_eq!(discretize(0.5, &b), 0);
        assert_eq!(discretize(2.0, &b), 2, "boundary value takes the higher bucket");
        assert_eq!(discretize(9.9, &b), 3);
    }

    #[test]
    fn discretize_matches_linear_scan() {
        let mut rng = crate::rng::derived_rng(3, "disc");
        let boundaries: Vec<f64> = {
            let mut b: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            b.sort_by(|a, b| a.partial_cmp(b).unwrap());
            b.dedup();
            b
        };
        for _ in 0..500 {
            let v = rng.gen_range(-3.0..3.0);
            let scan = boundaries.iter().filter(|b| **b <= v).count() as u32;
            assert_eq!(discretize(v, &boundaries), scan);
        }
    }

    #[test]
    fn unsorted_boundaries_rejected_at_schema_build() {
        let schema = FeatureSchema {
            features: vec![FeatureDecl {
                name: "x".into(),
                vocab: 4,
                role: FeatureRole::RegularUser,
                boundaries: Some(vec![1.0, 1.0, 2.0]),
            }],
        };
        assert!(schema.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_rate_matches_mean_propensity() {
        let mut cfg = small_config();
        cfg.num_records = 20_000;
        cfg.split_index = 18_000;
        let ds = generate(&cfg).unwrap();
        let mean_p: f64 =
            ds.records.iter().map(|r| r.true_propensity).sum::<f64>() / ds.records.len() as f64;
        let rate: f64 =
            ds.records.iter().filter(|r| r.label).count() as f64 / ds.records.len() as f64;
        let se = (ds
            .records
            .iter()
            .map(|r| r.true_propensity * (1.0 - r.true_propensity))
            .sum::<f64>())
        .sqrt()
            / ds.records.len() as f64;
        assert!(
            (rate - mean_p).abs() <= 3.0 * se,
            "label rate {rate} vs mean propensity {mean_p} (se {se})"
        );
    }

    #[test]
    fn ids_stay_inside_schema_vocabularies() {
        let ds = generate(&small_config()).unwrap();
        let buckets = ds.config.buckets as u32;
        for rec in &ds.records {
            assert!((rec.user_id as usize) < ds.config.num_users);
            assert!((rec.item_id as usize) < ds.config.num_items);
            for &f in rec.user_feats.iter().chain(&rec.item_feats) {
                assert!(f < buckets);
            }
            for ev in rec.behavior.valid_events() {
                assert!((ev.item_id as usize) < ds.config.num_items);
                assert!((ev.category_id as usize) < ds.config.num_categories);
            }
            assert!(rec.dwell_bucket < buckets);
        }
    }

    #[test]
    fn jsonl_roundtrip_is_exact() {
        let ds = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let back = read_jsonl(&path, None).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_final_line_reports_line_number() {
        let ds = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let mut contents = std::fs::read_to_string(&path).unwrap();
        contents.truncate(contents.len() - 30);
        std::fs::write(&path, contents).unwrap();
        match read_jsonl(&path, None) {
            Err(Error::DatasetParse { line, .. }) => {
                assert_eq!(line, ds.records.len() + 1, "error should point at the cut line");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_named() {
        let ds = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        write_jsonl(&ds, &path).unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[1] = lines[1].replace("\"user_id\"", "\"bogus_key\"");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match read_jsonl(&path, None) {
            Err(Error::UnknownField(f)) => assert_eq!(f, "bogus_key"),
            other => panic!("expected unknown-field error, got {other:?}"),
        }
    }

    #[test]
    fn schema_hash_mismatch_refuses_to_load() {
        let ds = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        write_jsonl(&ds, &path).unwrap();
        assert!(matches!(
            read_jsonl(&path, Some("deadbeef")),
            Err(Error::SchemaHashMismatch { .. })
        ));
        // tamper with the stored hash itself
        let contents = std::fs::read_to_string(&path).unwrap();
        let tampered = contents.replacen(&ds.schema.hash(), &"0".repeat(64), 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            read_jsonl(&path, None),
            Err(Error::SchemaHashMismatch { .. })
        ));
    }

    #[test]
    fn clean_dwell_ranks_like_true_propensity() {
        let mut cfg = small_config();
        cfg.confound_alpha = 0.0;
        cfg.noise_sigma = 0.0;
        cfg.num_records = 4000;
        cfg.split_index = 3000;
        let ds = generate(&cfg).unwrap();
        let labels: Vec<bool> = ds.records.iter().map(|r| r.label).collect();
        let by_dwell: Vec<f64> = ds.records.iter().map(|r| r.dwell).collect();
        let by_prop: Vec<f64> = ds.records.iter().map(|r| r.true_propensity).collect();
        let auc_dwell = crate::eval::auc(&by_dwell, &labels).unwrap();
        let auc_prop = crate::eval::auc(&by_prop, &labels).unwrap();
        assert!(
            (auc_dwell - auc_prop).abs() < 1e-12,
            "without confound and noise, dwell is a monotone transform of propensity"
        );
    }

    #[test]
    fn confounded_dwell_is_misleading_until_price_adjusted() {
        let mut cfg = small_config();
        cfg.confound_alpha = 2.0;
        cfg.price_beta = -1.0;
        cfg.noise_sigma = 0.0;
        cfg.num_records = 6000;
        cfg.split_index = 5000;
        let ds = generate(&cfg).unwrap();
        let labels: Vec<bool> = ds.records.iter().map(|r| r.label).collect();
        // with zero noise, dwell = logit + alpha*price, and the price-adjusted
        // signal dwell - alpha*price is exactly the label logit
        let raw: Vec<f64> = ds.records.iter().map(|r| r.dwell).collect();
        let adjusted: Vec<f64> = ds
            .records
            .iter()
            .map(|r| (r.true_propensity / (1.0 - r.true_propensity)).ln())
            .collect();
        let auc_raw = crate::eval::auc(&raw, &labels).unwrap();
        let auc_adj = crate::eval::auc(&adjusted, &labels).unwrap();
        assert!(
            auc_raw + 0.02 < auc_adj,
            "confounded dwell ({auc_raw}) should trail the price-adjusted signal ({auc_adj})"
        );
    }
}
