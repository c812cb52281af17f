//! On-demand event retrieval around forecast windows.
//!
//! Every forecasting sample asks, per sensor, "what is happening near this
//! location during the window I am about to predict?". Requests are bucketed
//! by rounded coordinates and a time grid so repeated questions collapse to
//! one provider call, answers are cached for the run, and provider failures
//! degrade to explicit no-impact records instead of aborting a run.

pub mod prompt;
pub mod provider;

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use prompt::{parse_response, render_prompt};
use provider::{EventProvider, RetryPolicy};

pub use prompt::TemplateId;

/// How strongly an event is expected to disturb traffic.
/// Ordering follows severity, so `max` picks the dominant event.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub enum ImpactClass {
    #[default]
    None,
    Minor,
    Moderate,
    High,
}

impl ImpactClass {
    pub const ALL: [ImpactClass; 4] =
        [ImpactClass::None, ImpactClass::Minor, ImpactClass::Moderate, ImpactClass::High];

    pub fn label(self) -> &'static str {
        match self {
            ImpactClass::None => "None",
            ImpactClass::Minor => "Minor",
            ImpactClass::Moderate => "Moderate",
            ImpactClass::High => "High",
        }
    }

    /// Case-insensitive parse; unknown labels fall back to Minor, the
    /// weakest nonzero class, so a provider's novel phrasing still counts.
    pub fn parse_lenient(s: &str) -> ImpactClass {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => ImpactClass::None,
            "moderate" => ImpactClass::Moderate,
            "high" => ImpactClass::High,
            _ => ImpactClass::Minor,
        }
    }
}

impl std::fmt::Display for ImpactClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One retrieved (or fallback) event tied to a sensor and a forecast window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub node_id: usize,
    pub window_start: NaiveDateTime,
    pub window_end: NaiveDateTime,
    pub impact: ImpactClass,
    pub text: String,
}

impl EventRecord {
    /// Enforces the type invariant: text is empty iff impact is None.
    /// A nonempty text with an explicit None impact is promoted to Minor
    /// (the provider named an event; the weakest class keeps it visible).
    pub fn new(
        node_id: usize,
        window_start: NaiveDateTime,
        window_end: NaiveDateTime,
        impact: ImpactClass,
        text: String,
    ) -> Self {
        let text = text.trim().to_string();
        let impact = if text.is_empty() {
            ImpactClass::None
        } else if impact == ImpactClass::None {
            ImpactClass::Minor
        } else {
            impact
        };
        debug_assert!(window_start <= window_end);
        EventRecord { node_id, window_start, window_end, impact, text }
    }

    pub fn no_impact(node_id: usize, window_start: NaiveDateTime, window_end: NaiveDateTime) -> Self {
        EventRecord::new(node_id, window_start, window_end, ImpactClass::None, String::new())
    }
}

/// Dedup bucket: coordinates rounded to 3 decimals (about 110 m), the
/// anchor floored onto a time grid, and the template. Coordinates are kept
/// in their formatted form so the key always matches the rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryKey {
    pub lat_bucket: String,
    pub lon_bucket: String,
    pub time_bucket: NaiveDateTime,
    pub template: TemplateId,
}

impl QueryKey {
    pub fn new(
        lat: f64,
        lon: f64,
        anchor: NaiveDateTime,
        granularity_minutes: i64,
        template: TemplateId,
    ) -> Self {
        QueryKey {
            lat_bucket: format!("{lat:.3}"),
            lon_bucket: format!("{lon:.3}"),
            time_bucket: floor_to_grid(anchor, granularity_minutes),
            template,
        }
    }

    /// Canonical form used by fixture files: `{lat}:{lon}:{time}:{template}`.
    pub fn canonical(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.lat_bucket,
            self.lon_bucket,
            self.time_bucket.format(prompt::PROMPT_TIME_FORMAT),
            self.template
        )
    }
}

fn floor_to_grid(t: NaiveDateTime, granularity_minutes: i64) -> NaiveDateTime {
    debug_assert!(granularity_minutes > 0);
    let minutes = t.and_utc().timestamp().div_euclid(60);
    let floored = minutes.div_euclid(granularity_minutes) * granularity_minutes;
    DateTime::from_timestamp(floored * 60, 0)
        .expect("grid-floored timestamp in range")
        .naive_utc()
}

/// Batch-wide query parameters.
#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub template: TemplateId,
    pub h_in: usize,
    pub h_out: usize,
    pub interval_minutes: u32,
    /// Time grid for dedup buckets; defaults to one forecast window.
    pub granularity_minutes: i64,
}

impl QuerySpec {
    pub fn new(template: TemplateId, h_in: usize, h_out: usize, interval_minutes: u32) -> Self {
        QuerySpec {
            template,
            h_in,
            h_out,
            interval_minutes,
            granularity_minutes: h_out as i64 * interval_minutes as i64,
        }
    }

    /// Forecast window for an anchor: steps anchor+1 ..= anchor+H_out.
    pub fn window(&self, anchor: NaiveDateTime) -> (NaiveDateTime, NaiveDateTime) {
        let step = Duration::minutes(self.interval_minutes as i64);
        (anchor + step, anchor + step * self.h_out as i32)
    }
}

/// One per-sensor question: what happens near (lat, lon) after `anchor`?
#[derive(Debug, Clone)]
pub struct QueryRequest {
    pub node_id: usize,
    pub lat: f64,
    pub lon: f64,
    pub anchor: NaiveDateTime,
}

/// Collapse a batch into unique keys (first-seen order) plus a per-request
/// index into the key list, so results can be reassembled losslessly.
pub fn dedup(batch: &[QueryRequest], spec: &QuerySpec) -> (Vec<QueryKey>, Vec<usize>) {
    let mut keys: Vec<QueryKey> = Vec::new();
    let mut seen: HashMap<QueryKey, usize> = HashMap::new();
    let mut mapping = Vec::with_capacity(batch.len());
    for req in batch {
        let key =
            QueryKey::new(req.lat, req.lon, req.anchor, spec.granularity_minutes, spec.template);
        let idx = *seen.entry(key.clone()).or_insert_with(|| {
            keys.push(key);
            keys.len() - 1
        });
        mapping.push(idx);
    }
    (keys, mapping)
}

/// Run-scoped cache. Deterministic iteration (BTreeMap) so dumps are stable.
/// Single-threaded by design: batches fan in through `retrieve`.
#[derive(Debug, Default)]
pub struct EventCache {
    map: BTreeMap<QueryKey, Vec<EventRecord>>,
    pub hits: u64,
    pub misses: u64,
}

impl EventCache {
    pub fn new() -> Self {
        EventCache::default()
    }

    /// Counted lookup: a populated key is a hit, anything else a miss.
    pub fn lookup(&mut self, key: &QueryKey) -> Option<&Vec<EventRecord>> {
        if self.map.contains_key(key) {
            self.hits += 1;
            self.map.get(key)
        } else {
            self.misses += 1;
            None
        }
    }

    pub fn insert(&mut self, key: QueryKey, records: Vec<EventRecord>) {
        self.map.insert(key, records);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Canonical-key snapshot for dumps; sorted by key.
    pub fn entries(&self) -> Vec<(String, &Vec<EventRecord>)> {
        self.map.iter().map(|(k, v)| (k.canonical(), v)).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RetrievalStats {
    pub requests: u64,
    /// Requests answered from an already-populated key.
    pub cache_hits: u64,
    /// Unique keys that had to be fetched.
    pub cache_misses: u64,
    /// Provider invocations, retries included.
    pub provider_calls: u64,
    /// Keys that exhausted retries and fell back to no-impact records.
    pub provider_failures: u64,
}

/// Resolve a batch request-by-request: cached keys are served as hits, each
/// new key triggers one (retried) provider fetch whose parsed records are
/// cached, and unrecoverable failures cache an explicit no-impact fallback.
/// Never fails on provider or parse errors; those degrade and are counted.
pub fn retrieve(
    provider: &dyn EventProvider,
    batch: &[QueryRequest],
    spec: &QuerySpec,
    policy: &RetryPolicy,
    cache: &mut EventCache,
) -> Result<(Vec<Vec<EventRecord>>, RetrievalStats)> {
    let mut stats = RetrievalStats::default();
    let mut results = Vec::with_capacity(batch.len());
    for req in batch {
        stats.requests += 1;
        let key =
            QueryKey::new(req.lat, req.lon, req.anchor, spec.granularity_minutes, spec.template);
        if let Some(records) = cache.lookup(&key) {
            stats.cache_hits += 1;
            results.push(records.clone());
            continue;
        }
        stats.cache_misses += 1;
        let prompt = render_prompt(
            spec.template,
            req.lat,
            req.lon,
            req.anchor,
            spec.h_in,
            spec.h_out,
            spec.interval_minutes,
        )?;
        let (window_start, window_end) = spec.window(req.anchor);
        let mut calls = 0;
        let records = match policy.run(|| {
            calls += 1;
            provider.fetch(&key, &prompt)
        }) {
            Ok(raw) => match parse_response(&raw, req.node_id, window_start, window_end) {
                Ok(records) => records,
                Err(e) => {
                    log::warn!("unparseable response for {}: {e}; using no-impact fallback", key.canonical());
                    stats.provider_failures += 1;
                    vec![EventRecord::no_impact(req.node_id, window_start, window_end)]
                }
            },
            Err(e) => {
                log::warn!("provider failed for {}: {e}; using no-impact fallback", key.canonical());
                stats.provider_failures += 1;
                vec![EventRecord::no_impact(req.node_id, window_start, window_end)]
            }
        };
        stats.provider_calls += calls;
        cache.insert(key, records.clone());
        results.push(records);
    }
    Ok((results, stats))
}

/// Join the nonempty texts of one sensor's records into the single string
/// the text encoder consumes. All-fallback record lists give "".
pub fn concat_event_texts(records: &[EventRecord]) -> String {
    records
        .iter()
        .filter(|r| !r.text.is_empty())
        .map(|r| r.text.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}
