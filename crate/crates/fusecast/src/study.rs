//! Ablation study over fusion variants on shared synthetic datasets.
//!
//! Per seed, one dataset is generated once (series, ground-truth events,
//! retrieval fixture, windows, text embeddings) and every variant trains on
//! exactly the same tensors, so metric differences isolate the fusion
//! mechanism. Cells are independent and run in parallel; medians across
//! seeds are the reported numbers.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::json;

use crate::config::{ProviderChoice, RunConfig};
use crate::data::{
    chronological_split, fit_normalizer, make_windows, NormStats, SplitSpec, TrafficSeries,
    WindowSample,
};
use crate::error::{Error, Result};
use crate::events::provider::{EventProvider, MockProvider, RetryPolicy};
use crate::events::{
    concat_event_texts, retrieve, EventCache, EventRecord, ImpactClass, QueryRequest, QuerySpec,
    RetrievalStats,
};
use crate::fusion::FusionKind;
use crate::graph::{RoadNetwork, Sensor};
use crate::metrics::{per_horizon, stratify, MetricReport, SampleEval, StratumReport};
use crate::model::{EventMode, Model};
use crate::numerics::Matrix;
use crate::synth::{
    default_event_script_for, generate, load_events_json, SynthEvent,
};
use crate::textenc::embed_texts;

/// One km along a meridian, in degrees of latitude.
const KM_IN_DEG_LAT: f64 = 1.0 / 111.194;

/// Sensors on a straight line at 1 km spacing. With the default kernel
/// width of 1 km and threshold 0.1, exactly the +-1 km pairs connect.
pub fn line_network(n: usize, sigma: Option<f64>, threshold: f64) -> Result<RoadNetwork> {
    let sensors: Vec<Sensor> = (0..n)
        .map(|i| Sensor {
            id: format!("s{i:02}"),
            lat: 34.05 + i as f64 * KM_IN_DEG_LAT,
            lon: -118.25,
        })
        .collect();
    RoadNetwork::build(sensors, sigma, threshold)
}

/// Model variants compared by the study. `EventDisabled` keeps the
/// cross-attention architecture but zeroes the raw text embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyVariant {
    CrossAttention,
    Gating,
    Add,
    Concat,
    EventDisabled,
}

impl StudyVariant {
    pub const ALL: [StudyVariant; 5] = [
        StudyVariant::CrossAttention,
        StudyVariant::Gating,
        StudyVariant::Add,
        StudyVariant::Concat,
        StudyVariant::EventDisabled,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StudyVariant::CrossAttention => "cross_attention",
            StudyVariant::Gating => "gating",
            StudyVariant::Add => "add",
            StudyVariant::Concat => "concat",
            StudyVariant::EventDisabled => "event_disabled",
        }
    }

    pub fn settings(self) -> (FusionKind, EventMode) {
        match self {
            StudyVariant::CrossAttention => (FusionKind::CrossAttention, EventMode::Enabled),
            StudyVariant::Gating => (FusionKind::Gating, EventMode::Enabled),
            StudyVariant::Add => (FusionKind::Add, EventMode::Enabled),
            StudyVariant::Concat => (FusionKind::Concat, EventMode::Enabled),
            StudyVariant::EventDisabled => (FusionKind::CrossAttention, EventMode::Disabled),
        }
    }
}

impl FromStr for StudyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudyVariant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for StudyVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Provider responses covering every (sensor, time bucket) pair an event
/// touches. A bucket sees an event when any forecast window anchored in
/// the bucket overlaps the event's active steps, which also hands the
/// model advance notice of events starting inside the window. Each text
/// carries the event's status relative to the bucket, the way a summary
/// written for a specific query window would. Quiet pairs are omitted;
/// the mock provider answers those with an empty event.
/// Nearest 15-minute figure, never below 15. Coarse timing keeps the
/// status vocabulary small while still dating onsets and rebounds.
fn quantize_minutes(minutes: i64) -> i64 {
    (((minutes as f64) / 15.0).round() as i64 * 15).max(15)
}

pub fn build_fixture(
    events: &[SynthEvent],
    network: &RoadNetwork,
    series: &TrafficSeries,
    spec: &QuerySpec,
) -> Result<BTreeMap<String, serde_json::Value>> {
    let interval = spec.interval_minutes as i64;
    if spec.granularity_minutes % interval != 0 {
        return Err(Error::config(format!(
            "granularity {} min must be a multiple of the {} min interval",
            spec.granularity_minutes, interval
        )));
    }
    let bucket_steps = (spec.granularity_minutes / interval) as usize;
    let t_total = series.num_steps();

    let mut per_pair: BTreeMap<(usize, usize), Vec<(String, ImpactClass)>> = BTreeMap::new();
    let mut b0 = 0;
    while b0 < t_total {
        for event in events {
            if event.impact == ImpactClass::None {
                continue;
            }
            let span = event.active_range();
            let visible = span.start <= b0 + bucket_steps - 1 + spec.h_out && span.end >= b0 + 2;
            if !visible {
                continue;
            }
            let core_end = event.start + event.duration;
            let mid = b0 + bucket_steps / 2;
            let status = if mid < event.start {
                format!("expected in about {} minutes", quantize_minutes((event.start - mid) as i64 * interval))
            } else if mid < core_end {
                format!("in progress, clearing in about {} minutes", quantize_minutes((core_end - mid) as i64 * interval))
            } else {
                String::from("clearing now")
            };
            for &node in &event.nodes {
                per_pair
                    .entry((node, b0))
                    .or_default()
                    .push((format!("{} ({status})", event.text), event.impact));
            }
        }
        b0 += bucket_steps;
    }

    let mut fixture = BTreeMap::new();
    for ((node, b0), items) in per_pair {
        let sensor = &network.sensors[node];
        let key = crate::events::QueryKey::new(
            sensor.lat,
            sensor.lon,
            series.timestamp(b0),
            spec.granularity_minutes,
            spec.template,
        );
        let texts: Vec<&str> = items.iter().map(|(t, _)| t.as_str()).collect();
        let impacts: Vec<&str> = items.iter().map(|(_, c)| c.label()).collect();
        fixture.insert(key.canonical(), json!({ "Event": texts.join(", "), "Impact": impacts }));
    }
    Ok(fixture)
}

/// Everything one seed shares across variants.
pub struct SeedData {
    pub seed: u64,
    pub network: RoadNetwork,
    pub series: TrafficSeries,
    pub truth: Vec<EventRecord>,
    pub stats: NormStats,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// One N x d_text matrix per sample, aligned with the splits.
    pub train_texts: Vec<Matrix>,
    pub val_texts: Vec<Matrix>,
    pub test_texts: Vec<Matrix>,
    pub retrieval: RetrievalStats,
}

fn add_stats(total: &mut RetrievalStats, part: &RetrievalStats) {
    total.requests += part.requests;
    total.cache_hits += part.cache_hits;
    total.cache_misses += part.cache_misses;
    total.provider_calls += part.provider_calls;
    total.provider_failures += part.provider_failures;
}

fn split_texts(
    samples: &[WindowSample],
    series: &TrafficSeries,
    network: &RoadNetwork,
    spec: &QuerySpec,
    provider: &dyn EventProvider,
    cache: &mut EventCache,
    d_text: usize,
    totals: &mut RetrievalStats,
) -> Result<Vec<Matrix>> {
    let n = network.len();
    let mut requests = Vec::with_capacity(samples.len() * n);
    for sample in samples {
        let anchor = series.timestamp(sample.anchor);
        for (node_id, sensor) in network.sensors.iter().enumerate() {
            requests.push(QueryRequest { node_id, lat: sensor.lat, lon: sensor.lon, anchor });
        }
    }
    let (records, stats) = retrieve(provider, &requests, spec, &RetryPolicy::default(), cache)?;
    add_stats(totals, &stats);

    let mut embedded = Vec::with_capacity(samples.len());
    for chunk in records.chunks(n) {
        let texts: Vec<String> = chunk.iter().map(|recs| concat_event_texts(recs)).collect();
        embedded.push(embed_texts(&texts, d_text)?);
    }
    Ok(embedded)
}

pub fn query_spec(cfg: &RunConfig) -> QuerySpec {
    let mut spec = QuerySpec::new(
        cfg.events.template,
        cfg.data.h_in,
        cfg.data.h_out,
        cfg.synth.interval_minutes,
    );
    if let Some(g) = cfg.events.granularity_minutes {
        spec.granularity_minutes = g as i64;
    }
    spec
}

/// Build one seed's dataset: generate, split, retrieve, embed.
pub fn prepare_seed(cfg: &RunConfig, seed: u64) -> Result<SeedData> {
    let mut gen = cfg.synth.clone();
    gen.seed = seed;
    let network = line_network(gen.n_sensors, cfg.graph.sigma, cfg.graph.threshold)?;
    let events = match &cfg.events_script {
        Some(path) => load_events_json(path)?,
        Option::None => default_event_script(cfg, seed)?,
    };
    let (series, truth) = generate(&gen, &events, &network)?;

    let (h_in, h_out, stride) = (cfg.data.h_in, cfg.data.h_out, cfg.data.stride);
    let t_total = series.num_steps();
    if t_total < h_in + h_out + stride {
        return Err(Error::config("series too short for the window sizes"));
    }
    let n_samples = (t_total - h_in - h_out) / stride + 1;
    let n_train = (n_samples as f64 * cfg.data.train_frac).floor() as usize;
    if n_train == 0 {
        return Err(Error::config("train fraction yields no samples"));
    }
    let fit_end = (h_in + (n_train - 1) * stride + h_out).min(t_total);
    let stats = fit_normalizer(&series, 0..fit_end)?;

    let samples = make_windows(&series, &stats, h_in, h_out, stride)?;
    let split = chronological_split(
        samples,
        &SplitSpec { train_frac: cfg.data.train_frac, val_frac: cfg.data.val_frac },
    )?;

    let spec = query_spec(cfg);
    let provider: Box<dyn EventProvider> = match (&cfg.events.provider, &cfg.events.fixture) {
        (ProviderChoice::Mock, Some(path)) => Box::new(MockProvider::from_file(path)?),
        (ProviderChoice::Mock, Option::None) => Box::new(MockProvider::from_map(build_fixture(
            &events, &network, &series, &spec,
        )?)),
        (ProviderChoice::Live, _) => {
            return Err(Error::config("the study runs on synthetic data; use provider = mock"))
        }
    };

    let mut cache = EventCache::default();
    let mut retrieval = RetrievalStats::default();
    let d_text = cfg.model.d_text;
    let train_texts = split_texts(
        &split.train,
        &series,
        &network,
        &spec,
        provider.as_ref(),
        &mut cache,
        d_text,
        &mut retrieval,
    )?;
    let val_texts = split_texts(
        &split.val,
        &series,
        &network,
        &spec,
        provider.as_ref(),
        &mut cache,
        d_text,
        &mut retrieval,
    )?;
    let test_texts = split_texts(
        &split.test,
        &series,
        &network,
        &spec,
        provider.as_ref(),
        &mut cache,
        d_text,
        &mut retrieval,
    )?;

    Ok(SeedData {
        seed,
        network,
        series,
        truth,
        stats,
        train: split.train,
        val: split.val,
        test: split.test,
        train_texts,
        val_texts,
        test_texts,
        retrieval,
    })
}

/// Auto-generated event script: a body zone cycling all classes and kinds
/// through the train/val steps, plus a tail zone inside the test steps
/// that is dense enough for stable per-class medians.
pub fn default_event_script(cfg: &RunConfig, seed: u64) -> Result<Vec<SynthEvent>> {
    default_event_script_for(
        &cfg.synth,
        cfg.data.h_in,
        cfg.data.h_out,
        cfg.data.train_frac + cfg.data.val_frac,
        seed,
    )
}

/// One trained variant on one seed's dataset.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub variant: StudyVariant,
    pub seed: u64,
    pub overall: MetricReport,
    pub horizons: Vec<MetricReport>,
    pub strata: Vec<StratumReport>,
    pub best_val: f64,
    pub epochs: usize,
}

pub fn run_cell(cfg: &RunConfig, data: &SeedData, variant: StudyVariant) -> Result<CellResult> {
    let mut mc = cfg.model_config();
    let (kind, mode) = variant.settings();
    mc.fusion_kind = kind;
    mc.event_mode = mode;

    let mut model = Model::new(mc, data.network.adjacency.clone(), data.stats, data.seed)?;
    let report = model.train(
        &data.train,
        &data.train_texts,
        &data.val,
        &data.val_texts,
        &cfg.train_config(data.seed),
    )?;

    let step = chrono::Duration::minutes(data.series.interval_minutes as i64);
    let mut evals = Vec::with_capacity(data.test.len());
    for (sample, text) in data.test.iter().zip(&data.test_texts) {
        let pred = model.predict_denorm(&sample.x, text)?;
        evals.push(SampleEval {
            target: sample.y.clone(),
            pred,
            mask: sample.y_mask.clone(),
            window_start: data.series.timestamp(sample.anchor) + step,
            window_end: data.series.timestamp(sample.anchor + sample.y.cols()) + step,
        });
    }

    let targets: Vec<Matrix> = evals.iter().map(|e| e.target.clone()).collect();
    let preds: Vec<Matrix> = evals.iter().map(|e| e.pred.clone()).collect();
    let masks: Vec<Matrix> = evals.iter().map(|e| e.mask.clone()).collect();
    let marks: Vec<usize> =
        [3, 6, cfg.data.h_out].into_iter().filter(|&h| h <= cfg.data.h_out).collect();
    let mut horizons = per_horizon(&targets, &preds, &masks, &marks)?;
    let overall = horizons.pop().expect("per_horizon always appends the pooled row");
    let strata = stratify(&evals, &data.truth)?;

    Ok(CellResult {
        variant,
        seed: data.seed,
        overall,
        horizons,
        strata,
        best_val: report.best_val,
        epochs: report.history.len(),
    })
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub cells: Vec<CellResult>,
}

/// Median of the given values; absent for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return Option::None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        Some(sorted[mid])
    } else {
        Some(0.5 * (sorted[mid - 1] + sorted[mid]))
    }
}

impl StudyResult {
    pub fn median_overall_mae(&self, variant: StudyVariant) -> Option<f64> {
        let maes: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .map(|c| c.overall.mae)
            .collect();
        median(&maes)
    }

    pub fn median_stratum_mae(&self, variant: StudyVariant, class: ImpactClass) -> Option<f64> {
        let maes: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.strata.iter().find(|s| s.impact == class))
            .map(|s| s.report.mae)
            .collect();
        median(&maes)
    }

    /// Relative MAE reduction of `variant` against `baseline` on one
    /// stratum, e.g. 0.2 means 20% lower error.
    pub fn improvement_over(
        &self,
        variant: StudyVariant,
        baseline: StudyVariant,
        class: ImpactClass,
    ) -> Option<f64> {
        let v = self.median_stratum_mae(variant, class)?;
        let b = self.median_stratum_mae(baseline, class)?;
        if b <= 0.0 {
            return Option::None;
        }
        Some((b - v) / b)
    }

    /// Long-form table: one row per cell, stratum and horizon.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,stratum,horizon,mae,rmse,mape,count\n");
        for cell in &self.cells {
            let mut push = |stratum: &str, r: &MetricReport| {
                out.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                    cell.variant, cell.seed, stratum, r.horizon, r.mae, r.rmse, r.mape, r.count
                ));
            };
            for r in &cell.horizons {
                push("all", r);
            }
            push("all", &cell.overall);
            for s in &cell.strata {
                push(s.impact.label(), &s.report);
            }
        }
        out
    }

    /// Median MAE per variant: overall plus one column per stratum.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,overall,none,minor,moderate,high\n");
        let mut variants: Vec<StudyVariant> = Vec::new();
        for cell in &self.cells {
            if !variants.contains(&cell.variant) {
                variants.push(cell.variant);
            }
        }
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            Option::None => String::from("nan"),
        };
        for v in variants {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                v,
                fmt(self.median_overall_mae(v)),
                fmt(self.median_stratum_mae(v, ImpactClass::None)),
                fmt(self.median_stratum_mae(v, ImpactClass::Minor)),
                fmt(self.median_stratum_mae(v, ImpactClass::Moderate)),
                fmt(self.median_stratum_mae(v, ImpactClass::High)),
            ));
        }
        out
    }
}

/// Run every (variant, seed) cell, sharing one dataset per seed.
pub fn run_study(cfg: &RunConfig, variants: &[StudyVariant]) -> Result<StudyResult> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::config("no variants requested"));
    }
    let datasets: Vec<SeedData> =
        cfg.study.seeds.iter().map(|&s| prepare_seed(cfg, s)).collect::<Result<_>>()?;

    let jobs: Vec<(usize, StudyVariant)> = (0..datasets.len())
        .flat_map(|d| variants.iter().map(move |&v| (d, v)))
        .collect();
    let cells: Result<Vec<CellResult>> =
        jobs.par_iter().map(|&(d, v)| run_cell(cfg, &datasets[d], v)).collect();
    Ok(StudyResult { cells: cells? })
}

/// Variants requested by the config; all five when unset.
pub fn configured_variants(cfg: &RunConfig) -> Result<Vec<StudyVariant>> {
    match &cfg.study.variants {
        Some(labels) => labels.iter().map(|l| l.parse()).collect(),
        Option::None => Ok(StudyVariant::ALL.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{template_text, EventKind};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.n_sensors = 6;
        cfg.synth.n_steps = 600;
        cfg.model.hidden = 8;
        cfg.model.heads = 2;
        cfg.model.d_text = 8;
        cfg.train.max_epochs = 2;
        cfg.train.batch_size = 8;
        cfg.study.seeds = vec![7];
        cfg
    }

    #[test]
    fn line_network_connects_adjacent_sensors_only() {
        let net = line_network(6, Some(1.0), 0.1).unwrap();
        for i in 0..6usize {
            let expect: Vec<usize> =
                [i.wrapping_sub(1), i + 1].into_iter().filter(|&j| j < 6).collect();
            assert_eq!(net.neighbors(i), expect, "node {i}");
        }
    }

    #[test]
    fn default_script_covers_all_classes_in_the_test_zone() {
        let cfg = RunConfig::default();
        let events = default_event_script(&cfg, 1).unwrap();
        assert!(events.len() >= 24);
        for event in &events {
            event.validate(cfg.synth.n_sensors, cfg.synth.n_steps).unwrap();
        }
        let boundary =
            ((cfg.data.train_frac + cfg.data.val_frac) * cfg.synth.n_steps as f64) as usize;
        for class in [ImpactClass::Minor, ImpactClass::Moderate, ImpactClass::High] {
            let tail = events.iter().filter(|e| e.impact == class && e.start >= boundary).count();
            assert!(tail >= 1, "{class} missing from the test zone");
        }
        let high_tail =
            events.iter().filter(|e| e.impact == ImpactClass::High && e.start >= boundary).count();
        assert!(high_tail >= 2, "need at least two heavy events after the split boundary");
    }

    #[test]
    fn scripts_differ_across_seeds_but_not_runs() {
        let cfg = RunConfig::default();
        let a = default_event_script(&cfg, 1).unwrap();
        let b = default_event_script(&cfg, 1).unwrap();
        let c = default_event_script(&cfg, 2).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.start == y.start && x.nodes == y.nodes));
        assert!(a.iter().zip(&c).any(|(x, y)| x.start != y.start || x.nodes != y.nodes));
    }

    #[test]
    fn fixture_gives_advance_notice_of_events() {
        let mut cfg = tiny_config();
        cfg.events.granularity_minutes = Some(30);
        let net = line_network(6, Some(1.0), 0.1).unwrap();
        let event = SynthEvent {
            nodes: vec![2],
            start: 120,
            duration: 24,
            impact: ImpactClass::High,
            text: template_text(EventKind::Concert, ImpactClass::High, "sensor 02"),
        };
        let mut gen = cfg.synth.clone();
        gen.seed = 7;
        let (series, _) = generate(&gen, std::slice::from_ref(&event), &net).unwrap();
        let spec = query_spec(&cfg);
        let fixture = build_fixture(&[event.clone()], &net, &series, &spec).unwrap();
        assert!(!fixture.is_empty());

        let bucket_steps = (spec.granularity_minutes / spec.interval_minutes as i64) as usize;
        assert_eq!(bucket_steps, 6);
        let sensor = &net.sensors[2];
        let key_at = |b0: usize| {
            crate::events::QueryKey::new(
                sensor.lat,
                sensor.lon,
                series.timestamp(b0),
                spec.granularity_minutes,
                spec.template,
            )
            .canonical()
        };
        let covered: Vec<usize> = (0..series.num_steps())
            .step_by(bucket_steps)
            .filter(|&b0| fixture.contains_key(&key_at(b0)))
            .collect();
        // Forecast windows anchored at bucket 108 already reach the start
        // at 120, and the recovery ramp past 144 keeps bucket 144 aware.
        assert_eq!(covered, vec![108, 114, 120, 126, 132, 138, 144]);
        let event_at = |b0: usize| fixture[&key_at(b0)]["Event"].as_str().unwrap().to_string();
        assert_eq!(event_at(108), format!("{} (expected in about 45 minutes)", event.text));
        assert_eq!(event_at(114), format!("{} (expected in about 15 minutes)", event.text));
        assert_eq!(
            event_at(120),
            format!("{} (in progress, clearing in about 105 minutes)", event.text)
        );
        assert_eq!(
            event_at(138),
            format!("{} (in progress, clearing in about 15 minutes)", event.text)
        );
        assert_eq!(event_at(144), format!("{} (clearing now)", event.text));
        assert_eq!(fixture[&key_at(120)]["Impact"][0].as_str().unwrap(), "High");
    }

    #[test]
    fn prepare_seed_aligns_texts_with_samples() {
        let cfg = tiny_config();
        let data = prepare_seed(&cfg, 7).unwrap();
        assert_eq!(data.train.len(), data.train_texts.len());
        assert_eq!(data.val.len(), data.val_texts.len());
        assert_eq!(data.test.len(), data.test_texts.len());
        assert!(!data.test.is_empty());
        for m in data.train_texts.iter().chain(&data.val_texts).chain(&data.test_texts) {
            assert_eq!(m.shape(), (6, cfg.model.d_text));
        }
        let n_samples = data.train.len() + data.val.len() + data.test.len();
        assert_eq!(data.retrieval.requests, (n_samples * 6) as u64);
        assert!(data.retrieval.cache_hits > 0);
        assert_eq!(data.retrieval.provider_failures, 0);
    }

    #[test]
    fn text_embeddings_are_nonzero_near_events_for_direct_nodes() {
        let cfg = tiny_config();
        let data = prepare_seed(&cfg, 7).unwrap();
        let nonzero = data
            .train_texts
            .iter()
            .chain(&data.test_texts)
            .flat_map(|m| m.data().iter())
            .filter(|v| **v != 0.0)
            .count();
        assert!(nonzero > 0, "no sample ever saw event text");
    }

    #[test]
    fn one_cell_trains_and_reports_strata() {
        let cfg = tiny_config();
        let data = prepare_seed(&cfg, 7).unwrap();
        let cell = run_cell(&cfg, &data, StudyVariant::Add).unwrap();
        assert_eq!(cell.seed, 7);
        assert!(cell.overall.mae.is_finite());
        assert!(cell.epochs >= 1);
        assert!(!cell.strata.is_empty());
        let total: usize = cell.strata.iter().map(|s| s.samples).sum();
        assert_eq!(total, data.test.len());
    }

    #[test]
    fn study_medians_and_csv_are_shaped() {
        let mut cfg = tiny_config();
        cfg.train.max_epochs = 1;
        let variants = [StudyVariant::Add, StudyVariant::EventDisabled];
        let result = run_study(&cfg, &variants).unwrap();
        assert_eq!(result.cells.len(), 2);
        assert!(result.median_overall_mae(StudyVariant::Add).is_some());
        assert!(result.median_overall_mae(StudyVariant::CrossAttention).is_none());
        let csv = result.to_csv();
        assert!(csv.starts_with("variant,seed,stratum,horizon,"));
        assert!(csv.contains("add,7,all,average,"));
        let summary = result.summary_csv();
        assert!(summary.contains("event_disabled,"));
    }

    #[test]
    fn median_handles_even_and_odd_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), Option::None);
    }
}
