//! Deterministic synthetic traffic with scripted events.
//!
//! Each node carries a phase-shifted daily sinusoid plus AR(1) noise.
//! Scripted events multiply affected nodes' speeds by a class factor with
//! linear three-interval onset and recovery ramps; one-hop neighbors get an
//! attenuated version. The clean signal is generated first and event
//! factors are applied after, so a run with events is bitwise equal to its
//! no-event counterfactual wherever no event reaches. That counterfactual
//! pairing is what the oracle tests lean on.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::data::{TrafficSeries, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::events::{EventRecord, ImpactClass};
use crate::graph::RoadNetwork;
use crate::numerics::{Matrix, RngState};

/// Speed multiplier during an event plateau.
pub fn impact_multiplier(impact: ImpactClass) -> f64 {
    match impact {
        ImpactClass::None => 1.0,
        ImpactClass::Minor => 0.9,
        ImpactClass::Moderate => 0.7,
        ImpactClass::High => 0.4,
    }
}

/// Intervals an onset or recovery ramp spans.
pub const RAMP_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEvent {
    /// Indices into the network's sensor list.
    pub nodes: Vec<usize>,
    /// First affected time step.
    pub start: usize,
    /// Plateau length in intervals (ramps extend beyond).
    pub duration: usize,
    pub impact: ImpactClass,
    /// Natural-language description; empty exactly for None impact.
    pub text: String,
}

impl SynthEvent {
    pub fn validate(&self, n_sensors: usize, n_steps: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("event affects no nodes"));
        }
        if let Some(&bad) = self.nodes.iter().find(|&&n| n >= n_sensors) {
            return Err(Error::invalid(format!("event node {bad} out of range ({n_sensors} sensors)")));
        }
        if self.duration == 0 {
            return Err(Error::invalid("event duration must be at least 1"));
        }
        if self.start >= n_steps || self.start + self.duration > n_steps {
            return Err(Error::invalid(format!(
                "event window {}..{} outside 0..{}",
                self.start,
                self.start + self.duration,
                n_steps
            )));
        }
        if (self.impact == ImpactClass::None) != self.text.is_empty() {
            return Err(Error::invalid(
                "event text must be empty exactly when impact is None",
            ));
        }
        Ok(())
    }

    /// Steps where this event moves speeds: plateau plus recovery ramp.
    pub fn active_range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.duration + RAMP_STEPS
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_sensors: usize,
    pub n_steps: usize,
    pub interval_minutes: u32,
    pub base_speed: f64,
    pub daily_amplitude: f64,
    /// Std of the AR(1) innovations (stationary std is larger).
    pub noise_std: f64,
    /// Fraction of the speed drop passed to one-hop neighbors, in [0, 1].
    pub neighbor_decay: f64,
    pub seed: u64,
    #[serde(default = "default_start_time")]
    pub start_time: NaiveDateTime,
}

fn default_start_time() -> NaiveDateTime {
    NaiveDateTime::parse_from_str("2012-03-01 00:00:00", TIMESTAMP_FORMAT).unwrap()
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sensors == 0 || self.n_steps == 0 {
            return Err(Error::config("n_sensors and n_steps must be positive"));
        }
        if self.interval_minutes == 0 {
            return Err(Error::config("interval_minutes must be positive"));
        }
        if !(self.daily_amplitude >= 0.0 && self.base_speed > self.daily_amplitude) {
            return Err(Error::config(format!(
                "need base_speed > daily_amplitude >= 0, got {} and {}",
                self.base_speed, self.daily_amplitude
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.neighbor_decay) {
            return Err(Error::config("neighbor_decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Multiplicative factor an event applies at step `t` on a directly
/// affected node. Ramps are linear over RAMP_STEPS intervals; events too
/// short to finish the onset recover from the level they reached.
fn event_factor(t: usize, start: usize, duration: usize, factor: f64) -> f64 {
    let end = start + duration;
    if t < start || t >= end + RAMP_STEPS {
        return 1.0;
    }
    let achieved = 1.0 + (factor - 1.0) * (duration.min(RAMP_STEPS) as f64) / RAMP_STEPS as f64;
    if t < end {
        let k = t - start;
        if k < RAMP_STEPS {
            1.0 + (factor - 1.0) * ((k + 1) as f64) / RAMP_STEPS as f64
        } else {
            factor
        }
    } else {
        let r = t - end;
        achieved + (1.0 - achieved) * ((r + 1) as f64) / RAMP_STEPS as f64
    }
}

/// Generate the series and the ground-truth event records (one per event
/// and directly affected node, carrying the event's class and text).
pub fn generate(
    config: &GeneratorConfig,
    events: &[SynthEvent],
    network: &RoadNetwork,
) -> Result<(TrafficSeries, Vec<EventRecord>)> {
    config.validate()?;
    if network.len() != config.n_sensors {
        return Err(Error::invalid(format!(
            "network has {} sensors, config says {}",
            network.len(),
            config.n_sensors
        )));
    }
    for event in events {
        event.validate(config.n_sensors, config.n_steps)?;
    }

    let (n, t_total) = (config.n_sensors, config.n_steps);
    let steps_per_day = 24.0 * 60.0 / config.interval_minutes as f64;
    let rng = RngState::new(config.seed);
    let mut phase_rng = rng.split("phases");
    let phases: Vec<f64> =
        (0..n).map(|_| phase_rng.uniform(0.0, std::f64::consts::TAU)).collect();

    // Clean signal first; events never perturb the noise stream.
    let mut values = Matrix::zeros(t_total, n);
    for i in 0..n {
        let mut noise_rng = rng.split(&format!("noise/{i}"));
        let mut ar = 0.0;
        for t in 0..t_total {
            ar = 0.8 * ar + noise_rng.normal(0.0, config.noise_std);
            let angle = std::f64::consts::TAU * t as f64 / steps_per_day + phases[i];
            values.set(t, i, config.base_speed - config.daily_amplitude * angle.sin() + ar);
        }
    }

    let mut factor = Matrix::full(t_total, n, 1.0);
    for event in events {
        let class_factor = impact_multiplier(event.impact);
        let mut spill: Vec<usize> = event
            .nodes
            .iter()
            .flat_map(|&node| network.neighbors(node))
            .filter(|j| !event.nodes.contains(j))
            .collect();
        spill.sort_unstable();
        spill.dedup();
        for t in event.start..(event.start + event.duration + RAMP_STEPS).min(t_total) {
            let f = event_factor(t, event.start, event.duration, class_factor);
            for &node in &event.nodes {
                factor.set(t, node, factor.get(t, node) * f);
            }
            let g = 1.0 - (1.0 - f) * config.neighbor_decay;
            for &node in &spill {
                factor.set(t, node, factor.get(t, node) * g);
            }
        }
    }

    for idx in 0..t_total * n {
        let v = values.data()[idx] * factor.data()[idx];
        values.data_mut()[idx] = v.max(0.0);
    }

    let series = TrafficSeries {
        sensor_ids: network.sensors.iter().map(|s| s.id.clone()).collect(),
        start: config.start_time,
        interval_minutes: config.interval_minutes,
        values,
        mask: Matrix::full(t_total, n, 1.0),
    };
    series.validate()?;

    let mut records = Vec::new();
    for event in events {
        // The impact window runs through the recovery ramp; the multiplier
        // is still below one until the ramp finishes.
        for &node in &event.nodes {
            records.push(EventRecord::new(
                node,
                series.timestamp(event.start),
                series.timestamp(event.active_range().end.min(t_total)),
                event.impact,
                event.text.clone(),
            ));
        }
    }
    Ok((series, records))
}

/// Vocabulary for templated event descriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Accident,
    Concert,
    Weather,
    Crime,
}

impl EventKind {
    pub const ALL: [EventKind; 4] =
        [EventKind::Accident, EventKind::Concert, EventKind::Weather, EventKind::Crime];
}

/// Class-separable description for an event at a named location. None
/// impact gives the empty string, matching the record invariant.
pub fn template_text(kind: EventKind, impact: ImpactClass, place: &str) -> String {
    if impact == ImpactClass::None {
        return String::new();
    }
    let body = match (kind, impact) {
        (EventKind::Accident, ImpactClass::Minor) => "fender bender on the shoulder",
        (EventKind::Accident, ImpactClass::Moderate) => "multi vehicle accident blocking one lane",
        (EventKind::Accident, ImpactClass::High) => "major accident with all lanes closed",
        (EventKind::Concert, ImpactClass::Minor) => "small concert at the local theater",
        (EventKind::Concert, ImpactClass::Moderate) => "concert crowd arriving at the arena",
        (EventKind::Concert, ImpactClass::High) => "sold out stadium concert with street closures",
        (EventKind::Weather, ImpactClass::Minor) => "drizzle with slick pavement",
        (EventKind::Weather, ImpactClass::Moderate) => "heavy rain with reduced visibility",
        (EventKind::Weather, ImpactClass::High) => "severe storm flooding the roadway",
        (EventKind::Crime, ImpactClass::Minor) => "police activity on the shoulder",
        (EventKind::Crime, ImpactClass::Moderate) => "police investigation closing one lane",
        (EventKind::Crime, ImpactClass::High) => "standoff forcing a full road closure",
        (_, ImpactClass::None) => unreachable!(),
    };
    format!("{body} near {place}")
}

/// Shortest scripted plateau, in steps.
const MIN_SCRIPT_DURATION: usize = 24;
/// Longest scripted plateau, in steps.
const MAX_SCRIPT_DURATION: usize = 36;

fn scripted_event(
    rng: &mut RngState,
    n_sensors: usize,
    slot_lo: usize,
    slot_width: usize,
    kind: EventKind,
    impact: ImpactClass,
) -> SynthEvent {
    let d_max = MAX_SCRIPT_DURATION.min(slot_width.saturating_sub(RAMP_STEPS + 2)).max(1);
    let d_min = MIN_SCRIPT_DURATION.min(d_max);
    let duration = d_min + rng.index(d_max - d_min + 1);
    let start = slot_lo + rng.index(slot_width.saturating_sub(duration + RAMP_STEPS).max(1));
    let node = rng.index(n_sensors);
    let mut nodes = vec![node];
    if rng.index(2) == 1 && n_sensors > 1 {
        if node + 1 < n_sensors {
            nodes.push(node + 1);
        } else {
            nodes.insert(0, node - 1);
        }
    }
    let text = template_text(kind, impact, &format!("sensor {node:02}"));
    SynthEvent { nodes, start, duration, impact, text }
}

/// Scripted events for a study run: a body zone cycling every class and
/// kind through the first `trainval_frac` of the steps, then a tail zone
/// dense in heavy events so the held-out range has every stratum. Slots
/// are disjoint, so events never stack on one another.
pub fn default_event_script_for(
    config: &GeneratorConfig,
    h_in: usize,
    h_out: usize,
    trainval_frac: f64,
    seed: u64,
) -> Result<Vec<SynthEvent>> {
    config.validate()?;
    let t = config.n_steps;
    let boundary = (trainval_frac * t as f64) as usize;
    let guard = MAX_SCRIPT_DURATION + RAMP_STEPS;
    let body_lo = h_in;
    let body_hi = boundary.saturating_sub(guard);
    let tail_lo = boundary;
    let tail_hi = t.saturating_sub(h_out + guard);

    const BODY_SLOTS: usize = 32;
    const TAIL_SLOTS: usize = 8;
    let body_width = body_hi.saturating_sub(body_lo) / BODY_SLOTS;
    let tail_width = tail_hi.saturating_sub(tail_lo) / TAIL_SLOTS;
    if body_width < RAMP_STEPS + 3 || tail_width < RAMP_STEPS + 3 {
        return Err(Error::invalid(format!(
            "{t} steps is too short for the default event script"
        )));
    }

    let classes =
        [ImpactClass::High, ImpactClass::Moderate, ImpactClass::Minor, ImpactClass::None];
    let tail_classes = [
        ImpactClass::High,
        ImpactClass::Moderate,
        ImpactClass::Minor,
        ImpactClass::High,
        ImpactClass::None,
        ImpactClass::Moderate,
        ImpactClass::High,
        ImpactClass::Minor,
    ];
    let kinds = EventKind::ALL;

    let mut rng = RngState::new(seed).split("events");
    let mut events = Vec::with_capacity(BODY_SLOTS + TAIL_SLOTS);
    for s in 0..BODY_SLOTS {
        events.push(scripted_event(
            &mut rng,
            config.n_sensors,
            body_lo + s * body_width,
            body_width,
            kinds[(s / 4) % 4],
            classes[s % 4],
        ));
    }
    for (j, &class) in tail_classes.iter().enumerate() {
        events.push(scripted_event(
            &mut rng,
            config.n_sensors,
            tail_lo + j * tail_width,
            tail_width,
            kinds[j % 4],
            class,
        ));
    }
    for event in &events {
        event.validate(config.n_sensors, t)?;
    }
    Ok(events)
}

pub fn save_events_json(path: &std::path::Path, events: &[SynthEvent]) -> Result<()> {
    let text = serde_json::to_string_pretty(events)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_events_json(path: &std::path::Path) -> Result<Vec<SynthEvent>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let events: Vec<SynthEvent> = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{} is not an event array: {e}", path.display())))?;
    Ok(events)
}
