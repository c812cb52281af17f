//! Prompt templates, rendering, and response parsing.
//!
//! Five instruction variants are supported; they differ in whether the
//! provider is asked for all nearby events or only the strongest one, which
//! example categories are listed, and whether a worked example is shown.
//! Rendered prompts are byte-stable for fixed inputs and are covered by
//! golden files in the test suite.

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{EventRecord, ImpactClass};
use crate::error::{Error, Result};

pub const PROMPT_TIME_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] =
        [TemplateId::P1, TemplateId::P2, TemplateId::P3, TemplateId::P4, TemplateId::P5];
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemplateId::P1 => "P1",
            TemplateId::P2 => "P2",
            TemplateId::P3 => "P3",
            TemplateId::P4 => "P4",
            TemplateId::P5 => "P5",
        })
    }
}

impl std::str::FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(TemplateId::P1),
            "P2" => Ok(TemplateId::P2),
            "P3" => Ok(TemplateId::P3),
            "P4" => Ok(TemplateId::P4),
            "P5" => Ok(TemplateId::P5),
            other => Err(Error::invalid(format!("unknown template `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
}

/// Instruction sentence per template. P1 is the full feature set; P2 asks
/// for a single strongest event; P3 omits weather from the category list;
/// P4 omits crime; P5 is P4's list without the worked example.
fn instruction(id: TemplateId) -> &'static str {
    match id {
        TemplateId::P1 => {
            "For each sensor, identify nearby events that could impact traffic (e.g., LA news, Severe Weather, concerts, crime). Example: Classic Cinema Night at Cinegrill Theater."
        }
        TemplateId::P2 => {
            "For each sensor, identify the most influential event that could impact traffic (e.g., LA news, Severe Weather, concerts, crime). Example: Classic Cinema Night at Cinegrill Theater."
        }
        TemplateId::P3 => {
            "For each sensor, identify nearby events that could impact traffic (e.g., LA news, concerts, crime). Example: Classic Cinema Night at Cinegrill Theater."
        }
        TemplateId::P4 => {
            "For each sensor, identify nearby events that could impact traffic (e.g., LA news, Severe Weather, concerts). Example: Classic Cinema Night at Cinegrill Theater."
        }
        TemplateId::P5 => {
            "For each sensor, identify nearby events that could impact traffic (e.g., LA news, Severe Weather, concerts)."
        }
    }
}

impl PromptTemplate {
    pub fn get(id: TemplateId) -> PromptTemplate {
        let body = format!(
            "A traffic sensor is located at latitude {{lat}}, longitude {{lon}}.\n\
             The current time is {{timestamp}}. The prediction window is {{window}}.\n\
             {}\n\
             Respond with a JSON object containing an \"Event\" field listing the events \
             separated by commas, and an optional \"Impact\" field with one of None, Minor, \
             Moderate, High for each event.\n",
            instruction(id)
        );
        PromptTemplate { id, body }
    }
}

/// Expand `{lat}`, `{lon}`, `{timestamp}`, `{window}`. Coordinates use the
/// same 3-decimal formatting as dedup buckets; the window covers prediction
/// steps anchor+1 ..= anchor+H_out in wall-clock time. Unknown or unclosed
/// placeholders are template bugs and error out.
pub fn render_prompt(
    id: TemplateId,
    lat: f64,
    lon: f64,
    anchor: NaiveDateTime,
    h_in: usize,
    h_out: usize,
    interval_minutes: u32,
) -> Result<String> {
    if h_in == 0 || h_out == 0 {
        return Err(Error::invalid("h_in and h_out must be positive"));
    }
    let step = Duration::minutes(interval_minutes as i64);
    let window_start = anchor + step;
    let window_end = anchor + step * h_out as i32;
    let window = format!(
        "{} to {}",
        window_start.format(PROMPT_TIME_FORMAT),
        window_end.format(PROMPT_TIME_FORMAT)
    );
    let template = PromptTemplate::get(id);
    expand_placeholders(
        &template.body,
        &format!("{lat:.3}"),
        &format!("{lon:.3}"),
        &anchor.format(PROMPT_TIME_FORMAT).to_string(),
        &window,
    )
}

fn expand_placeholders(
    body: &str,
    lat: &str,
    lon: &str,
    timestamp: &str,
    window: &str,
) -> Result<String> {
    let mut out = String::with_capacity(body.len() + 64);
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            return Err(Error::invalid("unclosed placeholder in template"));
        };
        match &after[..close] {
            "lat" => out.push_str(lat),
            "lon" => out.push_str(lon),
            "timestamp" => out.push_str(timestamp),
            "window" => out.push_str(window),
            other => {
                return Err(Error::invalid(format!("unknown placeholder `{{{other}}}`")))
            }
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Split on commas that sit outside parentheses, trimming each piece.
fn split_events(s: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut depth: usize = 0;
    let mut current = String::new();
    for c in s.chars() {
        match c {
            '(' => {
                depth += 1;
                current.push(c);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                current.push(c);
            }
            ',' if depth == 0 => {
                pieces.push(current.trim().to_string());
                current.clear();
            }
            _ => current.push(c),
        }
    }
    pieces.push(current.trim().to_string());
    pieces.retain(|p| !p.is_empty());
    pieces
}

/// Parse a provider response into event records for one query.
///
/// The response must be a JSON object. Its "Event" field holds the events
/// as one comma-separated string (commas inside parentheses do not split).
/// A missing or empty field means "nothing happening": one no-impact
/// record. The optional "Impact" field is either one label for all events
/// or an array aligned by index; unknown labels and missing entries
/// default to Minor. Total over inputs: malformed responses produce a
/// recoverable error, never a panic, and the caller substitutes fallbacks.
pub fn parse_response(
    raw: &str,
    node_id: usize,
    window_start: NaiveDateTime,
    window_end: NaiveDateTime,
) -> Result<Vec<EventRecord>> {
    let value: serde_json::Value = serde_json::from_str(raw)
        .map_err(|e| Error::Parse(format!("response is not JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse("response is not a JSON object".into()))?;

    let texts = match obj.get("Event") {
        Option::None | Some(serde_json::Value::Null) => Vec::new(),
        Some(serde_json::Value::String(s)) => split_events(s),
        Some(other) => {
            return Err(Error::Parse(format!(
                "\"Event\" field must be a string, got {other}"
            )))
        }
    };
    if texts.is_empty() {
        return Ok(vec![EventRecord::no_impact(node_id, window_start, window_end)]);
    }

    let impact_of = |idx: usize| -> Result<ImpactClass> {
        match obj.get("Impact") {
            Option::None | Some(serde_json::Value::Null) => Ok(ImpactClass::Minor),
            Some(serde_json::Value::String(s)) => Ok(ImpactClass::parse_lenient(s)),
            Some(serde_json::Value::Array(items)) => match items.get(idx) {
                Some(serde_json::Value::String(s)) => Ok(ImpactClass::parse_lenient(s)),
                Some(other) => {
                    Err(Error::Parse(format!("\"Impact\" entries must be strings, got {other}")))
                }
                Option::None => Ok(ImpactClass::Minor),
            },
            Some(other) => Err(Error::Parse(format!(
                "\"Impact\" field must be a string or array, got {other}"
            ))),
        }
    };

    let mut records = Vec::with_capacity(texts.len());
    for (idx, text) in texts.into_iter().enumerate() {
        let impact = impact_of(idx)?;
        records.push(EventRecord::new(node_id, window_start, window_end, impact, text));
    }
    Ok(records)
}
