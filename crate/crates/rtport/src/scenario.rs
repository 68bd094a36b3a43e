//! Scenario files (TOML).
//!
//! ```toml
//! log = "io.log"
//!
//! [[channel]]
//! name = "plc"
//! id = 1
//! transport = "tcp"          # tcp | serial | file
//! address = "127.0.0.1:5020" # device path, or "in,out" for file pairs
//! framing = "flagged"        # raw | flagged
//!
//! [[stimulus]]
//! channel = "adc"
//! period_ms = 500
//! payload = "0x0123"         # `{seq}` expands to the emission number
//!
//! [[rule]]
//! channel = "plc"
//! prefix = "GETP"            # or token = "...", or prefix_hex = "4745"
//! reply = "P=42"
//! delay_ms = 0
//! ```
//! Relative paths resolve against the scenario file's directory.

use std::path::Path;

use serde::Deserialize;

use rtport_core::ioproto::{Channel, Framing, Match, Rule, Scenario, Stimulus, Transport};

use crate::error::{usage, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    log: Option<String>,
    #[serde(default, rename = "channel")]
    channels: Vec<ChannelDto>,
    #[serde(default, rename = "stimulus")]
    stimuli: Vec<StimulusDto>,
    #[serde(default, rename = "rule")]
    rules: Vec<RuleDto>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelDto {
    name: String,
    id: u8,
    transport: String,
    address: String,
    #[serde(default = "default_framing")]
    framing: String,
}

fn default_framing() -> String {
    "raw".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StimulusDto {
    channel: String,
    period_ms: u64,
    payload: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDto {
    channel: String,
    prefix: Option<String>,
    prefix_hex: Option<String>,
    token: Option<String>,
    reply: String,
    #[serde(default)]
    delay_ms: u64,
}

fn hex_bytes(s: &str) -> Option<Vec<u8>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

/// Parses and validates; `base` anchors relative paths.
pub fn parse_scenario(text: &str, base: Option<&Path>) -> CliResult<Scenario> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| usage(format!("scenario: {e}")))?;
    let rel = |p: &str| match base {
        Some(b) if Path::new(p).is_relative() => b.join(p).to_string_lossy().into_owned(),
        _ => p.to_string(),
    };
    let mut sc = Scenario { log_path: f.log.as_deref().map(rel), ..Default::default() };
    for c in f.channels {
        let transport = match c.transport.as_str() {
            "tcp" => Transport::TcpListen,
            "serial" => Transport::SerialDevice,
            "file" => Transport::FileExchange,
            t => return Err(usage(format!("scenario: channel `{}` has unknown transport `{t}`", c.name))),
        };
        let framing = match c.framing.as_str() {
            "raw" => Framing::Raw,
            "flagged" => Framing::Flagged,
            t => return Err(usage(format!("scenario: channel `{}` has unknown framing `{t}`", c.name))),
        };
        let address = match transport {
            Transport::TcpListen => c.address,
            Transport::SerialDevice => rel(&c.address),
            Transport::FileExchange => {
                let Some((i, o)) = c.address.split_once(',') else {
                    return Err(usage(format!("scenario: file channel `{}` needs `in,out` paths", c.name)));
                };
                format!("{},{}", rel(i.trim()), rel(o.trim()))
            }
        };
        sc.channels.push(Channel { name: c.name, id: c.id, transport, address, framing });
    }
    for s in f.stimuli {
        sc.stimuli.push(Stimulus { channel: s.channel, period_ms: s.period_ms, payload: s.payload.into_bytes() });
    }
    for r in f.rules {
        let pattern = match (r.prefix, r.prefix_hex, r.token) {
            (Some(p), None, None) => Match::Prefix(p.into_bytes()),
            (None, Some(h), None) => {
                Match::Prefix(hex_bytes(&h).ok_or_else(|| usage(format!("scenario: bad prefix_hex `{h}`")))?)
            }
            (None, None, Some(t)) => Match::Token(t),
            _ => return Err(usage("scenario: each rule needs exactly one of prefix, prefix_hex, token")),
        };
        sc.rules.push(Rule { channel: r.channel, pattern, reply: r.reply.into_bytes(), delay_ms: r.delay_ms });
    }
    sc.validate().map_err(|e| usage(format!("scenario: {e}")))?;
    Ok(sc)
}
