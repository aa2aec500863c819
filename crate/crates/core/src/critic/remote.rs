use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Critic, CriticSource, Verdict};
use crate::diffusion::truncate_words;
use crate::diffusion::MAX_SUGGESTION_WORDS;
use crate::gridworld::Task;
use crate::video::{Frame, VideoPlan, FRAME_PIXELS, FRAME_SIDE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const BINARY_PROMPT: &str = include_str!("../../assets/prompts/binary.txt");
const SUGGESTIVE_PROMPT: &str = include_str!("../../assets/prompts/suggestive.txt");
const WEIGHTED_CLAUSE: &str = include_str!("../../assets/prompts/weighted.txt");
const EXAMPLES: &str = include_str!("../../assets/prompts/examples.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum CriticMode {
    #[default]
    Binary,
    Suggestive,
}

impl CriticMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CriticMode::Binary => "binary",
            CriticMode::Suggestive => "suggestive",
        }
    }
}

impl fmt::Display for CriticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriticMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(CriticMode::Binary),
            "suggestive" => Ok(CriticMode::Suggestive),
            other => Err(format!("unknown critic mode {other:?} (expected binary or suggestive)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct CriticConfig {
    pub mode: CriticMode,
    /// Adds the clause that penalizes false acceptances.
    pub weighted: bool,
    /// Appends worked examples; only used in suggestive mode.
    pub include_examples: bool,
}

/// Prompt text sent alongside the frames. The weighted flag only appends a
/// clause; nothing else about the request changes.
pub fn build_prompt(task: Task, cfg: &CriticConfig) -> String {
    let template = match cfg.mode {
        CriticMode::Binary => BINARY_PROMPT,
        CriticMode::Suggestive => SUGGESTIVE_PROMPT,
    };
    let mut prompt = template.replace("{task}", &task.text());
    if cfg.weighted {
        prompt.push('\n');
        prompt.push_str(WEIGHTED_CLAUSE);
    }
    if cfg.include_examples && cfg.mode == CriticMode::Suggestive {
        prompt.push('\n');
        prompt.push_str(EXAMPLES);
    }
    prompt
}

/// Body of `POST /evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub task: String,
    pub mode: String,
    pub weighted: bool,
    /// Base64 PNGs: the conditioning frame, then the remaining frames.
    pub frames: Vec<String>,
    #[serde(default)]
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    #[serde(default)]
    pub verdict: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

/// 16×16 8-bit grayscale PNG.
pub fn encode_png_frame(frame: &Frame) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, FRAME_SIDE as u32, FRAME_SIDE as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&frame.to_u8()).expect("in-memory PNG data");
    }
    buf
}

pub fn decode_png_frame(bytes: &[u8]) -> Result<Frame, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| format!("bad PNG: {e}"))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "PNG too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format!("bad PNG: {e}"))?;
    if info.width as usize != FRAME_SIDE || info.height as usize != FRAME_SIDE {
        return Err(format!("expected 16x16 image, got {}x{}", info.width, info.height));
    }
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err("expected 8-bit grayscale PNG".into());
    }
    Ok(Frame::from_u8(&buf[..FRAME_PIXELS]))
}

impl EvaluateRequest {
    pub fn new(plan: &VideoPlan, task: Task, cfg: &CriticConfig) -> Self {
        Self {
            task: task.text(),
            mode: cfg.mode.as_str().to_string(),
            weighted: cfg.weighted,
            frames: plan
                .to_frames()
                .iter()
                .map(|f| BASE64.encode(encode_png_frame(f)))
                .collect(),
            prompt: build_prompt(task, cfg),
        }
    }
}

/// Client for an external judge speaking the `/evaluate` protocol.
#[derive(Clone, Debug)]
pub struct RemoteCritic {
    url: String,
    pub config: CriticConfig,
    agent: ureq::Agent,
}

impl RemoteCritic {
    /// `endpoint` is a base URL such as `http://127.0.0.1:8080`; `/evaluate`
    /// is appended unless already present.
    pub fn new(endpoint: &str, config: CriticConfig, timeout: Duration) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/evaluate") {
            base.to_string()
        } else {
            format!("{base}/evaluate")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url, config, agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn query(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, String> {
        let mut resp = self.agent.post(&self.url).send_json(req).map_err(|e| e.to_string())?;
        let status = resp.status();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if status != 200 {
            return Err(format!("HTTP {status}: {}", body.trim()));
        }
        serde_json::from_str(&body).map_err(|e| format!("bad reply body {body:?}: {e}"))
    }
}

/// `Some(true)` for Accept, `Some(false)` for Reject, ignoring case and
/// trailing punctuation.
fn parse_verdict(text: &str) -> Option<bool> {
    let word = text.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
    match word.as_str() {
        "accept" => Some(true),
        "reject" => Some(false),
        _ => None,
    }
}

impl Critic for RemoteCritic {
    fn evaluate(&self, plan: &VideoPlan, task: Task) -> Verdict {
        let req = EvaluateRequest::new(plan, task, &self.config);
        let resp = match self.query(&req) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("remote critic at {} failed: {e}", self.url);
                return Verdict::transport_failure(CriticSource::Remote);
            }
        };
        let accept = match resp.verdict.as_deref().map(parse_verdict) {
            Some(Some(a)) => a,
            _ => {
                log::warn!("unparseable critic reply {resp:?}, treating as reject");
                false
            }
        };
        let mut verdict = Verdict::new(accept, CriticSource::Remote);
        if let Some(s) = resp.suggestion.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
            verdict.suggestion = Some(truncate_words(s, MAX_SUGGESTION_WORDS));
        }
        verdict
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::TASKS;

    #[test]
    fn weighted_flag_only_appends_clause() {
        let plain = CriticConfig::default();
        let weighted = CriticConfig {
            weighted: true,
            ..plain
        };
        let a = build_prompt(TASKS[0], &plain);
        let b = build_prompt(TASKS[0], &weighted);
        assert!(b.starts_with(&a));
        assert_eq!(&b[a.len()..], format!("\n{WEIGHTED_CLAUSE}"));
        assert!(a.contains("push the red block to the blue goal"));
    }

    #[test]
    fn png_round_trip() {
        let mut f = Frame::blank();
        f.set(2, 3, 1.0);
        f.set(9, 9, 0.66);
        let back = decode_png_frame(&encode_png_frame(&f)).unwrap();
        assert_eq!(back.to_u8(), f.to_u8());
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict(" Accept.\n"), Some(true));
        assert_eq!(parse_verdict("REJECT"), Some(false));
        assert_eq!(parse_verdict("maybe"), None);
    }
}
