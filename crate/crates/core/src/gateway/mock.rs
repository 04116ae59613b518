use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fingerprint, BackendError, ChatBackend, ChatRequest, RawCompletion};
use crate::corpus::{ConstraintPair, TranslationUnit};
use crate::memo_trap::{self, MemoTrapParams};
use crate::prompting::{parse_constraint_list, Role};

pub use crate::prompting::VERDICT_MARKER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    Replay,
    MemoTrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub mode: MockMode,
    #[serde(default)]
    pub replay_table: HashMap<String, String>,
    #[serde(default)]
    pub memo_trap_params: MemoTrapParams,
}

impl MockScript {
    pub fn replay(table: HashMap<String, String>) -> Self {
        Self {
            mode: MockMode::Replay,
            replay_table: table,
            memo_trap_params: MemoTrapParams::default(),
        }
    }

    pub fn memo_trap(params: MemoTrapParams) -> Self {
        Self {
            mode: MockMode::MemoTrap,
            replay_table: HashMap::new(),
            memo_trap_params: params,
        }
    }
}

#[derive(Deserialize)]
struct ReplayLine {
    fingerprint: String,
    response: String,
}

/// Reads a replay file: JSONL of `{"fingerprint": .., "response": ..}`.
pub fn load_replay_file(path: &Path) -> Result<HashMap<String, String>, BackendError> {
    let text = fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReplayLine = serde_json::from_str(line).map_err(|e| {
            BackendError::Config(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        table.insert(parsed.fingerprint, parsed.response);
    }
    Ok(table)
}

/// Deterministic offline backend. In replay mode it answers from a
/// fingerprint table; in memo-trap mode it reads the live request the way the
/// prompt lays it out and responds through [`crate::memo_trap`].
pub struct MockBackend {
    id: String,
    script: MockScript,
    simulated_latency_ms: f64,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let id = match script.mode {
            MockMode::Replay => "mock:replay".to_string(),
            MockMode::MemoTrap => format!(
                "mock:memo_trap(p={},fix={},seed={})",
                script.memo_trap_params.override_prob_per_constraint,
                script.memo_trap_params.fix_per_revision,
                script.memo_trap_params.seed
            ),
        };
        Self {
            id,
            script,
            simulated_latency_ms: 0.0,
        }
    }

    pub fn with_latency(mut self, ms: f64) -> Self {
        self.simulated_latency_ms = ms;
        self
    }

    fn memo_trap_reply(&self, request: &ChatRequest) -> String {
        let params = &self.script.memo_trap_params;
        let live = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let fields = PromptFields::parse(live);

        if live.contains(VERDICT_MARKER) {
            // Overconfident self-check: every constraint is reported as met.
            return (1..=fields.numbered_items)
                .map(|i| format!("{i}: yes"))
                .collect::<Vec<_>>()
                .join("\n");
        }
        if let Some(current) = fields.current_translation {
            return match fields.uncompleted {
                Some(list) => {
                    let pairs = to_pairs(&list);
                    memo_trap::revised_hypothesis(current, &pairs, params)
                }
                None => current.to_string(),
            };
        }
        let source = fields.sentence.unwrap_or_default();
        let constraints = fields.constraints.map(|c| to_pairs(&c)).unwrap_or_default();
        let unit = TranslationUnit::new("mock", "", "", source).with_constraints(constraints);
        memo_trap::initial_hypothesis(&unit, params)
    }
}

fn to_pairs(list: &[(String, String)]) -> Vec<ConstraintPair> {
    list.iter()
        .filter_map(|(s, t)| ConstraintPair::lexical(s.clone(), [t.clone()]).ok())
        .collect()
}

#[derive(Default)]
struct PromptFields<'a> {
    sentence: Option<&'a str>,
    constraints: Option<Vec<(String, String)>>,
    current_translation: Option<&'a str>,
    uncompleted: Option<Vec<(String, String)>>,
    numbered_items: usize,
}

impl<'a> PromptFields<'a> {
    fn parse(text: &'a str) -> Self {
        let mut f = PromptFields::default();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("Sentence: ") {
                f.sentence.get_or_insert(rest);
            } else if line.starts_with("Original ") && line.contains(" sentence: ") {
                if let Some((_, rest)) = line.split_once(" sentence: ") {
                    f.sentence.get_or_insert(rest);
                }
            } else if let Some(rest) = line.strip_prefix("Constraints: ") {
                f.constraints.get_or_insert_with(|| parse_constraint_list(rest));
            } else if let Some(rest) = line.strip_prefix("Current translation: ") {
                f.current_translation.get_or_insert(rest);
            } else if let Some(rest) = line.strip_prefix("Uncompleted constraints: ") {
                f.uncompleted.get_or_insert_with(|| parse_constraint_list(rest));
            } else if line
                .split_once(". ")
                .is_some_and(|(n, _)| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()))
            {
                f.numbered_items += 1;
            }
        }
        f
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<RawCompletion, BackendError> {
        let text = match self.script.mode {
            MockMode::Replay => {
                let fp = fingerprint(request);
                self.script.replay_table.get(&fp).cloned().ok_or_else(|| {
                    BackendError::Config(format!(
                        "replay table has no response for `{}` (fingerprint {fp})",
                        request.request_tag
                    ))
                })?
            }
            MockMode::MemoTrap => self.memo_trap_reply(request),
        };
        Ok(RawCompletion {
            text,
            usage: None,
            latency_ms: Some(self.simulated_latency_ms),
        })
    }
}
