use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CallStage, ChatResponse, RequestTag};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupTotals {
    pub calls: u64,
    pub cached_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub latency_ms: f64,
}

impl GroupTotals {
    fn add(&mut self, r: &ChatResponse) {
        self.calls += 1;
        self.latency_ms += r.latency_ms;
        if r.cached {
            // A cache hit costs nothing at the margin.
            self.cached_calls += 1;
            return;
        }
        self.prompt_tokens += r.usage.prompt_tokens;
        self.completion_tokens += r.usage.completion_tokens;
        self.cost += r.usage.cost;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UsageSummary {
    /// Keyed by `(stage, iteration)`; responses with unparseable tags land
    /// under `untagged`.
    pub groups: BTreeMap<(CallStage, usize), GroupTotals>,
    pub untagged: GroupTotals,
    pub total: GroupTotals,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub stage: CallStage,
    pub iteration: usize,
    #[serde(flatten)]
    pub totals: GroupTotals,
}

impl UsageSummary {
    /// Groups in `(stage, iteration)` order, in a serializable shape.
    pub fn rows(&self) -> Vec<GroupRow> {
        self.groups
            .iter()
            .map(|(&(stage, iteration), &totals)| GroupRow {
                stage,
                iteration,
                totals,
            })
            .collect()
    }
}

pub fn meter(responses: &[ChatResponse]) -> UsageSummary {
    let mut summary = UsageSummary::default();
    for r in responses {
        match RequestTag::parse(&r.request_tag) {
            Some(tag) => summary
                .groups
                .entry((tag.stage, tag.iteration))
                .or_default()
                .add(r),
            None => summary.untagged.add(r),
        }
        summary.total.add(r);
    }
    summary
}
