//! Constrained machine translation with an LLM: translate, detect unmet
//! constraints, revise, and measure.

pub mod corpus;
pub mod detector;
pub mod gateway;
pub mod lang;
pub mod memo_trap;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod reporting;
pub mod seeding;
