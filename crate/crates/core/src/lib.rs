//! Skill-augmented agent runtime.
//!
//! An agent keeps a pool of natural-language skills. During an episode it
//! selects a skill, acts under it until a judge hands control back, then
//! selects again. Between batches the pool evolves without touching model
//! weights: a doctor turns trajectories into textual update directions, an
//! evolver writes candidate children, a clipped-surrogate gate admits at most
//! one child per skill, and score-based pruning keeps the pool bounded.

pub mod backend;
pub mod env;
pub mod fixtures;
pub mod gate;
pub mod gradient;
pub mod maintenance;
pub mod metrics;
pub mod runtime;
pub mod similarity;
pub mod skill;
pub mod testkit;

pub use backend::{
    ActionPolicy, ActionSample, ActionScore, BackendError, Backends, Embedder, GradientAggregator, Guidance,
    PromptTemplates, SkillDoctor, SkillEvolver, Status, TerminationJudge, TrajectorySummarizer,
};
pub use env::{EnvFactory, EnvSpec, EnvState, Environment, SpecFactory, StepOutcome};
pub use gate::{GateParams, GateReport};
pub use gradient::{AggregatedGradient, SemanticGradient};
pub use maintenance::{Ablation, AuditRecord, EvolveContext, EvolveParams, RewardMode};
pub use runtime::{Step, Trajectory};
pub use similarity::{JaccardSimilarity, Similarity};
pub use skill::{Skill, SkillDraft, SkillId, SkillPool, Tokenizer, WhitespaceTokenizer};
