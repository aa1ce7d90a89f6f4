//! Metrics and evaluation protocols.

mod metrics;
mod protocol;
mod provider;

pub use metrics::{finetune_trigger, metrics, ConfusionCounts, MetricSet, TRIGGER_THRESHOLD};
pub use protocol::{
    collect_pretrain_corpus, finetune_positives, run_protocol, user_training_positives,
    Aggregation, ModelStack, ProtocolKind, ProtocolSpec, Report, ReportCell, UserMetrics,
};
pub use provider::{static_from_profile, DiskEchoProvider, InstanceProvider, MemBankProvider};
