use std::collections::BTreeMap;
use std::sync::Arc;

use super::{initial_finetune, otta_step, AdaptState, PredictionRecord, StepContext};
use crate::error::{OttaError, Result};
use crate::signal::{StreamEvent, SubjectStream};

/// A per-subject adaptation policy.
///
/// `prepare` runs once before the stream starts; `observe` runs once per
/// event and returns a prediction for events that are scored.
pub trait AdaptStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn prepare(
        &self,
        state: &mut AdaptState,
        stream: &SubjectStream,
        ctx: &StepContext<'_>,
    ) -> Result<()>;

    fn observe(
        &self,
        state: &mut AdaptState,
        event: &StreamEvent,
        ctx: &StepContext<'_>,
    ) -> Result<Option<PredictionRecord>>;
}

/// No buffer and no updates: the pretrained model scores every unlabeled
/// event. Initial labels are ignored.
#[derive(Debug, Default)]
pub struct Frozen;

impl AdaptStrategy for Frozen {
    fn name(&self) -> &'static str {
        "frozen"
    }

    fn prepare(&self, _: &mut AdaptState, _: &SubjectStream, _: &StepContext<'_>) -> Result<()> {
        Ok(())
    }

    fn observe(
        &self,
        state: &mut AdaptState,
        event: &StreamEvent,
        ctx: &StepContext<'_>,
    ) -> Result<Option<PredictionRecord>> {
        state.events_seen += 1;
        if event.is_labeled() {
            return Ok(None);
        }
        let tokens = ctx.tokens(&event.segment, &state.params)?;
        ctx.record(&state.params, &tokens, event).map(Some)
    }
}

/// Initial fine-tuning followed by `K` buffer updates per event.
#[derive(Debug, Default)]
pub struct DualQueue;

impl AdaptStrategy for DualQueue {
    fn name(&self) -> &'static str {
        "dual-queue"
    }

    fn prepare(
        &self,
        state: &mut AdaptState,
        stream: &SubjectStream,
        ctx: &StepContext<'_>,
    ) -> Result<()> {
        initial_finetune(&mut state.params, &stream.init_labeled, ctx, &mut state.rng).map(|_| ())
    }

    fn observe(
        &self,
        state: &mut AdaptState,
        event: &StreamEvent,
        ctx: &StepContext<'_>,
    ) -> Result<Option<PredictionRecord>> {
        otta_step(state, event, ctx)
    }
}

/// Strategies by name.
#[derive(Clone)]
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Arc<dyn AdaptStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, strategy: Arc<dyn AdaptStrategy>) -> Result<()> {
        let name = strategy.name();
        if self.entries.contains_key(name) {
            return Err(OttaError::Config(format!(
                "strategy `{name}` is already registered"
            )));
        }
        self.entries.insert(name, strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AdaptStrategy>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            OttaError::UnknownStrategy(format!(
                "`{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        for s in [
            Arc::new(Frozen) as Arc<dyn AdaptStrategy>,
            Arc::new(DualQueue),
        ] {
            reg.register(s).expect("builtin names are distinct");
        }
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered() {
        let reg = StrategyRegistry::default();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec!["dual-queue", "frozen"]
        );
        assert_eq!(reg.get("frozen").unwrap().name(), "frozen");
    }

    #[test]
    fn unknown_and_duplicate_names() {
        let mut reg = StrategyRegistry::default();
        let err = reg.get("tent").err().unwrap();
        assert!(matches!(err, OttaError::UnknownStrategy(_)));
        assert!(err.to_string().contains("dual-queue"));
        assert!(reg.register(Arc::new(Frozen)).is_err());
    }
}
