//! Cached, retrying annotation calls.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::cache::{cache_key, AnnotationCache};
use super::parse::{parse_disambiguation_response, parse_mask_response, ParseError};
use super::prompts::{build_disambiguation_prompt, build_mask_prompt, Prompt};
use super::provider::{ChatProvider, ChatRequest};
use super::LlmError;
use crate::preferences::parse_instruction;
use crate::types::{Ambiguity, Instruction, StateMask, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub mask_model: String,
    pub disambiguation_model: String,
    pub temperature: f64,
    pub attempts: u32,
    /// First retry delay; doubled on each further attempt.
    pub backoff_ms: u64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            mask_model: "gpt-4o".into(),
            disambiguation_model: "gpt-5".into(),
            temperature: 0.0,
            attempts: 3,
            backoff_ms: 500,
        }
    }
}

/// Sends prompts through a provider, consulting the cache first.
pub struct Annotator<'a> {
    pub provider: &'a dyn ChatProvider,
    pub cache: &'a AnnotationCache,
    pub config: AnnotatorConfig,
}

impl<'a> Annotator<'a> {
    pub fn new(provider: &'a dyn ChatProvider, cache: &'a AnnotationCache, config: AnnotatorConfig) -> Self {
        Annotator {
            provider,
            cache,
            config,
        }
    }

    fn query<T>(
        &self,
        prompt: Prompt,
        model: &str,
        round: u32,
        parse: impl Fn(&str) -> Result<T, ParseError>,
        encode: impl Fn(&T) -> Value,
        decode: impl Fn(&Value) -> Option<T>,
    ) -> Result<T, LlmError> {
        let request = ChatRequest {
            family: prompt.family,
            system: prompt.system,
            user: prompt.user,
            model: model.to_string(),
            temperature: self.config.temperature,
            round,
        };
        if let Some(hit) = self.cache.get(&cache_key(&request)) {
            if let Some(v) = decode(&hit.parsed) {
                return Ok(v);
            }
            log::warn!("ignoring undecodable cache entry {}", hit.key);
        }
        let attempts = self.config.attempts.max(1);
        let mut last_parse = None;
        let mut last_provider = None;
        for attempt in 0..attempts {
            if attempt > 0 && self.provider.is_remote() {
                thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.provider.complete(&request) {
                Ok(raw) => match parse(&raw) {
                    Ok(v) => {
                        self.cache.insert(&request, &raw, encode(&v))?;
                        return Ok(v);
                    }
                    Err(e) => last_parse = Some(e),
                },
                Err(e) => {
                    log::warn!("{} attempt {} failed: {e}", request.family.name(), attempt + 1);
                    last_provider = Some(e);
                }
            }
        }
        match (last_parse, last_provider) {
            (Some(error), _) => Err(LlmError::Parse {
                family: request.family,
                attempts,
                error,
            }),
            (None, Some(error)) => Err(LlmError::Provider {
                family: request.family,
                attempts,
                error,
            }),
            (None, None) => unreachable!("at least one attempt runs"),
        }
    }

    /// Relevance mask for `instruction`. Cached masks keep the provenance
    /// of the provider that first produced them.
    pub fn predict_mask(&self, instruction: &str) -> Result<StateMask, LlmError> {
        let provenance = self.provider.provenance();
        self.query(
            build_mask_prompt(instruction)?,
            &self.config.mask_model,
            0,
            |raw| parse_mask_response(raw).map(|m| StateMask::new(*m.bits(), provenance).expect("binary")),
            |m: &StateMask| serde_json::to_value(m).expect("mask serialises"),
            |v| serde_json::from_value(v.clone()).ok(),
        )
    }

    /// Clarified readings of an ambiguous instruction, contrasting `demo`
    /// with the shortest path `reference`.
    pub fn disambiguate(
        &self,
        instruction: &str,
        demo: &Trajectory,
        reference: &Trajectory,
        round: u32,
    ) -> Result<Vec<Instruction>, LlmError> {
        self.query(
            build_disambiguation_prompt(instruction, demo, reference)?,
            &self.config.disambiguation_model,
            round,
            parse_disambiguation_response,
            |list: &Vec<Instruction>| Value::from(list.iter().map(|i| i.text.clone()).collect::<Vec<_>>()),
            |v| {
                let texts: Vec<String> = serde_json::from_value(v.clone()).ok()?;
                texts
                    .into_iter()
                    .map(|t| {
                        let c = parse_instruction(&t);
                        Instruction::new(t, Ambiguity::Disambiguated, Some(c)).ok()
                    })
                    .collect()
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::MockAnnotator;
    use crate::llm::provider::ProviderError;
    use crate::preferences::oracle_mask;
    use crate::types::{FeatureId, MaskProvenance, PreferenceWeights, Sign};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<P> {
        inner: P,
        calls: AtomicUsize,
    }

    impl<P: ChatProvider> ChatProvider for Counting<P> {
        fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(request)
        }
        fn is_remote(&self) -> bool {
            false
        }
    }

    struct Fixed(&'static str);

    impl ChatProvider for Fixed {
        fn complete(&self, _: &ChatRequest) -> Result<String, ProviderError> {
            Ok(self.0.to_string())
        }
        fn is_remote(&self) -> bool {
            false
        }
    }

    #[test]
    fn exact_mock_mask_equals_oracle() {
        let cache = AnnotationCache::in_memory();
        let mock = MockAnnotator::exact();
        let a = Annotator::new(&mock, &cache, AnnotatorConfig::default());
        let mask = a.predict_mask("Stay away from the laptop").unwrap();
        let oracle = oracle_mask(&PreferenceWeights::single(FeatureId::Laptop, Sign::Negative));
        assert_eq!(mask.bits(), oracle.bits());
        assert_eq!(mask.provenance, MaskProvenance::Mock);
    }

    #[test]
    fn repeated_call_hits_cache() {
        let cache = AnnotationCache::in_memory();
        let p = Counting {
            inner: MockAnnotator::exact(),
            calls: AtomicUsize::new(0),
        };
        let a = Annotator::new(&p, &cache, AnnotatorConfig::default());
        let first = a.predict_mask("Keep the mug upright").unwrap();
        let second = a.predict_mask("Keep the mug upright").unwrap();
        assert_eq!(first.bits(), second.bits());
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn noisy_mock_is_deterministic() {
        let run = || {
            let cache = AnnotationCache::in_memory();
            let mock = MockAnnotator::new(0.1, 0.0, 7);
            Annotator::new(&mock, &cache, AnnotatorConfig::default())
                .predict_mask("Stay close to the table")
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parse_failures_are_retried_then_surfaced() {
        let cache = AnnotationCache::in_memory();
        let p = Counting {
            inner: Fixed("I cannot help with that."),
            calls: AtomicUsize::new(0),
        };
        let a = Annotator::new(&p, &cache, AnnotatorConfig::default());
        let err = a.predict_mask("Stay close to the table").unwrap_err();
        assert!(matches!(err, LlmError::Parse { attempts: 3, .. }), "{err:?}");
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
        assert!(cache.is_empty());
    }
}
