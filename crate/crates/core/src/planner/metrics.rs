//! Probe-suite quality: self-containment rate (SCR), overlap rate (OR) and
//! suite size.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::agent::{extract_json_object, AgentError};
use crate::config::RunConfig;
use crate::gateway::{CallScope, ChatRequest, Gateway, Message};
use crate::prompts::{PromptSet, TemplateKind};
use crate::types::RoleTag;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub self_containment_rate: f64,
    pub overlap_rate: f64,
    pub num_test_cases: f64,
}

pub trait ProbeJudge {
    fn score(&self, probes: &[String]) -> Result<PlanMetrics, AgentError>;
}

const STOPWORDS: &[&str] = &[
    "a", "all", "an", "and", "any", "are", "as", "at", "be", "by", "each", "every", "find", "for", "from", "get", "give",
    "has", "have", "how", "in", "is", "it", "its", "list", "many", "me", "much", "of", "on", "or", "return", "show",
    "that", "the", "their", "them", "there", "these", "this", "those", "to", "was", "were", "what", "when", "where",
    "which", "who", "whose", "with",
];

/// Lowercased alphanumeric words minus stopwords.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Jaccard similarity; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Marker-and-Jaccard scorer. Deterministic and order-free.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicJudge {
    pub markers: Vec<String>,
    pub threshold: f64,
}

impl HeuristicJudge {
    pub fn from_config(cfg: &RunConfig) -> Self {
        HeuristicJudge { markers: cfg.containment_markers.clone(), threshold: cfg.overlap_threshold }
    }

    pub fn is_self_contained(&self, probe: &str) -> bool {
        let lower = probe.to_lowercase();
        !self.markers.iter().any(|m| lower.contains(&m.to_lowercase()))
    }

    pub fn metrics(&self, probes: &[String]) -> PlanMetrics {
        let n = probes.len();
        if n == 0 {
            return PlanMetrics::default();
        }
        let contained = probes.iter().filter(|p| self.is_self_contained(p)).count();
        let tokens: Vec<BTreeSet<String>> = probes.iter().map(|p| content_tokens(p)).collect();
        let mut pairs = 0usize;
        let mut overlapping = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                pairs += 1;
                if jaccard(&tokens[i], &tokens[j]) > self.threshold {
                    overlapping += 1;
                }
            }
        }
        PlanMetrics {
            self_containment_rate: contained as f64 / n as f64,
            overlap_rate: if pairs == 0 { 0.0 } else { overlapping as f64 / pairs as f64 },
            num_test_cases: n as f64,
        }
    }
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

impl ProbeJudge for HeuristicJudge {
    fn score(&self, probes: &[String]) -> Result<PlanMetrics, AgentError> {
        Ok(self.metrics(probes))
    }
}

/// Default heuristic metrics.
pub fn plan_metrics(probes: &[String]) -> PlanMetrics {
    HeuristicJudge::default().metrics(probes)
}

/// Asks a model to label containment and count overlapping pairs.
pub struct ModelJudge<'a> {
    pub gateway: &'a Gateway,
    pub cfg: &'a RunConfig,
    pub prompts: &'a PromptSet,
}

impl ProbeJudge for ModelJudge<'_> {
    fn score(&self, probes: &[String]) -> Result<PlanMetrics, AgentError> {
        let n = probes.len();
        if n == 0 {
            return Ok(PlanMetrics::default());
        }
        let listing: String = probes.iter().enumerate().map(|(i, p)| format!("{}. {}\n", i + 1, p)).collect();
        let system = self.prompts.render(TemplateKind::Judge, &[("probes", listing.trim_end().to_string())])?;
        let req = ChatRequest::for_role(
            self.cfg,
            RoleTag::Plan,
            CallScope::task("plan-metrics"),
            vec![Message::system(system), Message::user("Score the probes.")],
            vec![],
        );
        let resp = self.gateway.complete(&req)?;
        let bad = |why: &str| AgentError::Gateway(crate::gateway::GatewayError::MalformedResponse(why.to_string()));
        let obj = extract_json_object(resp.text()).ok_or_else(|| bad("judge reply has no JSON object"))?;
        let flags = obj.get("self_contained").and_then(Json::as_array).ok_or_else(|| bad("missing self_contained"))?;
        if flags.len() != n || flags.iter().any(|f| !f.is_boolean()) {
            return Err(bad("self_contained must hold one boolean per probe"));
        }
        let pairs_total = n * (n - 1) / 2;
        let overlapping = obj.get("overlapping_pairs").and_then(Json::as_u64).ok_or_else(|| bad("missing overlapping_pairs"))?;
        let contained = flags.iter().filter(|f| f.as_bool() == Some(true)).count();
        Ok(PlanMetrics {
            self_containment_rate: contained as f64 / n as f64,
            overlap_rate: if pairs_total == 0 { 0.0 } else { (overlapping as f64 / pairs_total as f64).min(1.0) },
            num_test_cases: n as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn previous_marker_halves_scr() {
        let m = plan_metrics(&s(&["Count orders in 2023.", "Sum the totals from the previous probe."]));
        assert_eq!(m.self_containment_rate, 0.5);
        assert_eq!(m.num_test_cases, 2.0);
    }

    #[test]
    fn identical_pair_overlaps() {
        let m = plan_metrics(&s(&["List customers in Lyon.", "List customers in Lyon."]));
        assert_eq!(m.overlap_rate, 1.0);
    }

    #[test]
    fn empty_suite() {
        assert_eq!(plan_metrics(&[]), PlanMetrics::default());
    }

    #[test]
    fn stopword_only_probes_count_as_identical() {
        assert_eq!(jaccard(&content_tokens("what is the"), &content_tokens("of the")), 1.0);
    }

    proptest! {
        #[test]
        fn rates_bounded_and_order_free(mut probes in proptest::collection::vec("[a-z ]{0,30}", 0..8)) {
            let m = plan_metrics(&probes);
            prop_assert!((0.0..=1.0).contains(&m.self_containment_rate));
            prop_assert!((0.0..=1.0).contains(&m.overlap_rate));
            probes.reverse();
            prop_assert_eq!(plan_metrics(&probes), m);
        }
    }
}
