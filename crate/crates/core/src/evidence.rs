//! Groups executed probe candidates into the four evidence clusters the
//! proposer reads: exploratory, failed, successful, and final.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FeedbackKind, Probe, SqlCandidate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvidenceError {
    #[error("candidate for probe `{probe_id}` has no execution feedback: {sql}")]
    MissingFeedback { probe_id: String, sql: String },
    #[error("candidate references unknown probe `{0}`")]
    UnknownProbe(String),
}

pub type EvidenceEntry = (Probe, SqlCandidate);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub exploratory: Vec<EvidenceEntry>,
    pub failures: Vec<EvidenceEntry>,
    pub successes: Vec<EvidenceEntry>,
    pub finals: Vec<EvidenceEntry>,
}

impl EvidenceBundle {
    pub fn len(&self) -> usize {
        self.exploratory.len() + self.failures.len() + self.successes.len() + self.finals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clusters in their fixed serialization order.
    pub fn clusters(&self) -> [(&'static str, &[EvidenceEntry]); 4] {
        [
            ("exploratory", &self.exploratory),
            ("failures", &self.failures),
            ("successes", &self.successes),
            ("finals", &self.finals),
        ]
    }
}

/// Partitions `candidates` into an [`EvidenceBundle`].
///
/// Exploration candidates always land in `exploratory`. Among the rest, error
/// kinds go to `failures`; the candidate whose SQL equals the probe's
/// `selection` entry goes to `finals` (first match only), and other successes
/// to `successes`. Input order is preserved inside each cluster.
pub fn cluster_evidence(
    probes: &[Probe],
    candidates: &[SqlCandidate],
    selection: &BTreeMap<String, String>,
) -> Result<EvidenceBundle, EvidenceError> {
    let by_id: HashMap<&str, &Probe> = probes.iter().map(|p| (p.probe_id.as_str(), p)).collect();
    let mut bundle = EvidenceBundle::default();
    let mut finalized: HashSet<&str> = HashSet::new();

    for cand in candidates {
        let Some(feedback) = &cand.feedback else {
            return Err(EvidenceError::MissingFeedback { probe_id: cand.probe_id.clone(), sql: cand.sql.clone() });
        };
        let probe = *by_id
            .get(cand.probe_id.as_str())
            .ok_or_else(|| EvidenceError::UnknownProbe(cand.probe_id.clone()))?;
        let entry = (probe.clone(), cand.clone());

        if cand.exploration {
            bundle.exploratory.push(entry);
            continue;
        }
        match feedback.kind {
            FeedbackKind::CompilationError | FeedbackKind::NullError => bundle.failures.push(entry),
            FeedbackKind::Success => {
                let selected = selection.get(&cand.probe_id).is_some_and(|sql| *sql == cand.sql);
                if selected && finalized.insert(probe.probe_id.as_str()) {
                    bundle.finals.push(entry);
                } else {
                    bundle.successes.push(entry);
                }
            }
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ExecutionFeedback, ExecutionOutcome};
    use proptest::prelude::*;

    fn probe(id: &str) -> Probe {
        Probe::new(id, format!("question for {id}"), "t").unwrap()
    }

    fn cand(probe: &str, sql: &str, exploration: bool, kind: FeedbackKind) -> SqlCandidate {
        let outcome = match kind {
            FeedbackKind::CompilationError => ExecutionOutcome::Failed("syntax error".into()),
            FeedbackKind::NullError => ExecutionOutcome::Completed { row_count: 0, preview: String::new() },
            FeedbackKind::Success => ExecutionOutcome::Completed { row_count: 2, preview: "x\n1\n2".into() },
        };
        let mut c = SqlCandidate::new(sql, "d", exploration, probe).unwrap();
        c.feedback = Some(ExecutionFeedback::from_outcome(outcome, 1));
        c
    }

    #[test]
    fn exploration_success_is_exploratory() {
        let b = cluster_evidence(&[probe("p1")], &[cand("p1", "SELECT 1", true, FeedbackKind::Success)], &BTreeMap::new())
            .unwrap();
        assert_eq!(b.exploratory.len(), 1);
        assert!(b.finals.is_empty());
    }

    #[test]
    fn empty_input_gives_empty_bundle() {
        let b = cluster_evidence(&[], &[], &BTreeMap::new()).unwrap();
        assert_eq!(b, EvidenceBundle::default());
    }

    #[test]
    fn selected_unselected_and_failed_split() {
        let cands = [
            cand("p1", "SELECT a", false, FeedbackKind::Success),
            cand("p1", "SELECT b", false, FeedbackKind::Success),
            cand("p1", "SELECT c", false, FeedbackKind::NullError),
        ];
        let sel = BTreeMap::from([("p1".to_string(), "SELECT a".to_string())]);
        let b = cluster_evidence(&[probe("p1")], &cands, &sel).unwrap();
        assert_eq!((b.finals.len(), b.successes.len(), b.failures.len(), b.exploratory.len()), (1, 1, 1, 0));
        assert_eq!(b.finals[0].1.sql, "SELECT a");
    }

    #[test]
    fn selection_of_exploration_query_never_reaches_finals() {
        let cands = [cand("p1", "SELECT a", true, FeedbackKind::Success)];
        let sel = BTreeMap::from([("p1".to_string(), "SELECT a".to_string())]);
        let b = cluster_evidence(&[probe("p1")], &cands, &sel).unwrap();
        assert!(b.finals.is_empty());
    }

    #[test]
    fn missing_feedback_is_an_error() {
        let c = SqlCandidate::new("SELECT 1", "d", false, "p1").unwrap();
        assert!(matches!(
            cluster_evidence(&[probe("p1")], &[c], &BTreeMap::new()),
            Err(EvidenceError::MissingFeedback { .. })
        ));
    }

    fn kind() -> impl Strategy<Value = FeedbackKind> {
        prop_oneof![Just(FeedbackKind::CompilationError), Just(FeedbackKind::NullError), Just(FeedbackKind::Success)]
    }

    proptest! {
        #[test]
        fn clustering_is_a_partition(
            specs in proptest::collection::vec((0usize..3, 0usize..4, any::<bool>(), kind()), 0..25),
            picks in proptest::collection::vec(0usize..4, 3),
        ) {
            let probes: Vec<Probe> = (0..3).map(|i| probe(&format!("p{i}"))).collect();
            let cands: Vec<SqlCandidate> = specs
                .iter()
                .map(|(p, s, e, k)| cand(&format!("p{p}"), &format!("SELECT {s}"), *e, *k))
                .collect();
            let sel: BTreeMap<String, String> =
                picks.iter().enumerate().map(|(i, s)| (format!("p{i}"), format!("SELECT {s}"))).collect();
            let b = cluster_evidence(&probes, &cands, &sel).unwrap();
            prop_assert_eq!(b.len(), cands.len());
            for (_, c) in &b.finals {
                prop_assert!(c.is_final_eligible());
            }
            for (_, c) in &b.failures {
                prop_assert!(c.kind() != Some(FeedbackKind::Success));
            }
            let mut per_probe = std::collections::HashMap::new();
            for (p, _) in &b.finals {
                *per_probe.entry(p.probe_id.clone()).or_insert(0) += 1;
            }
            prop_assert!(per_probe.values().all(|n| *n == 1));
        }
    }
}
