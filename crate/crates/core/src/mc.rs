//! Multiple-choice autograding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{McPolicy, Question, QuestionFormat};
use crate::exact::Points;
use crate::ids::QuestionId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McResponse {
    pub question_id: QuestionId,
    pub chosen: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum McError {
    #[error("question {0} is not multiple choice")]
    NotMultipleChoice(QuestionId),
    #[error("question {0} has no usable answer key or points")]
    Incomplete(QuestionId),
}

/// Full points iff exactly the key was chosen. Blank or multiple marks score 0.
pub fn grade_ssmc(key: &str, response: &McResponse, points: Points) -> Points {
    if response.chosen.len() == 1 && response.chosen.contains(key) {
        points
    } else {
        Points::ZERO
    }
}

/// `options` is the full option list; it is only consulted by `PerOption`.
pub fn grade_msmc(
    key: &BTreeSet<String>,
    options: &[String],
    response: &McResponse,
    points: Points,
    policy: McPolicy,
) -> Points {
    match policy {
        McPolicy::ExactMatch => {
            if &response.chosen == key {
                points
            } else {
                Points::ZERO
            }
        }
        McPolicy::PerOption => {
            let universe: BTreeSet<&String> = options.iter().chain(key.iter()).chain(response.chosen.iter()).collect();
            if universe.is_empty() {
                return Points::ZERO;
            }
            let correct = universe.iter().filter(|opt| key.contains(**opt) == response.chosen.contains(**opt)).count();
            let fraction = Points::new(correct as i64, universe.len() as i64);
            let score = points * fraction;
            if score.is_negative() {
                Points::ZERO
            } else {
                score
            }
        }
    }
}

/// Grade any multiple-choice question using its own key, points and policy.
pub fn grade_question(question: &Question, chosen: &BTreeSet<String>) -> Result<Points, McError> {
    let key = question.answer_key.as_ref().ok_or_else(|| McError::Incomplete(question.id.clone()))?;
    let points = question.points.ok_or_else(|| McError::Incomplete(question.id.clone()))?;
    let response = McResponse { question_id: question.id.clone(), chosen: chosen.clone() };
    match question.format {
        QuestionFormat::Ssmc => {
            let label = key.iter().next().ok_or_else(|| McError::Incomplete(question.id.clone()))?;
            Ok(grade_ssmc(label, &response, points))
        }
        QuestionFormat::Msmc => {
            if key.is_empty() {
                return Err(McError::Incomplete(question.id.clone()));
            }
            Ok(grade_msmc(key, &question.options, &response, points, question.mc_policy))
        }
        _ => Err(McError::NotMultipleChoice(question.id.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn resp(labels: &[&str]) -> McResponse {
        McResponse { question_id: "q".into(), chosen: set(labels) }
    }

    fn opts(labels: &[&str]) -> Vec<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ssmc_cases() {
        let two = Points::from_int(2);
        assert_eq!(grade_ssmc("B", &resp(&["B"]), two), two);
        assert_eq!(grade_ssmc("B", &resp(&["C"]), two), Points::ZERO);
        assert_eq!(grade_ssmc("B", &resp(&[]), two), Points::ZERO);
        assert_eq!(grade_ssmc("B", &resp(&["B", "C"]), two), Points::ZERO);
    }

    #[test]
    fn msmc_exact_match() {
        let four = Points::from_int(4);
        let key = set(&["A", "C"]);
        let all = opts(&["A", "B", "C", "D"]);
        assert_eq!(grade_msmc(&key, &all, &resp(&["A", "C"]), four, McPolicy::ExactMatch), four);
        assert_eq!(grade_msmc(&key, &all, &resp(&["A"]), four, McPolicy::ExactMatch), Points::ZERO);
    }

    #[test]
    fn msmc_per_option_partial_credit() {
        // Options A..D, key {A, C}, chosen {A}: A, B, D marked correctly, C not.
        let key = set(&["A", "C"]);
        let all = opts(&["A", "B", "C", "D"]);
        let score = grade_msmc(&key, &all, &resp(&["A"]), Points::from_int(4), McPolicy::PerOption);
        assert_eq!(score, Points::from_int(3));
    }

    #[test]
    fn per_option_thirds_stay_exact() {
        let key = set(&["A"]);
        let all = opts(&["A", "B", "C"]);
        let score = grade_msmc(&key, &all, &resp(&["B"]), Points::from_int(1), McPolicy::PerOption);
        assert_eq!(score, Points::new(1, 3));
    }

    fn subset(options: &[String], mask: u32) -> BTreeSet<String> {
        options.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, o)| o.clone()).collect()
    }

    proptest! {
        #[test]
        fn grading_ignores_option_order(n in 1usize..6, key_mask in 1u32..32, chosen_mask in 0u32..32, seed in any::<u64>()) {
            let options: Vec<String> = (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
            let key_mask = key_mask & ((1 << n) - 1);
            prop_assume!(key_mask != 0);
            let key = subset(&options, key_mask);
            let chosen = subset(&options, chosen_mask & ((1 << n) - 1));
            let mut shuffled = options.clone();
            shuffled.rotate_left((seed % n as u64) as usize);
            let r = McResponse { question_id: "q".into(), chosen };
            for policy in [McPolicy::ExactMatch, McPolicy::PerOption] {
                prop_assert_eq!(
                    grade_msmc(&key, &options, &r, Points::from_int(5), policy),
                    grade_msmc(&key, &shuffled, &r, Points::from_int(5), policy)
                );
            }
        }
    }
}
