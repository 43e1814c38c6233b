//! Greedy rewriting: take the first strictly cost-decreasing rule
//! application, repeat until no rule helps.

use crate::dfg::{cost, Dfg, OpSet};
use crate::rules::{apply_match, find_matches, RewriteRule};

/// Rewrite `d` to a local cost minimum.  Each accepted application strictly
/// decreases cost; equal-cost moves are rejected, so the search always
/// terminates but can get stuck when the only path to a supported form
/// passes through an equal-cost intermediate.
pub fn greedy_rewrite(d: &Dfg, rules: &[RewriteRule], ops: &OpSet) -> (Dfg, Vec<String>) {
    let mut current = d.clone();
    let mut current_cost = cost(&current, ops);
    let mut trace = Vec::new();
    loop {
        let mut improved = false;
        'rules: for rule in rules {
            for m in find_matches(&current, rule) {
                let Ok(candidate) = apply_match(&current, &m, rule) else {
                    continue;
                };
                let candidate_cost = cost(&candidate, ops);
                if candidate_cost < current_cost {
                    current = candidate;
                    current_cost = candidate_cost;
                    trace.push(rule.name.clone());
                    improved = true;
                    break 'rules;
                }
            }
        }
        if !improved {
            return (current, trace);
        }
    }
}
