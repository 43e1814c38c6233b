//! Hybrid rewriting: greedy first; equality saturation as fallback when
//! greedy gets stuck on an unsupported operation.

use crate::dfg::{cost, Dfg, OpSet, UNSUPPORTED_PENALTY};
use crate::egraph::{eqsat_rewrite, ExtractError, SaturationLimits, SaturationReport};
use crate::greedy::greedy_rewrite;
use crate::rules::RewriteRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyUsed {
    Greedy,
    Eqsat,
}

impl StrategyUsed {
    pub fn name(self) -> &'static str {
        match self {
            StrategyUsed::Greedy => "greedy",
            StrategyUsed::Eqsat => "eqsat",
        }
    }
}

/// What the winning strategy did: the greedy trace, or the saturation
/// report of the fallback.
#[derive(Debug, Clone)]
pub enum HybridReport {
    GreedyTrace(Vec<String>),
    Saturation(SaturationReport),
}

/// Run greedy; if its result still contains unsupported operations, discard
/// it and run equality saturation from the original graph.  Greedy local
/// minima are not used to seed exploration.
pub fn hybrid_rewrite(
    d: &Dfg,
    rules: &[RewriteRule],
    ops: &OpSet,
    lim: &SaturationLimits,
) -> Result<(Dfg, StrategyUsed, HybridReport), ExtractError> {
    let (greedy_out, trace) = greedy_rewrite(d, rules, ops);
    if cost(&greedy_out, ops) < UNSUPPORTED_PENALTY {
        return Ok((greedy_out, StrategyUsed::Greedy, HybridReport::GreedyTrace(trace)));
    }
    let (out, report, _) = eqsat_rewrite(d, rules, ops, lim)?;
    Ok((out, StrategyUsed::Eqsat, HybridReport::Saturation(report)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfg::{parse_dfg, OpKind};
    use crate::rules::{builtin_ruleset, RulesetKind};

    fn ops(list: &[OpKind]) -> OpSet {
        OpSet::from_ops(list)
    }

    #[test]
    fn greedy_suffices_for_mul_neg_one() {
        let d = parse_dfg("n0 input a\nn1 const -1\nn2 mul n0 n1\nout n2").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Neg, OpKind::Add]);
        let (out, used, _) =
            hybrid_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert_eq!(used, StrategyUsed::Greedy);
        assert!(cost(&out, &target) < UNSUPPORTED_PENALTY);
    }

    #[test]
    fn cost_trap_falls_back_to_eqsat() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add, OpKind::Xor, OpKind::Const]);
        let (out, used, _) =
            hybrid_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert_eq!(used, StrategyUsed::Eqsat);
        assert!(cost(&out, &target) < UNSUPPORTED_PENALTY);
    }

    #[test]
    fn unremovable_div_reports_failure_cost() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 div n0 n1\nout n2").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add, OpKind::Xor, OpKind::Const]);
        let (out, used, _) =
            hybrid_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert_eq!(used, StrategyUsed::Eqsat);
        assert!(cost(&out, &target) >= UNSUPPORTED_PENALTY);
    }

    #[test]
    fn hybrid_no_worse_than_greedy() {
        let graphs = [
            "n0 input a\nn1 input b\nn2 sub n0 n1\nout n2",
            "n0 input a\nn1 const -1\nn2 mul n0 n1\nout n2",
            "n0 input a\nn1 input b\nn2 and n0 n1\nout n2",
        ];
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add, OpKind::Xor, OpKind::Or, OpKind::Not, OpKind::Const]);
        for text in graphs {
            let d = parse_dfg(text).unwrap();
            let (g_out, _) = greedy_rewrite(&d, &rules, &target);
            let (h_out, _, _) =
                hybrid_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
            assert!(cost(&h_out, &target) <= cost(&g_out, &target));
        }
    }

    #[test]
    fn deterministic_output() {
        let d = parse_dfg("n0 input a\nn1 input b\nn2 sub n0 n1\nout n2").unwrap();
        let rules = builtin_ruleset(RulesetKind::Int);
        let target = ops(&[OpKind::Add, OpKind::Xor, OpKind::Const]);
        let (a, _, _) =
            hybrid_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        let (b, _, _) =
            hybrid_rewrite(&d, &rules, &target, &SaturationLimits::default()).unwrap();
        assert_eq!(crate::dfg::serialize_dfg(&a), crate::dfg::serialize_dfg(&b));
    }
}
