//! Prompt templates for the remote proposer. Each renderer fills the
//! template slots from a [`PromptContext`] and appends the JSON shape the
//! response is parsed against.

use std::fmt::Write as _;

use super::{PromptContext, RankedHypothesis};
use crate::grn::Node;

fn signature(ctx: &PromptContext) -> String {
    let names: Vec<&str> = ctx.variables().iter().map(|v| v.name.as_str()).collect();
    format!("def discovered_law({}):", names.join(", "))
}

fn parameter_block(ctx: &PromptContext) -> String {
    let mut s = String::new();
    for v in ctx.variables() {
        let _ = writeln!(s, "- {}: range [{}, {}]", v.name, v.lo, v.hi);
    }
    s
}

fn budget_pct(ctx: &PromptContext) -> String {
    let used = ctx.budget_total - ctx.budget_remaining;
    format!(
        "{used}/{} experiments used, {:.0}% of budget",
        ctx.budget_total,
        100.0 * used as f64 / ctx.budget_total.max(1) as f64
    )
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s
    }
}

fn current_hypotheses(ctx: &PromptContext) -> String {
    if ctx.current_hypotheses.is_empty() {
        return "(none)".into();
    }
    ctx.current_hypotheses.iter().map(|h| format!("- {h}\n")).collect()
}

fn phase_instruction(ctx: &PromptContext) -> &'static str {
    match ctx.phase {
        super::Phase::Explore | super::Phase::Disambiguate => {
            "Competing hypotheses remain plausible. Prefer regions where they make clearly different predictions."
        }
        super::Phase::Refine => {
            "One hypothesis dominates. Prefer regions that pin down its constants and test its weakest predictions."
        }
        super::Phase::Finalize => "Budget is nearly exhausted. Prefer regions that confirm the best hypothesis.",
    }
}

const GENERATION_FORMAT: &str = r#"Respond with a single JSON object:
{"primary_hypothesis": "<expression>", "alternates": ["<expression>", "..."], "reasoning": "<short text>"}
Write every hypothesis as a plain arithmetic expression over the parameters above, with free constants named C0, C1, ... ."#;

/// Hypothesis generation for equation tasks.
pub fn equation_generation(ctx: &PromptContext) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "GOAL: {}", ctx.goal);
    let _ = writeln!(s, "DOMAIN: {}", ctx.domain);
    let _ = writeln!(s, "PARAMETERS:\n{}", parameter_block(ctx));
    let _ = writeln!(s, "OBJECTIVE TYPE: regression\nOBJECTIVE DIRECTION: fit the measured response");
    let _ = writeln!(s, "FUNCTION SIGNATURE: {}\n", signature(ctx));
    let _ = writeln!(s, "DATA ({}):\n{}", budget_pct(ctx), or_none(&ctx.data_table));
    let _ = writeln!(s, "Best symbolic equation so far: {}", ctx.best.as_deref().unwrap_or("(none)"));
    let _ = writeln!(s, "{}", or_none(&ctx.memory));
    let _ = writeln!(s, "Current hypotheses:\n{}", current_hypotheses(ctx));
    if let Some(e) = &ctx.ensemble {
        let _ = writeln!(s, "ENSEMBLE GRAPH DISTRIBUTION:\n{e}");
    }
    let _ = writeln!(s, "CURRENT PHASE: {}\n", ctx.phase.as_str());
    let _ = writeln!(
        s,
        "TASK: Generate one primary and 2-6 alternate EQUATION hypotheses that remain plausible under current data. \
Do NOT propose search regions in this step. Focus only on plausible competing hypotheses and concise reasoning for ambiguity.\n"
    );
    s.push_str(GENERATION_FORMAT);
    s
}

/// Small-role sampling for equation tasks: the generation template asking
/// for one hypothesis.
pub fn equation_sample(ctx: &PromptContext) -> String {
    let mut s = equation_generation(ctx);
    s.push_str("\nOnly the primary hypothesis is used from this response; alternates may be empty.");
    s
}

/// Search-region proposal for equation tasks, given the hypothesis set.
pub fn equation_regions(ctx: &PromptContext, primary: &str, alternates: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "DISCOVERED LAW FUNCTION SIGNATURE (must match exactly): {}\n", signature(ctx));
    let _ = writeln!(s, "PARAMETERS:\n{}", parameter_block(ctx));
    let _ = writeln!(
        s,
        "EXPERIMENTAL DATA ({} experiments remaining):\n{}",
        ctx.budget_remaining,
        or_none(&ctx.data_table)
    );
    if let Some(b) = &ctx.best {
        let _ = writeln!(s, "Best symbolic equation so far: {b}");
    }
    let _ = writeln!(s, "Competing hypotheses that the regions must discriminate:");
    for a in alternates {
        let _ = writeln!(s, "- {a}");
    }
    let _ = writeln!(s, "Current best hypothesis: {primary}");
    let _ = writeln!(s, "{}", or_none(&ctx.memory));
    let _ = writeln!(s, "{}", phase_instruction(ctx));
    if !ctx.discrimination_hints.is_empty() {
        let _ = writeln!(s, "{}", ctx.discrimination_hints);
    }
    let _ = writeln!(
        s,
        "\nBased on this data, propose the most informative parameter regions to explore next. Think carefully about what the data \
represents and what experiments would most help discover the governing equation via disambiguating the competing hypotheses set.\n"
    );
    let _ = writeln!(
        s,
        "search_regions must be a list of objects with this exact structure: \
{{\"bounds\": {{\"p1\": [lo, hi], \"p2\": [lo, hi], ...}}, \"n_experiments\": 4, \"priority\": \"high\", \"rationale\": \"why\"}}"
    );
    let _ = write!(
        s,
        "At most {} experiments run this iteration.\nRespond with a single JSON object:\n\
{{\"search_regions\": [...], \"confidence\": <0..1>, \"done\": <true|false>}}",
        ctx.max_experiments
    );
    s
}

/// Conversion of a free-form hypothesis into an executable expression.
pub fn executable_structure(ctx: &PromptContext, hypothesis: &str, previous_attempts: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "REQUIRED FUNCTION SIGNATURE (use EXACTLY this): {}\n", signature(ctx));
    let _ = writeln!(s, "EXPERIMENTAL DATA (raw values and [log10 values]):\n{}", or_none(&ctx.data_table));
    let _ = writeln!(s, "CURRENT HYPOTHESIS: {hypothesis}\n");
    if !previous_attempts.is_empty() {
        let _ = writeln!(s, "PREVIOUS ATTEMPTS (rejected):");
        for p in previous_attempts {
            let _ = writeln!(s, "- {p}");
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "If the response spans orders of magnitude, consider multiplicative structure and exponents (the log10 values help).\n"
    );
    let _ = writeln!(s, "RULES:");
    let _ = writeln!(s, "- Use free constants named C0, C1, ... (alpha and beta are also accepted).");
    let _ = writeln!(s, "- Use only standard math functions: exp, log, log10, sqrt, sin, cos, tanh, abs.");
    let _ = writeln!(s, "- Use ** for powers, not pow().");
    let _ = writeln!(s, "- Use the exact parameter names from the signature.");
    let _ = writeln!(s, "- Every constant must appear in the return expression.\n");
    s.push_str(r#"Respond with a single JSON object: {"expression": "<return expression>"}"#);
    s
}

fn graph_state(ctx: &PromptContext) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "GOAL: {}", ctx.goal);
    let _ = writeln!(s, "DOMAIN: {}", ctx.domain);
    let _ = writeln!(s, "CURRENT BEST HYPOTHESIS: {}", ctx.best.as_deref().unwrap_or("(none)"));
    let _ = writeln!(s, "RECENT DATA:\n{}", or_none(&ctx.data_table));
    let _ = writeln!(s, "HYPOTHESIS FIT SUMMARY:\n{}", or_none(&ctx.fit_summary));
    let _ = writeln!(s, "MEMORY SUMMARY:\n{}", or_none(&ctx.memory));
    let _ = writeln!(s, "CONFIDENCE SUMMARY: {:.3} (phase: {})", ctx.confidence, ctx.phase.as_str());
    s
}

fn graph_budget(ctx: &PromptContext) -> String {
    format!(
        "BUDGET REMAINING: {}\nMAX EXPERIMENTS THIS ITERATION: {}\n",
        ctx.budget_remaining, ctx.max_experiments
    )
}

/// Hypothesis set plus intervention regions for graph tasks.
pub fn graph_generation(ctx: &PromptContext) -> String {
    let mut s = graph_state(ctx);
    if let Some(e) = &ctx.ensemble {
        let _ = writeln!(s, "ENSEMBLE GRAPH DISTRIBUTION:\n{e}");
    }
    if !ctx.discrimination_hints.is_empty() {
        let _ = writeln!(s, "DIVERSITY:\n{}", ctx.discrimination_hints);
    }
    s.push_str(&graph_budget(ctx));
    let _ = write!(
        s,
        "\nPropose 2-5 competing natural-language mechanism hypotheses with IDs h1, h2, ..., name the primary one, and propose 1-4 \
search regions of interventions that best discriminate them.\n\
Each intervention is a list of at most 2 actions on distinct nodes; actions are knock_up (factor > 1) or knock_down (factor in [0, 1)) \
on genes {genes}, or set_signal (factor = level >= 0) on signal.\n\
Respond with a single JSON object:\n\
{{\"hypotheses\": [{{\"id\": \"h1\", \"text\": \"...\"}}], \"primary_hypothesis_id\": \"h1\", \
\"search_regions\": [{{\"interventions\": [[{{\"node\": \"A\", \"action\": \"knock_down\", \"factor\": 0.1}}]], \
\"n_experiments\": 2, \"priority\": \"high\", \"rationale\": \"why\"}}], \"confidence\": <0..1>, \"done\": <true|false>}}",
        genes = gene_list()
    );
    s
}

/// Small-role sampling for graph tasks.
pub fn graph_sample(ctx: &PromptContext) -> String {
    let mut s = graph_state(ctx);
    s.push_str(&graph_budget(ctx));
    s.push_str(
        "\nReturn exactly one plausible natural-language mechanism hypothesis, with a short rationale and confidence. \
Do not output graph edges or search regions.\n\
Respond with a single JSON object: {\"hypothesis\": \"...\", \"rationale\": \"...\", \"confidence\": <0..1>}",
    );
    s
}

fn gene_list() -> String {
    Node::GENES.iter().map(|n| n.name()).collect::<Vec<_>>().join(", ")
}

/// Translation of one natural-language hypothesis into a signed graph.
pub fn graph_translation(id: &str, text: &str) -> String {
    let nodes = Node::GENES.iter().map(|n| n.name()).collect::<Vec<_>>().join(", ");
    let final_node = Node::FINAL.name();
    format!(
        "Translate this single natural-language hypothesis into one signed graph.\n\
hypothesis_id: {id}\n\
text: {text}\n\n\
Return JSON with this schema:\n\
{{\"translation\": {{\"hypothesis_id\": \"{id}\", \"rationale\": \"...\", \"assumptions\": [\"...\"], \
\"edges\": [{{\"src\": \"signal\", \"dst\": \"A\", \"sign\": 1}}, {{\"src\": \"A\", \"dst\": \"C\", \"sign\": 1}}]}}}}\n\n\
Requirements:\n\
- every dst must be one of {{{nodes}}}; src may also be signal.\n\
- sign is 1 for activation and -1 for repression.\n\
- the graph must contain a directed path from signal to {final_node}.\n\
- if the hypothesis does not mention {final_node}, add the minimal faithful chain that reaches it."
    )
}

/// Follow-up sent once after a response fails validation.
pub fn repair(error: &str) -> String {
    format!(
        "Your previous response could not be used: {error}\n\
Reply again with only the corrected JSON object, following the requested schema exactly."
    )
}

/// Equivalence question for symbolic scoring.
pub fn judge(truth: &str, hypothesis: &str) -> String {
    format!(
        "Question: Given the ground truth mathematical expression A and the hypothesis B, determine if there exist any constant \
parameter values that would make the hypothesis equivalent to the given ground truth expression.\n\
A: {truth}\nB: {hypothesis}\n\
Let's think step by step. Explain your reasoning and then provide the final answer as: \
{{\"reasoning\": \"Brief step-by-step analysis\", \"answer\": \"Yes/No\"}}"
    )
}

/// Final choice among fitted candidates.
pub fn arbiter(ctx: &PromptContext, candidates: &[RankedHypothesis]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "GOAL: {}", ctx.goal);
    let _ = writeln!(s, "DOMAIN: {}", ctx.domain);
    let _ = writeln!(s, "DATA ({}):\n{}", budget_pct(ctx), or_none(&ctx.data_table));
    let _ = writeln!(s, "FINAL CANDIDATES (held-out fit, lower is better):");
    for c in candidates {
        let _ = writeln!(s, "- {} | score {:.6} | complexity {}", c.text, c.score, c.complexity);
    }
    s.push_str(
        "\nChoose the candidate that is most scientifically plausible and consistent with the observed data. \
Respond with a single JSON object: {\"choice\": \"<candidate text copied exactly>\", \"reasoning\": \"...\"}",
    );
    s
}
