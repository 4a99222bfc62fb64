//! Regenerates the bundled replay fixtures deterministically.
//!
//! Usage: `cargo run -p trace-exit-cli --bin gen_fixtures -- [fixtures-dir]`
//!
//! The fixtures are committed; this tool exists so they can be audited
//! and rebuilt from first principles. Every confidence value is realized
//! as a two-way token distribution whose top probability is solved by
//! bisection, so tests can assert exact derived scores.

use std::error::Error;
use std::path::{Path, PathBuf};

use trace_exit::drivers::{ReplayTrace, ReplayTraceBuilder};

fn main() -> Result<(), Box<dyn Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    std::fs::create_dir_all(out.join("set20"))?;
    std::fs::create_dir_all(out.join("set4"))?;
    write_fig11(&out)?;
    write_stable_early(&out)?;
    write_case_study(&out)?;
    write_set20(&out)?;
    write_set4(&out)?;
    println!("fixtures written to {}", out.display());
    Ok(())
}

/// Top probability of a two-way distribution whose normalized entropy
/// yields answer confidence `c` (solved by bisection; c = 1 exactly uses
/// a single-candidate distribution instead).
fn top_probability_for_confidence(c: f64) -> f64 {
    assert!((0.0..1.0).contains(&c), "confidence {c} out of range");
    let target_entropy = 1.0 - c;
    let normalized_entropy = |p: f64| {
        let q = 1.0 - p;
        -(p * p.ln() + q * q.ln()) / std::f64::consts::LN_2
    };
    let (mut lo, mut hi) = (0.5, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normalized_entropy(mid) > target_entropy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Induction script: one box-continuation token closing immediately,
/// with the requested answer confidence.
fn induction_script(answer: &str, confidence: f64) -> Vec<(String, Vec<(String, f64)>)> {
    let token = format!("{answer}}}");
    let candidates = if confidence >= 1.0 {
        vec![(token.clone(), 1.0)]
    } else {
        let p = top_probability_for_confidence(confidence);
        vec![(token.clone(), p), (" another".to_string(), 1.0 - p)]
    };
    vec![(token, candidates)]
}

/// Splits prose into word-sized tokens with the space attached to the
/// following token, the way subword vocabularies usually do.
fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch == ' ' && !current.is_empty() && !current.ends_with(' ') {
            tokens.push(std::mem::take(&mut current));
            current.push(' ');
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn push_text(mut b: ReplayTraceBuilder, text: &str) -> ReplayTraceBuilder {
    for token in tokenize(text) {
        b = b.certain_token(&token);
    }
    b
}

fn save(trace: &ReplayTrace, path: &Path) -> Result<(), Box<dyn Error>> {
    trace.save(path)?;
    println!("  {}", path.display());
    Ok(())
}

/// The case-study fixture: a transient overconfident wrong answer (998
/// at confidence 0.91) followed by a persistent correct one (1997/2).
/// With k=5, α=0.7, τ=0.8 the single-step baseline exits at step 3 with
/// 998 while the window policy exits at step 7 with 1997/2 at stability
/// 0.7·(4/5) + 0.3·mean(0.92, 0.93, 0.94, 0.95) = 0.8405.
fn write_fig11(out: &Path) -> Result<(), Box<dyn Error>> {
    let steps: [(&str, &str, f64); 8] = [
        (
            "First, I need the average of 1, 2, and so on up to 1996. The average \
             of consecutive integers is the sum divided by the count, so I should \
             compute the sum first. As a tiny check, for n = 1 the average is just 1.",
            "1",
            0.30,
        ),
        (
            "Wait, the sum has a closed form: 1 + 2 + ... + 1996 = 1996 * 1997 / 2. \
             The quantity 1997 will show up directly in the average.",
            "1997",
            0.50,
        ),
        (
            "But now divide by the count: (1996 * 1997 / 2) / 1996. Cancelling, \
             1996 / 2 = 998, so the average should be 998.",
            "998",
            0.91,
        ),
        (
            "Wait, that cancelled the wrong factor. In (1996 * 1997 / 2) / 1996 \
             the 1996 cancels, not the 1997, leaving 1997 / 2. So the average is 1997/2.",
            "1997/2",
            0.92,
        ),
        (
            "Let me think about a small case: 1, 2, 3, 4 has sum 10 and average \
             10 / 4 = 5/2, which equals (4 + 1) / 2. The pattern (n + 1) / 2 gives \
             (1996 + 1) / 2 = 1997/2.",
            "1997/2",
            0.93,
        ),
        (
            "Alternatively, pair the ends: 1 + 1996 = 1997, 2 + 1995 = 1997, and \
             each of the 998 pairs has average 1997 / 2, so the overall average is 1997/2.",
            "1997/2",
            0.94,
        ),
        (
            "Wait, checking the decimal too: 1997 / 2 = 998.5, which lies between \
             998 and 999 exactly as the average of an even count of consecutive \
             integers must. Confirmed.",
            "1997/2",
            0.95,
        ),
        (
            "</think> The average of the integers from 1 to 1996 is \\boxed{\\frac{1997}{2}}.",
            "1997/2",
            0.96,
        ),
    ];

    let mut b = ReplayTraceBuilder::new(
        "What is the average of the integers from 1 to 1996?",
    )
    .gold_answer("1997/2")
    .model("qwen3-8b")
    .top_k(20);
    for (i, (text, answer, confidence)) in steps.iter().enumerate() {
        let text = if i == 0 {
            text.to_string()
        } else {
            format!(" {text}")
        };
        b = push_text(b, &text);
        b = b.induction(i + 1, induction_script(answer, *confidence));
    }
    save(&b.build(), &out.join("fig11.jsonl"))
}

/// A trace whose induced answer is stable from step 3 onward at moderate
/// confidence (0.75): the window policy exits at step 7, where the
/// window is saturated: 0.7·1.0 + 0.3·0.75 = 0.925 ≥ 0.8, while one step
/// earlier 0.7·0.8 + 0.3·0.75 = 0.785 falls just short.
fn write_stable_early(out: &Path) -> Result<(), Box<dyn Error>> {
    let steps: [(&str, &str, f64); 8] = [
        (
            "Jack has 3 boxes with 8 crayons each plus 2 loose crayons. Counting \
             the loose ones first suggests starting small; maybe 7 in hand?",
            "7",
            0.40,
        ),
        (
            "Wait, that guess ignored the boxes. One box and the loose ones make \
             8 + 2 = 10; two boxes would make 12 minus nothing... say 12.",
            "12",
            0.50,
        ),
        (
            "But the right way is 3 * 8 = 24 from the boxes, plus the 2 loose \
             crayons, which is 26.",
            "26",
            0.75,
        ),
        (
            "Wait, recounting the boxes: 8 + 8 + 8 = 24, and 24 + 2 = 26. Same result.",
            "26",
            0.75,
        ),
        (
            "Let me think about it as groups of ten: 24 is two tens and a four, \
             add 2 to get two tens and a six, so 26.",
            "26",
            0.75,
        ),
        (
            "Alternatively, 3 * (8 + 1) = 27 would overcount by one box of one, \
             so 27 - 1 = 26 checks out from above as well.",
            "26",
            0.75,
        ),
        (
            "Wait, one more pass: boxes give 24, loose give 2, total 26. Settled.",
            "26",
            0.75,
        ),
        (
            "</think> Jack has \\boxed{26} crayons in total.",
            "26",
            0.75,
        ),
    ];

    let mut b = ReplayTraceBuilder::new(
        "Jack has 3 boxes of 8 crayons and 2 loose crayons. How many crayons does he have?",
    )
    .gold_answer("26")
    .model("qwen3-8b")
    .top_k(20);
    for (i, (text, answer, confidence)) in steps.iter().enumerate() {
        let text = if i == 0 {
            text.to_string()
        } else {
            format!(" {text}")
        };
        b = push_text(b, &text);
        b = b.induction(i + 1, induction_script(answer, *confidence));
    }
    save(&b.build(), &out.join("stable_early.jsonl"))
}

/// Plain text with six marker-delimited steps, for the segment command
/// and offline segmentation tests.
fn write_case_study(out: &Path) -> Result<(), Box<dyn Error>> {
    let text = "To find the number of diagonals of a regular octagon, I start from \
the formula n(n-3)/2. For n = 8 that gives 8 * 5 / 2 = 20. \
Wait, I should double check the subtraction: n - 3 = 5 when n = 8, yes. \
But what if I count by vertices instead? Each of the 8 vertices connects to 5 \
non-adjacent vertices, giving 40 ordered pairs, and each diagonal is counted \
twice, so 20 again. \
Let me think about a square as a sanity check: 4 * 1 / 2 = 2 diagonals, correct. \
Alternatively, C(8,2) - 8 sides = 28 - 8 = 20. \
</think> The octagon has \\boxed{20} diagonals.\n";
    let path = out.join("case_study.txt");
    std::fs::write(&path, text)?;
    println!("  {}", path.display());
    Ok(())
}

/// One synthetic evaluation item: scripted induced answers riding on
/// generic reasoning prose, ending in a boxed final statement.
struct ItemSpec {
    id: &'static str,
    question: String,
    gold: &'static str,
    /// (induced answer, confidence) per step; the last entry is the
    /// closing statement step whose text boxes that answer.
    inductions: Vec<(String, f64)>,
    /// Extra filler sentences per step, to vary token counts.
    heft: usize,
}

const MARKERS: [&str; 4] = ["Wait", "But", "Alternatively", "Let me think"];

const PHRASES: [&str; 6] = [
    "working through the arithmetic once more gives the same figure",
    "the intermediate quantities line up with the estimate",
    "rewriting the expression keeps the value unchanged",
    "a quick sanity check against a smaller case agrees",
    "carrying the units through does not change anything",
    "the bound from the rough estimate is still respected",
];

fn build_item(spec: &ItemSpec) -> ReplayTrace {
    let mut b = ReplayTraceBuilder::new(&spec.question)
        .gold_answer(spec.gold)
        .model("qwen3-8b")
        .top_k(20);
    let steps = spec.inductions.len();
    for (i, (answer, confidence)) in spec.inductions.iter().enumerate() {
        let text = if i == 0 {
            format!("Starting from the statement, the candidate value is {answer}.")
        } else if i == steps - 1 {
            format!(" </think> The final answer is \\boxed{{{answer}}}.")
        } else {
            let marker = MARKERS[(i - 1) % MARKERS.len()];
            let sep = if marker == "Let me think" { ":" } else { "," };
            let mut text = format!(" {marker}{sep} looking again, the value comes out to {answer}");
            for j in 0..spec.heft {
                text.push_str(", and ");
                text.push_str(PHRASES[(i + j) % PHRASES.len()]);
            }
            text.push('.');
            text
        };
        b = push_text(b, &text);
        b = b.induction(i + 1, induction_script(answer, *confidence));
    }
    b.build()
}

fn manifest_line(id: &str, question: &str, answer: &str, replay: &str) -> String {
    serde_json::json!({
        "id": id,
        "question": question,
        "answer": answer,
        "replay": replay,
    })
    .to_string()
}

/// Clean convergence: two wandering guesses, then the gold answer with
/// rising confidence. Both policies end up correct; the window policy
/// exits at step 6 (0.7·0.8 + 0.3·mean(0.72, 0.81, 0.88, 0.88) ≈ 0.807),
/// the single-step baseline at the first confidence ≥ 0.8.
fn clean_item(id: &'static str, n: u64, gold: &'static str, heft: usize) -> ItemSpec {
    let w1 = (n + 3).to_string();
    let w2 = (n * 2).to_string();
    let mut inductions = vec![(w1, 0.55), (w2, 0.60)];
    for c in [0.72, 0.81, 0.88, 0.88, 0.88, 0.88] {
        inductions.push((gold.to_string(), c));
    }
    ItemSpec {
        id,
        question: format!("Problem {id}: combine the quantities and report the total ({n} base)."),
        gold,
        inductions,
        heft,
    }
}

/// Transient overconfidence: a wrong answer spikes to confidence 0.90 at
/// step 2, fooling the single-step baseline; the correct answer then
/// holds at 0.70, never re-crossing 0.8 alone, and the window policy
/// exits once five gold steps fill the window (0.7 + 0.21 = 0.91).
fn spike_item(id: &'static str, n: u64, gold: &'static str, heft: usize) -> ItemSpec {
    let wrong = (n * 10 + 1).to_string();
    let mut inductions = vec![((n + 1).to_string(), 0.50), (wrong, 0.90)];
    for _ in 0..5 {
        inductions.push((gold.to_string(), 0.70));
    }
    inductions.push((gold.to_string(), 0.70));
    ItemSpec {
        id,
        question: format!("Problem {id}: resolve the rate puzzle built on {n}."),
        gold,
        inductions,
        heft,
    }
}

/// Never converges: every step induces a different low-confidence
/// answer; both policies fall back to the last induced answer, which
/// equals gold only when `ends_right`.
fn wander_item(id: &'static str, n: u64, gold: &'static str, ends_right: bool, heft: usize) -> ItemSpec {
    let mut inductions = Vec::new();
    for i in 0..6u64 {
        inductions.push(((n + i * 7).to_string(), 0.55));
    }
    let last = if ends_right {
        gold.to_string()
    } else {
        (n + 100).to_string()
    };
    inductions.push((last.clone(), 0.60));
    inductions.push((last, 0.60));
    ItemSpec {
        id,
        question: format!("Problem {id}: untangle the recurrence seeded at {n}."),
        gold,
        inductions,
        heft,
    }
}

/// Stable but wrong: the model commits to a wrong answer with high
/// confidence; every policy exits early and is wrong, and the gold
/// answer never appears (so even the oracle cannot win).
fn stable_wrong_item(id: &'static str, n: u64, gold: &'static str, heft: usize) -> ItemSpec {
    let wrong = (n * 3 + 2).to_string();
    let mut inductions = vec![((n + 2).to_string(), 0.55)];
    for _ in 0..6 {
        inductions.push((wrong.clone(), 0.85));
    }
    ItemSpec {
        id,
        question: format!("Problem {id}: evaluate the nested expression around {n}."),
        gold,
        inductions,
        heft,
    }
}

fn write_set20(out: &Path) -> Result<(), Box<dyn Error>> {
    let specs: Vec<ItemSpec> = vec![
        clean_item("a1", 4, "12", 1),
        clean_item("a2", 9, "31", 2),
        clean_item("a3", 5, "3/4", 1),
        clean_item("a4", 12, "140", 3),
        clean_item("a5", 7, "0.5", 2),
        clean_item("a6", 15, "64", 1),
        clean_item("a7", 21, "17", 2),
        spike_item("b1", 3, "45", 2),
        spike_item("b2", 6, "2/3", 1),
        spike_item("b3", 11, "272", 2),
        spike_item("b4", 8, "19", 3),
        spike_item("b5", 14, "5.5", 1),
        spike_item("b6", 19, "88", 2),
        wander_item("c1", 30, "37", true, 1),
        wander_item("c2", 41, "55", true, 2),
        wander_item("c3", 52, "60", false, 1),
        wander_item("c4", 63, "71", false, 2),
        stable_wrong_item("d1", 10, "99", 1),
        stable_wrong_item("d2", 16, "123", 2),
        stable_wrong_item("d3", 23, "456", 1),
    ];
    let mut manifest = String::new();
    for spec in &specs {
        let trace = build_item(spec);
        let name = format!("{}.jsonl", spec.id);
        save(&trace, &out.join("set20").join(&name))?;
        manifest.push_str(&manifest_line(
            spec.id,
            &spec.question,
            spec.gold,
            &format!("set20/{name}"),
        ));
        manifest.push('\n');
    }
    let path = out.join("set20.jsonl");
    std::fs::write(&path, manifest)?;
    println!("  {}", path.display());
    Ok(())
}

/// Four-item demo set: three of the four come out correct under the
/// window policy (stable, clean, spike) and one stays wrong.
fn write_set4(out: &Path) -> Result<(), Box<dyn Error>> {
    let specs: Vec<ItemSpec> = vec![
        clean_item("demo1", 2, "8", 1),
        clean_item("demo2", 6, "27", 2),
        spike_item("demo3", 4, "3/8", 1),
        stable_wrong_item("demo4", 9, "250", 1),
    ];
    let mut manifest = String::new();
    for spec in &specs {
        let trace = build_item(spec);
        let name = format!("{}.jsonl", spec.id);
        save(&trace, &out.join("set4").join(&name))?;
        manifest.push_str(&manifest_line(
            spec.id,
            &spec.question,
            spec.gold,
            &format!("set4/{name}"),
        ));
        manifest.push('\n');
    }
    let path = out.join("set4.jsonl");
    std::fs::write(&path, manifest)?;
    println!("  {}", path.display());
    Ok(())
}
