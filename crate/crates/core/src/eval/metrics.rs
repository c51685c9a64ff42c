use std::collections::HashMap;

/// Lowercases, removes ASCII punctuation, drops the articles `a`, `an`,
/// `the` and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1.0 iff the normalized prediction equals some normalized gold.
pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over golds of token-level F1 on normalized whitespace tokens.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(pred, g)).fold(0.0, f64::max)
}

/// Maps yes/no style answers onto `yes` or `no`; anything else is returned
/// normalized.
pub fn canonical_yes_no(text: &str) -> String {
    let n = normalize_answer(text);
    match n.split_whitespace().next() {
        Some("yes" | "true") => "yes".into(),
        Some("no" | "false") => "no".into(),
        _ => n,
    }
}

/// First number in `text`, accepting thousands separators, decimal points,
/// `e` notation and `x 10^n` / `× 10^n` / `*10^n` multipliers. Returns the
/// value and the text after it.
pub fn parse_quantity(text: &str) -> Option<(f64, &str)> {
    let bytes = text.as_bytes();
    let start = (0..bytes.len()).find(|&i| {
        bytes[i].is_ascii_digit()
            || ((bytes[i] == b'-' || bytes[i] == b'.') && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
    })?;
    let mut end = start;
    if bytes[end] == b'-' {
        end += 1;
    }
    let mut seen_dot = false;
    while end < bytes.len() {
        let c = bytes[end];
        let separator = c == b',' && !seen_dot && bytes.get(end + 1).is_some_and(u8::is_ascii_digit);
        if c.is_ascii_digit() || separator {
            end += 1;
        } else if c == b'.' && !seen_dot && bytes.get(end + 1).is_some_and(u8::is_ascii_digit) {
            seen_dot = true;
            end += 1;
        } else {
            break;
        }
    }
    let mantissa: f64 = text[start..end].replace(',', "").parse().ok()?;
    let mut value = mantissa;
    let mut rest = &text[end..];

    // e notation
    if let Some(after) = rest.strip_prefix(['e', 'E']) {
        if let Some((exp, tail)) = leading_int(after) {
            value = mantissa * 10f64.powi(exp);
            rest = tail;
        }
    } else {
        let trimmed = rest.trim_start();
        let mult = ["x", "×", "*"].iter().find_map(|m| trimmed.strip_prefix(m));
        if let Some(after) = mult {
            if let Some(pow) = after.trim_start().strip_prefix("10^") {
                if let Some((exp, tail)) = leading_int(pow) {
                    value = mantissa * 10f64.powi(exp);
                    rest = tail;
                }
            }
        } else if text[start..end] == *"10" {
            if let Some(pow) = rest.strip_prefix('^') {
                if let Some((exp, tail)) = leading_int(pow) {
                    value = 10f64.powi(exp);
                    rest = tail;
                }
            }
        }
    }
    value.is_finite().then_some((value, rest))
}

fn leading_int(s: &str) -> Option<(i32, &str)> {
    let s = s.strip_prefix('+').unwrap_or(s);
    let neg = s.starts_with('-');
    let digits = if neg { &s[1..] } else { s };
    let n = digits.bytes().take_while(u8::is_ascii_digit).count();
    if n == 0 {
        return None;
    }
    let v: i32 = digits[..n].parse().ok()?;
    let consumed = n + usize::from(neg);
    Some((if neg { -v } else { v }, &s[consumed..]))
}

const LOG_TOLERANCE: f64 = 0.5;
const LOG_EPSILON: f64 = 1e-9;

/// 1.0 iff both quantities are positive and their base-10 logarithms are at
/// most 0.5 apart.
pub fn order_of_magnitude_score(pred: f64, gold: f64) -> f64 {
    if !(pred > 0.0 && gold > 0.0) {
        return 0.0;
    }
    if (pred.log10() - gold.log10()).abs() <= LOG_TOLERANCE + LOG_EPSILON {
        1.0
    } else {
        0.0
    }
}

/// Whether trailing prediction text names the expected unit. No unit at all
/// is read as the expected one.
pub fn unit_matches(trailing: &str, unit: &str) -> bool {
    let t = normalize_answer(trailing);
    if t.is_empty() {
        return true;
    }
    let u = normalize_answer(unit);
    let singular = |s: &str| s.strip_suffix('s').map(str::to_string).unwrap_or_else(|| s.to_string());
    t == u || singular(&t) == singular(&u)
}
