//! Parsing of free-form LLM list answers.
//!
//! Accepted shapes: numbered lists (`1.` / `1)`), bulleted lists (`-`, `*`,
//! `•`), and plain line-separated text. When any line carries a list marker,
//! unmarked lines are treated as preamble and dropped. A single unmarked line
//! is split on commas.

use std::sync::LazyLock;

use regex::Regex;

use super::AtgError;

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\d+\s*[.)]\s+").unwrap());
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[-*•–]\s+").unwrap());

fn strip_marker(line: &str) -> Option<&str> {
    if let Some(m) = NUMBERED.find(line) {
        return Some(&line[m.end()..]);
    }
    BULLET.find(line).map(|m| &line[m.end()..])
}

fn clean(item: &str) -> String {
    let s = item.trim().replace("**", "").replace("__", "");
    let s = s.trim().trim_matches('"').trim();
    s.trim_end_matches(['.', ',', ';', ':', '!'])
        .trim()
        .to_string()
}

fn parse_err(raw: &str, reason: &str) -> AtgError {
    AtgError::Parse {
        raw: raw.to_string(),
        reason: reason.to_string(),
    }
}

/// Items of a list answer, cleaned and in answer order.
pub fn parse_list(response: &str) -> Result<Vec<String>, AtgError> {
    let lines: Vec<&str> = response
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(parse_err(response, "empty response"));
    }
    let marked: Vec<&str> = lines.iter().filter_map(|l| strip_marker(l)).collect();
    let items: Vec<String> = if !marked.is_empty() {
        marked.into_iter().map(clean).collect()
    } else if lines.len() == 1 && lines[0].contains(',') {
        lines[0].split(',').map(clean).collect()
    } else {
        lines.into_iter().map(clean).collect()
    };
    let items: Vec<String> = items.into_iter().filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(parse_err(response, "no list items found"));
    }
    Ok(items)
}

/// Items of an answer that continues a bulleted list opened by the prompt,
/// so the first item arrives without its marker.
pub fn parse_continued_list(response: &str) -> Result<Vec<String>, AtgError> {
    let first = response.lines().find(|l| !l.trim().is_empty());
    match first {
        Some(l) if strip_marker(l).is_none() => parse_list(&format!("- {}", response.trim_start())),
        _ => parse_list(response),
    }
}

/// Lowercased, trimmed, deduplicated class-name candidates.
pub fn parse_class_names(response: &str) -> Result<Vec<String>, AtgError> {
    let mut out: Vec<String> = Vec::new();
    for item in parse_list(response)? {
        let name = item.to_lowercase();
        if !out.contains(&name) {
            out.push(name);
        }
    }
    Ok(out)
}

fn stem(word: &str) -> String {
    let w = word.trim().to_lowercase();
    if let Some(s) = w.strip_suffix("ies") {
        format!("{s}y")
    } else if let Some(s) = w.strip_suffix("es").filter(|s| s.ends_with(['s', 'x', 'h'])) {
        s.to_string()
    } else if let Some(s) = w.strip_suffix('s') {
        s.to_string()
    } else {
        w
    }
}

/// If `line` is a section heading naming one of `names`, its index.
fn heading_for(line: &str, names: &[&str]) -> Option<usize> {
    let raw = line.trim();
    let is_heading = raw.starts_with('#') || raw.ends_with(':') || raw.ends_with(":**");
    let is_heading = is_heading || (raw.starts_with("**") && raw.ends_with("**"));
    if !is_heading || strip_marker(raw).is_some() {
        return None;
    }
    let mut h = raw.trim_start_matches('#').replace("**", "");
    h = h.trim().trim_end_matches(':').trim().to_lowercase();
    for prefix in ["for a ", "for an ", "for the ", "for ", "a ", "an ", "the "] {
        if let Some(rest) = h.strip_prefix(prefix) {
            h = rest.to_string();
            break;
        }
    }
    names.iter().position(|n| {
        let n = n.to_lowercase();
        h == n || stem(&h) == stem(&n) || h.starts_with(&format!("{n} ")) || h.starts_with(&format!("{n}:"))
    })
}

/// Splits a pairwise-difference answer into the texts for each class. The
/// answer must contain a heading per class (`Butterfly:`, `## Dragonflies`,
/// `**Butterflies:**` ...); list items under each heading belong to it.
pub fn parse_one_to_one(
    response: &str,
    class_a: &str,
    class_b: &str,
) -> Result<(Vec<String>, Vec<String>), AtgError> {
    let names = [class_a, class_b];
    let mut sections: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    let mut seen = [false, false];
    let mut current: Option<usize> = None;
    for line in response.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(i) = heading_for(line, &names) {
            current = Some(i);
            seen[i] = true;
            continue;
        }
        if let Some(i) = current {
            sections[i].push(line);
        }
    }
    if !seen[0] || !seen[1] {
        return Err(parse_err(
            response,
            &format!("expected a section for both {class_a:?} and {class_b:?}"),
        ));
    }
    let a = parse_list(&sections[0].join("\n"))
        .map_err(|_| parse_err(response, &format!("no items for {class_a:?}")))?;
    let b = parse_list(&sections[1].join("\n"))
        .map_err(|_| parse_err(response, &format!("no items for {class_b:?}")))?;
    Ok((a, b))
}
