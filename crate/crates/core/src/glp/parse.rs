/// Trim, case-fold, and peel surrounding quotes and periods.
pub fn normalize(s: &str) -> String {
    let lowered = s.trim().to_lowercase();
    let strip = |c: char| c.is_whitespace() || matches!(c, '\'' | '"' | '`' | '.');
    lowered.trim_matches(strip).to_string()
}

/// Index of the candidate the response names, or `None`.
///
/// Tried in order: exact match after normalization (first candidate wins),
/// a bare positional alias `candidateN` (1-based), then the longest
/// candidate contained in the response.
pub fn parse_answer(response: &str, candidates: &[String]) -> Option<usize> {
    let r = normalize(response);
    if r.is_empty() {
        return None;
    }
    let labels: Vec<String> = candidates.iter().map(|c| normalize(c)).collect();
    if let Some(i) = labels.iter().position(|l| *l == r) {
        return Some(i);
    }
    if let Some(n) = r.strip_prefix("candidate").and_then(|d| d.parse::<usize>().ok()) {
        if (1..=candidates.len()).contains(&n) {
            return Some(n - 1);
        }
    }
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && r.contains(l.as_str()))
        .fold(None, |best: Option<(usize, usize)>, (i, l)| match best {
            Some((_, len)) if len >= l.len() => best,
            _ => Some((i, l.len())),
        })
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn quoted_with_period() {
        assert_eq!(parse_answer(" 'Paris'. ", &c(&["Rome", "Paris"])), Some(1));
        assert_eq!(parse_answer("\"PARIS\"", &c(&["Paris"])), Some(0));
    }

    #[test]
    fn prose_falls_back_to_containment() {
        assert_eq!(parse_answer("I think the answer is Paris", &c(&["Rome", "Paris"])), Some(1));
    }

    #[test]
    fn longest_contained_candidate_wins() {
        let cands = c(&["York", "New York", "Yorkshire"]);
        assert_eq!(parse_answer("It is New York.", &cands), Some(1));
    }

    #[test]
    fn unknown_answer_fails() {
        assert_eq!(parse_answer("Rome", &c(&["Paris", "Lyon"])), None);
        assert_eq!(parse_answer("  ", &c(&["Paris"])), None);
    }

    #[test]
    fn first_duplicate_wins() {
        assert_eq!(parse_answer("paris", &c(&["Paris", "PARIS"])), Some(0));
    }

    #[test]
    fn positional_alias() {
        let cands = c(&["e12", "e1", "e7"]);
        assert_eq!(parse_answer("candidate1", &cands), Some(0));
        assert_eq!(parse_answer("'Candidate3'.", &cands), Some(2));
        assert_eq!(parse_answer("candidate4", &cands), None);
        // without the alias pass, containment would pick `e1` out of `candidate1`
        assert_eq!(parse_answer("candidate1", &c(&["e7", "e1"])), Some(0));
        // an actual label takes precedence over the alias
        assert_eq!(parse_answer("candidate2", &c(&["x", "y", "candidate2"])), Some(2));
    }
}
