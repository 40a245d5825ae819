//! Small text helpers. All character indices in this crate count Unicode
//! code points, never bytes, so these wrappers centralize the conversions.

/// Number of code points in `s`.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Substring of `s` covering code points `[start, end)`. Returns `None` when
/// the range is out of bounds or inverted.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<String> {
    if end < start {
        return None;
    }
    let mut taken = String::new();
    let mut count = 0usize;
    for ch in s.chars() {
        if count >= end {
            break;
        }
        if count >= start {
            taken.push(ch);
        }
        count += 1;
    }
    if count < end {
        return None;
    }
    Some(taken)
}

/// Code-point index of the first occurrence of `needle` in `haystack`, or
/// `None`. Empty needles never match.
pub fn char_find(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    haystack
        .find(needle)
        .map(|byte_idx| haystack[..byte_idx].chars().count())
}

/// Lowercase `s` one code point at a time, keeping only 1:1 mappings so the
/// result has exactly the same length in code points as the input. Characters
/// whose Unicode lowercase expands to multiple code points are left unchanged.
pub fn lowercase_preserving_len(s: &str) -> String {
    s.chars()
        .map(|ch| {
            let mut lower = ch.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(single), None) => single,
                _ => ch,
            }
        })
        .collect()
}

/// Case-insensitive `char_find` built on length-preserving lowercasing, so
/// indices into the lowered strings are valid for the originals.
pub fn char_find_ci(haystack: &str, needle: &str) -> Option<usize> {
    char_find(
        &lowercase_preserving_len(haystack),
        &lowercase_preserving_len(needle),
    )
}
