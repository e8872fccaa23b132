//! Tolerant extraction of JSON arrays from model replies.

use serde_json::Value;

/// Tries, in order: the raw reply, the reply with backticks stripped, the
/// first fenced code block, and the first inline `[...]` span.
pub fn extract_json_array(reply: &str) -> Option<Vec<Value>> {
    let as_array = |s: &str| match serde_json::from_str::<Value>(s.trim()) {
        Ok(Value::Array(items)) => Some(items),
        _ => None,
    };
    if let Some(items) = as_array(reply) {
        return Some(items);
    }
    let stripped = reply.trim().trim_matches('`');
    let stripped = stripped.strip_prefix("json").unwrap_or(stripped);
    if let Some(items) = as_array(stripped) {
        return Some(items);
    }
    if let Some(block) = fenced_block(reply) {
        if let Some(items) = as_array(block) {
            return Some(items);
        }
    }
    inline_array(reply).and_then(as_array)
}

fn fenced_block(reply: &str) -> Option<&str> {
    let start = reply.find("```")?;
    let after = &reply[start + 3..];
    let body_start = after.find('\n').map_or(0, |i| i + 1);
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// The first balanced `[...]` span, ignoring brackets inside strings.
fn inline_array(reply: &str) -> Option<&str> {
    let start = reply.find('[')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in reply[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&reply[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_stages() {
        assert_eq!(extract_json_array("[1, 2]").unwrap().len(), 2);
        assert_eq!(extract_json_array("`[1]`").unwrap().len(), 1);
        assert_eq!(
            extract_json_array("Here:\n```json\n[1,2,3]\n```\nok")
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            extract_json_array("labels are [0, \"a]\", 1] done")
                .unwrap()
                .len(),
            3
        );
        assert!(extract_json_array("no array here").is_none());
        assert!(extract_json_array("{\"a\": 1}").is_none());
    }
}
