//! Joint-name tokenization shared by grouping and name embeddings.

/// Side of the body a joint name refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Split a joint name into lowercase words.
///
/// Breaks on non-letters, lower-to-upper transitions and before the last capital
/// of an uppercase run ("LArm" gives "l", "arm"). Digits are dropped.
pub fn words(name: &str) -> Vec<String> {
    // Namespaced rigs ("mixamorig:LeftArm") carry the joint after the last colon.
    let name = name.rsplit(':').next().unwrap_or(name);
    let chars: Vec<char> = name.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_alphabetic() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if c.is_uppercase() && !cur.is_empty() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || (prev.is_uppercase() && next_lower) {
                out.push(std::mem::take(&mut cur));
            }
        }
        cur.extend(c.to_lowercase());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Words with single-letter side abbreviations expanded.
pub fn normalized_words(name: &str) -> Vec<String> {
    words(name)
        .into_iter()
        .map(|w| match w.as_str() {
            "l" => "left".to_string(),
            "r" => "right".to_string(),
            _ => w,
        })
        .collect()
}

/// Canonical form: normalized words joined by single spaces.
pub fn normalize(name: &str) -> String {
    normalized_words(name).join(" ")
}

pub fn side(name: &str) -> Option<Side> {
    let w = normalized_words(name);
    let left = w.iter().any(|w| w.starts_with("left"));
    let right = w.iter().any(|w| w.starts_with("right"));
    match (left, right) {
        (true, false) => Some(Side::Left),
        (false, true) => Some(Side::Right),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn styles_normalize_alike() {
        for n in ["LeftArm", "left_arm", "L_Arm", "LArm", "mixamorig:LeftArm", "Left_Arm2"] {
            assert_eq!(normalize(n), "left arm", "{n}");
        }
        assert_eq!(normalize("HeadTop_End"), "head top end");
        assert_eq!(normalize("Spine1"), "spine");
        assert_eq!(normalize("RightUpLeg"), "right up leg");
    }

    #[test]
    fn sides() {
        assert_eq!(side("LeftForeArm"), Some(Side::Left));
        assert_eq!(side("r_hand"), Some(Side::Right));
        assert_eq!(side("RShoulder"), Some(Side::Right));
        assert_eq!(side("Spine"), None);
        // "Leg" and "Ring" start with l/r but are not abbreviations.
        assert_eq!(side("Leg"), None);
        assert_eq!(side("Ring1"), None);
    }
}
