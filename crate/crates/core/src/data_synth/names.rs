//! Class-name harmonisation: synonym unification and plural folding, with
//! mixed-class connectors left in place.

const CONNECTORS: [&str; 3] = ["except for", "including", "and"];

const SYNONYMS: &[(&str, &str)] = &[
    ("open water", "water"),
    ("water body", "water"),
    ("surface water", "water"),
    ("tree cover", "tree"),
    ("woodland", "tree"),
    ("grassland", "grass"),
    ("herbaceous vegetation", "grass"),
    ("bare land", "barren land"),
    ("bare ground", "barren land"),
    ("barren", "barren land"),
    ("built-up area", "developed area"),
    ("urban area", "developed area"),
    ("arable land", "cropland"),
    ("agricultural land", "cropland"),
    ("cultivated land", "cropland"),
    ("shrubland", "shrub"),
    ("scrub", "shrub"),
    ("snowfield", "snow"),
    ("permanent snow", "snow"),
    ("marshland", "marsh"),
];

const IRREGULAR: &[(&str, &str)] = &[("leaves", "leaf"), ("mice", "mouse"), ("people", "person"), ("lichens", "lichen")];

/// Words ending in `s` that are already singular.
const SINGULAR_S: &[&str] = &["grass", "moss", "gas", "glass", "bus", "cactus", "haze", "series", "species", "impervious", "various", "across", "this", "its", "is", "as", "us", "cumulus", "asbestos", "debris"];

fn singular(word: &str) -> String {
    if let Some(w) = word.strip_suffix(',') {
        return format!("{},", singular(w));
    }
    if let Some((_, s)) = IRREGULAR.iter().find(|(p, _)| *p == word) {
        return s.to_string();
    }
    if word.len() <= 3 || SINGULAR_S.contains(&word) || !word.ends_with('s') || word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suf in ["sses", "shes", "ches", "xes", "zes"] {
        if word.ends_with(suf) {
            return word[..word.len() - 2].to_string();
        }
    }
    word[..word.len() - 1].to_string()
}

fn unify(segment: &str) -> String {
    let words: Vec<String> = segment.split(' ').map(singular).collect();
    let joined = words.join(" ");
    match SYNONYMS.iter().find(|(from, _)| *from == joined) {
        Some((_, to)) => to.to_string(),
        None => joined,
    }
}

fn harmonize_one(raw: &str) -> String {
    let tokens: Vec<&str> = raw.split_whitespace().collect();
    let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut parts: Vec<String> = Vec::new();
    let mut segment: Vec<&str> = Vec::new();
    let mut i = 0;
    while i < lower.len() {
        let conn = CONNECTORS.iter().find(|c| {
            let cw: Vec<&str> = c.split(' ').collect();
            i + cw.len() <= lower.len() && lower[i..i + cw.len()].iter().zip(&cw).all(|(a, b)| a == b)
        });
        match conn {
            Some(c) => {
                let n = c.split(' ').count();
                parts.push(unify(&segment.join(" ")));
                parts.push(tokens[i..i + n].join(" "));
                segment.clear();
                i += n;
            }
            None => {
                segment.push(&lower[i]);
                i += 1;
            }
        }
    }
    parts.push(unify(&segment.join(" ")));
    parts.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Maps raw product class names onto the shared vocabulary. Unknown names
/// only get lowercased, whitespace-normalised and singularised.
pub fn harmonize_names(raw_names: &[&str]) -> Vec<String> {
    raw_names.iter().map(|r| harmonize_one(r)).collect()
}
