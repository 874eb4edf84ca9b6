//! Class systems with name-text variants.
//!
//! Text format, one class per line:
//!
//! ```text
//! # comment
//! 0<TAB>water;lakes, reservoirs, rivers and ocean<TAB>#0045FF
//! 1<TAB>tree;forest;wood
//! ```
//!
//! The first variant is the canonical name. The colour column is optional.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub variants: Vec<String>,
    pub color: Option<[u8; 3]>,
}

impl ClassEntry {
    pub fn new<S: Into<String>>(variants: impl IntoIterator<Item = S>) -> Self {
        Self { variants: variants.into_iter().map(Into::into).collect(), color: None }
    }

    pub fn with_color(mut self, rgb: [u8; 3]) -> Self {
        self.color = Some(rgb);
        self
    }

    pub fn canonical(&self) -> &str {
        &self.variants[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTaxonomy {
    id: String,
    classes: Vec<ClassEntry>,
}

impl ClassTaxonomy {
    pub fn new(id: impl Into<String>, classes: Vec<ClassEntry>) -> Result<Self> {
        let t = Self { id: id.into(), classes };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument(format!("taxonomy `{}` has no classes", self.id)));
        }
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (k, c) in self.classes.iter().enumerate() {
            if c.variants.is_empty() {
                return Err(Error::InvalidArgument(format!("class {k} of `{}` has no name variants", self.id)));
            }
            for v in &c.variants {
                if v.trim().is_empty() {
                    return Err(Error::InvalidArgument(format!("class {k} of `{}` has an empty name", self.id)));
                }
                if let Some(&other) = owner.get(v.as_str()) {
                    if other != k {
                        return Err(Error::InvalidArgument(format!("name `{v}` appears in classes {other} and {k} of `{}`", self.id)));
                    }
                }
                owner.insert(v, k);
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn canonical_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.canonical()).collect()
    }

    /// Reorders classes; `order[i]` is the old index placed at position `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &o in order {
            if o >= self.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
        }
        if order.len() != self.len() {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        Self::new(self.id.clone(), order.iter().map(|&o| self.classes[o].clone()).collect())
    }

    pub fn parse(id: &str, text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, usize, ClassEntry)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let id_col = cols.next().unwrap_or("").trim();
            let class_id: usize = id_col.parse().map_err(|_| err(format!("bad class id `{id_col}`")))?;
            let names = cols.next().ok_or_else(|| err("missing name column (expected `id<TAB>name;name`)".into()))?;
            let variants: Vec<String> = names.split(';').map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ")).collect();
            if variants.iter().any(String::is_empty) {
                return Err(err("empty name variant".into()));
            }
            let mut entry = ClassEntry::new(variants);
            if let Some(c) = cols.next().map(str::trim).filter(|c| !c.is_empty()) {
                entry.color = Some(parse_color(c).ok_or_else(|| err(format!("bad colour `{c}`")))?);
            }
            rows.push((line_no, class_id, entry));
        }
        rows.sort_by_key(|r| r.1);
        for (k, (line, cid, _)) in rows.iter().enumerate() {
            if *cid != k {
                return Err(Error::Parse { line: *line, msg: format!("class ids must be contiguous from 0; expected {k}, found {cid}") });
            }
        }
        Self::new(id, rows.into_iter().map(|r| r.2).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, c) in self.classes.iter().enumerate() {
            let _ = write!(s, "{k}\t{}", c.variants.join(";"));
            if let Some([r, g, b]) = c.color {
                let _ = write!(s, "\t#{r:02X}{g:02X}{b:02X}");
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("taxonomy");
        let text = std::fs::read_to_string(path)?;
        Self::parse(id, &text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Format { path: path.to_path_buf(), msg: format!("line {line}: {msg}") },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_color(s: &str) -> Option<[u8; 3]> {
    let hex = s.strip_prefix('#')?;
    if hex.len() != 6 {
        return None;
    }
    let v = u32::from_str_radix(hex, 16).ok()?;
    Some([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_variants_and_colours() {
        let t = ClassTaxonomy::parse("oem", "# header\n1\ttree;forest\n0\twater;lakes, reservoirs, rivers and ocean\t#0045FF\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.canonical_names(), vec!["water", "tree"]);
        assert_eq!(t.classes()[0].color, Some([0x00, 0x45, 0xFF]));
        assert_eq!(ClassTaxonomy::parse("oem", &t.to_text()).unwrap(), t);
    }

    #[test]
    fn rejects_gaps_duplicates_and_garbage() {
        assert!(matches!(ClassTaxonomy::parse("x", "0\ta\n2\tb\n"), Err(Error::Parse { line: 2, .. })));
        assert!(ClassTaxonomy::parse("x", "0\ta;b\n1\tb\n").is_err());
        assert!(matches!(ClassTaxonomy::parse("x", "zero\ta\n"), Err(Error::Parse { line: 1, .. })));
        assert!(ClassTaxonomy::parse("x", "0\ta;;b\n").is_err());
        assert!(ClassTaxonomy::parse("x", "").is_err());
    }
}
