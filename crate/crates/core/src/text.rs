//! Attribute schemas, many-hot embeddings and template sentences.
//!
//! A schema is an ordered list of attribute groups. A single-choice group
//! contributes a one-hot block, a flags group one independent bit per
//! option. Sentences are assembled from per-group templates and can be
//! parsed back, so the text form of a record is lossless.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Single,
    Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupRole {
    #[default]
    Clause,
    /// The chosen option names the sentence subject instead of adding a clause.
    Subject,
}

/// One attribute group as written in a schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub name: String,
    pub kind: GroupKind,
    pub options: Vec<String>,
    #[serde(default)]
    pub role: GroupRole,
    /// Text substituted for `{option}`; defaults to the option names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrases: Option<Vec<String>>,
    /// Possessive pronoun per option, for subject groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub possessive: Option<Vec<String>>,
    /// Clause for a chosen option (single) or a set flag (flags).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Clause for an unset flag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_off: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    #[serde(default = "default_subject")]
    subject: String,
    #[serde(default = "default_possessive")]
    possessive: String,
    #[serde(rename = "group")]
    groups: Vec<AttributeGroup>,
}

fn default_subject() -> String {
    "person".into()
}

fn default_possessive() -> String {
    "their".into()
}

/// Where a clause came from, used when parsing sentences.
#[derive(Debug, Clone, Copy)]
enum ClauseKey {
    Choice { group: usize, option: usize },
    Flag { group: usize, option: usize, on: bool },
}

/// Validated schema with a stable identifier derived from its layout.
#[derive(Debug, Clone)]
pub struct AttributeSchema {
    file: SchemaFile,
    offsets: Vec<usize>,
    total_dim: usize,
    id: String,
    subject_group: Option<usize>,
    /// Clause text per subject option (or the single default subject).
    clauses: HashMap<(usize, String), ClauseKey>,
}

impl PartialEq for AttributeSchema {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.file.groups == other.file.groups
    }
}

pub const DEFAULT_SCHEMA_TOML: &str = include_str!("default_schema.toml");

impl AttributeSchema {
    pub fn new(groups: Vec<AttributeGroup>) -> Result<Self> {
        Self::from_file(SchemaFile { subject: default_subject(), possessive: default_possessive(), groups })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: SchemaFile = toml::from_str(text).map_err(|e| Error::InvalidSchema(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SchemaFile = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        Self::from_file(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("schema serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// The built-in synthetic schema: gender, 18 visibility flags, head,
    /// body, and per-limb states.
    pub fn default_synthetic() -> Self {
        Self::from_toml(DEFAULT_SCHEMA_TOML).expect("bundled schema is valid")
    }

    fn from_file(file: SchemaFile) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidSchema(msg));
        let mut offsets = Vec::with_capacity(file.groups.len());
        let mut total = 0;
        let mut subject_group = None;
        let mut names = std::collections::HashSet::new();
        for (gi, g) in file.groups.iter().enumerate() {
            if !names.insert(g.name.as_str()) {
                return bad(format!("duplicate group `{}`", g.name));
            }
            if g.options.is_empty() {
                return bad(format!("group `{}` has no options", g.name));
            }
            let mut seen = std::collections::HashSet::new();
            for o in &g.options {
                if !seen.insert(o.as_str()) {
                    return bad(format!("duplicate option `{o}` in group `{}`", g.name));
                }
            }
            for (what, list) in [("phrases", &g.phrases), ("possessive", &g.possessive)] {
                if let Some(list) = list {
                    if list.len() != g.options.len() {
                        return bad(format!("group `{}`: {what} must match the option count", g.name));
                    }
                }
            }
            match (g.role, g.kind) {
                (GroupRole::Subject, GroupKind::Single) => {
                    if subject_group.replace(gi).is_some() {
                        return bad("more than one subject group".into());
                    }
                }
                (GroupRole::Subject, GroupKind::Flags) => {
                    return bad(format!("subject group `{}` must be single-choice", g.name));
                }
                (GroupRole::Clause, GroupKind::Single) if g.template.is_none() => {
                    return bad(format!("group `{}` needs a template", g.name));
                }
                (GroupRole::Clause, GroupKind::Flags) if g.template.is_none() && g.template_off.is_none() => {
                    return bad(format!("flags group `{}` needs template or template_off", g.name));
                }
                _ => {}
            }
            offsets.push(total);
            total += g.options.len();
        }
        if total < 2 {
            return bad(format!("total dimension must be at least 2, got {total}"));
        }

        let mut hasher = Sha256::new();
        for g in &file.groups {
            hasher.update(format!("{}|{:?}|{}\n", g.name, g.kind, g.options.join("\u{1f}")));
        }
        let id: String = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();

        let mut schema = AttributeSchema { file, offsets, total_dim: total, id, subject_group, clauses: HashMap::new() };
        schema.index_clauses()?;
        Ok(schema)
    }

    /// Precomputes every clause string per subject and checks that no two
    /// clauses collide, which makes sentences parseable.
    fn index_clauses(&mut self) -> Result<()> {
        let subjects = self.subject_count();
        for s in 0..subjects {
            let pos = self.possessive_for(s).to_string();
            let mut seen: HashMap<String, ClauseKey> = HashMap::new();
            for (gi, g) in self.file.groups.iter().enumerate() {
                if g.role == GroupRole::Subject {
                    continue;
                }
                for oi in 0..g.options.len() {
                    let phrase = phrase(g, oi);
                    let mut candidates = Vec::new();
                    match g.kind {
                        GroupKind::Single => candidates.push((g.template.as_deref(), ClauseKey::Choice { group: gi, option: oi })),
                        GroupKind::Flags => {
                            candidates.push((g.template.as_deref(), ClauseKey::Flag { group: gi, option: oi, on: true }));
                            candidates.push((g.template_off.as_deref(), ClauseKey::Flag { group: gi, option: oi, on: false }));
                        }
                    }
                    for (tpl, key) in candidates {
                        let Some(tpl) = tpl else { continue };
                        let text = fill(tpl, &pos, phrase);
                        if text.contains(", ") || text.contains('.') || text.is_empty() {
                            return Err(Error::InvalidSchema(format!("clause `{text}` contains a separator")));
                        }
                        if seen.insert(text.clone(), key).is_some() {
                            return Err(Error::InvalidSchema(format!("clause `{text}` is produced twice")));
                        }
                        self.clauses.insert((s, text), key);
                    }
                }
            }
        }
        Ok(())
    }

    fn subject_count(&self) -> usize {
        self.subject_group.map_or(1, |g| self.file.groups[g].options.len())
    }

    fn subject_for(&self, s: usize) -> &str {
        match self.subject_group {
            Some(g) => phrase(&self.file.groups[g], s),
            None => &self.file.subject,
        }
    }

    fn possessive_for(&self, s: usize) -> &str {
        match self.subject_group.and_then(|g| self.file.groups[g].possessive.as_ref()) {
            Some(p) => &p[s],
            None => &self.file.possessive,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.file.groups
    }

    pub fn group(&self, name: &str) -> Option<&AttributeGroup> {
        self.file.groups.iter().find(|g| g.name == name)
    }

    /// Offset of a group's block inside the embedding.
    pub fn offset(&self, name: &str) -> Option<usize> {
        self.file.groups.iter().position(|g| g.name == name).map(|i| self.offsets[i])
    }

    /// Every valid record with all flags unset. Intended for small schemas.
    pub fn enumerate_records(&self) -> Vec<DescriptionRecord> {
        let mut out = vec![DescriptionRecord::new()];
        for g in &self.file.groups {
            out = match g.kind {
                GroupKind::Single => {
                    out.into_iter().flat_map(|r| g.options.iter().map(move |o| r.clone().with_choice(&g.name, o))).collect()
                }
                GroupKind::Flags => {
                    let mut next = Vec::new();
                    for r in out {
                        for mask in 0u64..(1 << g.options.len().min(16)) {
                            let on = g.options.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, o)| o.as_str());
                            next.push(r.clone().with_flags(&g.name, on));
                        }
                    }
                    next
                }
            }
        }
        out
    }
}

fn phrase(g: &AttributeGroup, oi: usize) -> &str {
    g.phrases.as_ref().map_or(&g.options[oi], |p| &p[oi])
}

fn fill(template: &str, pos: &str, option: &str) -> String {
    template.replace("{pos}", pos).replace("{option}", option)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    One(String),
    /// The set options of a flags group; every other option is unset.
    Flags(Vec<String>),
}

/// Chosen attribute values, keyed by group name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    entries: BTreeMap<String, Selection>,
}

impl DescriptionRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_choice(mut self, group: &str, option: &str) -> Self {
        self.entries.insert(group.to_string(), Selection::One(option.to_string()));
        self
    }

    pub fn with_flags<'a>(mut self, group: &str, on: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = on.into_iter().map(str::to_string).collect();
        set.sort();
        set.dedup();
        self.entries.insert(group.to_string(), Selection::Flags(set));
        self
    }

    pub fn get(&self, group: &str) -> Option<&Selection> {
        self.entries.get(group)
    }

    pub fn choice(&self, group: &str) -> Option<&str> {
        match self.entries.get(group) {
            Some(Selection::One(o)) => Some(o),
            _ => None,
        }
    }

    pub fn flag(&self, group: &str, option: &str) -> bool {
        matches!(self.entries.get(group), Some(Selection::Flags(on)) if on.iter().any(|o| o == option))
    }

    /// Checks the record against a schema and returns the selected option
    /// indices (single groups) or flag masks (flags groups) per group.
    fn resolve(&self, schema: &AttributeSchema) -> Result<Vec<Vec<bool>>> {
        let violation = |g: &str, detail: String| Error::SchemaViolation { group: g.to_string(), detail };
        for name in self.entries.keys() {
            if schema.group(name).is_none() {
                return Err(violation(name, "group not in schema".into()));
            }
        }
        schema
            .groups()
            .iter()
            .map(|g| {
                let mut bits = vec![false; g.options.len()];
                let index =
                    |o: &str| g.options.iter().position(|x| x == o).ok_or_else(|| violation(&g.name, format!("unknown option `{o}`")));
                match (g.kind, self.entries.get(&g.name)) {
                    (GroupKind::Single, Some(Selection::One(o))) => bits[index(o)?] = true,
                    (GroupKind::Single, None) => return Err(violation(&g.name, "missing selection".into())),
                    (GroupKind::Flags, Some(Selection::Flags(on))) => {
                        for o in on {
                            bits[index(o)?] = true;
                        }
                    }
                    (GroupKind::Flags, None) => {}
                    (GroupKind::Single, Some(_)) => return Err(violation(&g.name, "expected a single option".into())),
                    (GroupKind::Flags, Some(_)) => return Err(violation(&g.name, "expected a flag set".into())),
                }
                Ok(bits)
            })
            .collect()
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        self.resolve(schema).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingKind {
    ManyHot { schema_id: String },
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub values: Vec<f64>,
    pub kind: EmbeddingKind,
}

impl TextEmbedding {
    pub fn dense(values: Vec<f64>) -> Self {
        TextEmbedding { values, kind: EmbeddingKind::Dense }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

pub fn encode_manyhot(rec: &DescriptionRecord, schema: &AttributeSchema) -> Result<TextEmbedding> {
    let bits = rec.resolve(schema)?;
    let values = bits.into_iter().flatten().map(|b| if b { 1.0 } else { 0.0 }).collect();
    Ok(TextEmbedding { values, kind: EmbeddingKind::ManyHot { schema_id: schema.id().to_string() } })
}

pub fn decode_manyhot(v: &TextEmbedding, schema: &AttributeSchema) -> Result<DescriptionRecord> {
    match &v.kind {
        EmbeddingKind::ManyHot { schema_id } if schema_id == schema.id() => {}
        EmbeddingKind::ManyHot { schema_id } => {
            return Err(Error::SchemaMismatch(format!("embedding built for schema {schema_id}, not {}", schema.id())))
        }
        EmbeddingKind::Dense => return Err(Error::SchemaMismatch("dense embeddings cannot be decoded".into())),
    }
    decode_bits(&v.values, schema)
}

/// Decodes a raw 0/1 vector, as read from annotation files.
pub fn decode_bits(values: &[f64], schema: &AttributeSchema) -> Result<DescriptionRecord> {
    if values.len() != schema.total_dim() {
        return Err(Error::DimensionMismatch { expected: schema.total_dim(), found: values.len() });
    }
    let mut rec = DescriptionRecord::new();
    for (g, &off) in schema.groups().iter().zip(&schema.offsets) {
        let block = &values[off..off + g.options.len()];
        if let Some(x) = block.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::MalformedVector { group: g.name.clone(), detail: format!("entry {x} is not 0 or 1") });
        }
        let on: Vec<&str> = block.iter().zip(&g.options).filter(|(&x, _)| x == 1.0).map(|(_, o)| o.as_str()).collect();
        rec = match g.kind {
            GroupKind::Single if on.len() == 1 => rec.with_choice(&g.name, on[0]),
            GroupKind::Single => {
                return Err(Error::MalformedVector {
                    group: g.name.clone(),
                    detail: format!("expected exactly one selection, found {}", on.len()),
                })
            }
            GroupKind::Flags => rec.with_flags(&g.name, on),
        };
    }
    Ok(rec)
}

/// Element-wise midpoint `(v1 + v2) / 2`; the result is dense.
pub fn interpolate_embeddings(v1: &TextEmbedding, v2: &TextEmbedding) -> Result<TextEmbedding> {
    lerp_embeddings(v1, v2, 0.5)
}

/// `(1 - t) v1 + t v2`. The endpoints `t = 0` and `t = 1` return the inputs
/// unchanged, kind included.
pub fn lerp_embeddings(v1: &TextEmbedding, v2: &TextEmbedding, t: f64) -> Result<TextEmbedding> {
    if v1.dim() != v2.dim() {
        return Err(Error::DimensionMismatch { expected: v1.dim(), found: v2.dim() });
    }
    if t == 0.0 {
        return Ok(v1.clone());
    }
    if t == 1.0 {
        return Ok(v2.clone());
    }
    let values = if t == 0.5 {
        v1.values.iter().zip(&v2.values).map(|(a, b)| (a + b) / 2.0).collect()
    } else {
        v1.values.iter().zip(&v2.values).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    };
    Ok(TextEmbedding::dense(values))
}

/// Renders a record as one sentence: `The <subject> <clause>, <clause>.`
pub fn render_description_text(rec: &DescriptionRecord, schema: &AttributeSchema) -> Result<String> {
    let bits = rec.resolve(schema)?;
    let s = schema.subject_group.map_or(0, |g| bits[g].iter().position(|&b| b).expect("resolved single group"));
    let pos = schema.possessive_for(s);
    let mut clauses = Vec::new();
    for (g, bits) in schema.groups().iter().zip(&bits) {
        if g.role == GroupRole::Subject {
            continue;
        }
        for (oi, &on) in bits.iter().enumerate() {
            let tpl = match (g.kind, on) {
                (GroupKind::Single, true) | (GroupKind::Flags, true) => g.template.as_deref(),
                (GroupKind::Flags, false) => g.template_off.as_deref(),
                (GroupKind::Single, false) => None,
            };
            if let Some(tpl) = tpl {
                clauses.push(fill(tpl, pos, phrase(g, oi)));
            }
        }
    }
    let subject = schema.subject_for(s);
    if clauses.is_empty() {
        Ok(format!("The {subject}."))
    } else {
        Ok(format!("The {subject} {}.", clauses.join(", ")))
    }
}

/// Inverse of [`render_description_text`].
pub fn parse_description_text(text: &str, schema: &AttributeSchema) -> Result<DescriptionRecord> {
    let err = |m: String| Error::DescriptionParse(m);
    let body = text
        .trim()
        .strip_prefix("The ")
        .and_then(|t| t.strip_suffix('.'))
        .ok_or_else(|| err(format!("`{text}` is not of the form `The ... .`")))?;
    let (s, rest) = (0..schema.subject_count())
        .filter_map(|s| {
            let subj = schema.subject_for(s);
            if body == subj {
                Some((s, ""))
            } else {
                body.strip_prefix(subj).and_then(|r| r.strip_prefix(' ')).map(|r| (s, r))
            }
        })
        .max_by_key(|(s, _)| schema.subject_for(*s).len())
        .ok_or_else(|| err(format!("unknown subject in `{text}`")))?;

    let groups = schema.groups();
    let mut bits: Vec<Vec<Option<bool>>> = groups.iter().map(|g| vec![None; g.options.len()]).collect();
    if let Some(g) = schema.subject_group {
        bits[g] = (0..groups[g].options.len()).map(|i| Some(i == s)).collect();
    }
    if !rest.is_empty() {
        for clause in rest.split(", ") {
            let key = schema.clauses.get(&(s, clause.to_string())).ok_or_else(|| err(format!("unknown clause `{clause}`")))?;
            let (g, o, v) = match *key {
                ClauseKey::Choice { group, option } => (group, option, true),
                ClauseKey::Flag { group, option, on } => (group, option, on),
            };
            if bits[g][o].replace(v).is_some() {
                return Err(err(format!("clause `{clause}` repeated")));
            }
        }
    }
    let mut rec = DescriptionRecord::new();
    for (g, b) in groups.iter().zip(&bits) {
        // A flag group that only voices its off state leaves the on flags unsaid.
        let unsaid = g.kind == GroupKind::Flags && g.template.is_none() && g.template_off.is_some();
        let on: Vec<&str> = b.iter().zip(&g.options).filter(|(x, _)| x.unwrap_or(unsaid)).map(|(_, o)| o.as_str()).collect();
        rec = match g.kind {
            GroupKind::Single if on.len() == 1 => rec.with_choice(&g.name, on[0]),
            GroupKind::Single => return Err(err(format!("group `{}` needs exactly one clause", g.name))),
            GroupKind::Flags => rec.with_flags(&g.name, on),
        };
    }
    Ok(rec)
}

/// Maps free text to a fixed-length vector. Dense embedders plug in here.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TextEmbedding>;
}

/// Embeds template sentences by parsing them and encoding the record.
#[derive(Debug, Clone)]
pub struct ManyHotEmbedder {
    pub schema: AttributeSchema,
}

impl TextEmbedder for ManyHotEmbedder {
    fn dim(&self) -> usize {
        self.schema.total_dim()
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        encode_manyhot(&parse_description_text(text, &self.schema)?, &self.schema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> AttributeSchema {
        AttributeSchema::from_toml(
            r#"
            [[group]]
            name = "gender"
            kind = "single"
            role = "subject"
            options = ["man", "woman"]
            possessive = ["his", "her"]

            [[group]]
            name = "head"
            kind = "single"
            options = ["straight", "left", "right"]
            template = "is keeping {pos} head facing {option}"
            "#,
        )
        .unwrap()
    }

    fn four_groups() -> AttributeSchema {
        AttributeSchema::from_toml(
            r#"
            [[group]]
            name = "gender"
            kind = "single"
            role = "subject"
            options = ["man", "woman"]
            possessive = ["his", "her"]

            [[group]]
            name = "head"
            kind = "single"
            options = ["straight", "left", "right"]
            template = "is keeping {pos} head facing {option}"

            [[group]]
            name = "visible"
            kind = "flags"
            options = ["left eye", "right eye", "nose"]
            template = "{pos} {option} is visible"
            template_off = "{pos} {option} is hidden"

            [[group]]
            name = "arm"
            kind = "single"
            options = ["down", "up"]
            template = "has {pos} arm {option}"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn block_layout_example() {
        let s = small();
        let rec = DescriptionRecord::new().with_choice("gender", "woman").with_choice("head", "right");
        let v = encode_manyhot(&rec, &s).unwrap();
        assert_eq!(v.values, vec![0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(decode_manyhot(&v, &s).unwrap(), rec);
        assert_eq!(render_description_text(&rec, &s).unwrap(), "The woman is keeping her head facing right.");
    }

    #[test]
    fn unknown_option_names_group() {
        let rec = DescriptionRecord::new().with_choice("gender", "man").with_choice("head", "sideways");
        match encode_manyhot(&rec, &small()) {
            Err(Error::SchemaViolation { group, .. }) => assert_eq!(group, "head"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_selection_is_violation() {
        let rec = DescriptionRecord::new().with_choice("gender", "man");
        assert!(matches!(encode_manyhot(&rec, &small()), Err(Error::SchemaViolation { .. })));
    }

    #[test]
    fn double_selection_is_malformed() {
        let s = small();
        let v = TextEmbedding { values: vec![1.0, 1.0, 0.0, 0.0, 1.0], kind: EmbeddingKind::ManyHot { schema_id: s.id().into() } };
        match decode_manyhot(&v, &s) {
            Err(Error::MalformedVector { group, .. }) => assert_eq!(group, "gender"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_schema_is_rejected() {
        let v = encode_manyhot(&four_groups().enumerate_records()[0], &four_groups()).unwrap();
        assert!(matches!(decode_manyhot(&v, &small()), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn exhaustive_round_trips() {
        let s = four_groups();
        let records = s.enumerate_records();
        assert_eq!(records.len(), 2 * 3 * 8 * 2);
        let mut sentences = std::collections::HashSet::new();
        for rec in &records {
            let v = encode_manyhot(rec, &s).unwrap();
            assert_eq!(v.dim(), s.total_dim());
            assert_eq!(&decode_manyhot(&v, &s).unwrap(), rec);
            let text = render_description_text(rec, &s).unwrap();
            assert_eq!(&parse_description_text(&text, &s).unwrap(), rec, "{text}");
            assert!(sentences.insert(text));
        }
    }

    #[test]
    fn default_schema_shape() {
        let s = AttributeSchema::default_synthetic();
        assert_eq!(s.total_dim(), 36);
        assert_eq!(s.group("visible").unwrap().options.len(), 18);
        let again = AttributeSchema::from_toml(&s.to_toml()).unwrap();
        assert_eq!(again.id(), s.id());
        assert_eq!(s.id().len(), 16);
    }

    #[test]
    fn schema_id_tracks_layout() {
        let a = small();
        let mut groups = a.groups().to_vec();
        groups[1].options.swap(1, 2);
        let b = AttributeSchema::new(groups).unwrap();
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn rejects_ambiguous_templates() {
        let res = AttributeSchema::from_toml(
            r#"
            [[group]]
            name = "a"
            kind = "single"
            options = ["x", "y"]
            template = "is happy"
            "#,
        );
        assert!(matches!(res, Err(Error::InvalidSchema(_))));
    }

    #[test]
    fn interpolation_examples() {
        let a = TextEmbedding::dense(vec![1.0, 0.0]);
        let b = TextEmbedding::dense(vec![0.0, 1.0]);
        assert_eq!(interpolate_embeddings(&a, &b).unwrap().values, vec![0.5, 0.5]);
        assert_eq!(interpolate_embeddings(&a, &a).unwrap().values, a.values);
        assert!(interpolate_embeddings(&a, &TextEmbedding::dense(vec![0.0; 3])).is_err());
    }

    #[test]
    fn many_hot_embedder_parses_sentences() {
        let s = four_groups();
        let rec = &s.enumerate_records()[17];
        let text = render_description_text(rec, &s).unwrap();
        let e = ManyHotEmbedder { schema: s.clone() };
        assert_eq!(e.embed(&text).unwrap(), encode_manyhot(rec, &s).unwrap());
    }

    proptest! {
        #[test]
        fn interpolation_matches_oracle(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let a = TextEmbedding::dense(pairs.iter().map(|p| p.0).collect());
            let b = TextEmbedding::dense(pairs.iter().map(|p| p.1).collect());
            let m = interpolate_embeddings(&a, &b).unwrap();
            let m2 = interpolate_embeddings(&b, &a).unwrap();
            for (i, (x, y)) in pairs.iter().enumerate() {
                prop_assert!((m.values[i] - 0.5 * (x + y)).abs() < 1e-12);
            }
            prop_assert_eq!(m.values, m2.values);
        }

        #[test]
        fn many_hot_midpoints_stay_in_unit_interval(i in 0usize..96, j in 0usize..96) {
            let s = four_groups();
            let recs = s.enumerate_records();
            let a = encode_manyhot(&recs[i], &s).unwrap();
            let b = encode_manyhot(&recs[j], &s).unwrap();
            let m = interpolate_embeddings(&a, &b).unwrap();
            prop_assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
