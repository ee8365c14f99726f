//! Revision-corpus construction from wikitext fixtures: infobox parsing,
//! lead extraction, linearization, interval revision sampling, and
//! time-disjoint train/dev/test splits.
//!
//! Wikitext support is a deliberately small subset: templates, wiki links,
//! bold markers, HTML comments, and `<ref>` tags. Anything else passes
//! through as plain text.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CorpusRecord;
use crate::temporal::CalendarDate;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty attribute list")]
    EmptyAttributes,
    #[error("empty subject list")]
    EmptySubjects,
    #[error("fractions must lie in (0,1) and sum below 1")]
    BadFractions,
    #[error("subject {0}: revision timestamps not strictly increasing")]
    UnorderedRevisions(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One retained Wikipedia revision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionRecord {
    pub subject_id: String,
    pub timestamp: CalendarDate,
    pub infobox: Vec<(String, String)>,
    pub lead: String,
}

/// Subject/timestamp membership of the four splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub cutoff: CalendarDate,
    pub train: Vec<(String, CalendarDate)>,
    pub dev: Vec<(String, CalendarDate)>,
    pub test_same_time: Vec<(String, CalendarDate)>,
    pub test_future: Vec<(String, CalendarDate)>,
}

// ---------------------------------------------------------------------------
// Wikitext parsing
// ---------------------------------------------------------------------------

/// Strips `<!-- ... -->` comments and `<ref ...>...</ref>` / `<ref ... />`
/// tags. Unterminated constructs are dropped to the end of the text.
fn strip_comments_and_refs(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let lower = text.to_ascii_lowercase();
    let mut i = 0;
    while i < bytes.len() {
        if lower[i..].starts_with("<!--") {
            match lower[i..].find("-->") {
                Some(end) => i += end + 3,
                None => break,
            }
        } else if lower[i..].starts_with("<ref") {
            let rest = &lower[i..];
            let close = rest.find('>');
            match close {
                Some(gt) if rest[..gt].ends_with('/') => i += gt + 1,
                Some(_) => match rest.find("</ref>") {
                    Some(end) => i += end + 6,
                    None => break,
                },
                None => break,
            }
        } else {
            let ch = text[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

/// Finds the end (exclusive, past the closing braces) of a template starting
/// at `start` (which must point at "{{"). None if unbalanced.
fn template_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    debug_assert!(text[start..].starts_with("{{"));
    let mut depth = 0usize;
    let mut i = start;
    while i + 1 < bytes.len() {
        if bytes[i] == b'{' && bytes[i + 1] == b'{' {
            depth += 1;
            i += 2;
        } else if bytes[i] == b'}' && bytes[i + 1] == b'}' {
            depth -= 1;
            i += 2;
            if depth == 0 {
                return Some(i);
            }
        } else {
            i += 1;
        }
    }
    None
}

fn braces_balanced(text: &str) -> bool {
    let bytes = text.as_bytes();
    let mut depth = 0i64;
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'{' && bytes[i + 1] == b'{' {
            depth += 1;
            i += 2;
        } else if bytes[i] == b'}' && bytes[i + 1] == b'}' {
            depth -= 1;
            i += 2;
            if depth < 0 {
                return false;
            }
        } else {
            i += 1;
        }
    }
    depth == 0
}

enum TemplateParam {
    Positional(String),
    Named(String, String),
}

/// Splits the inside of a template ("name|p1|k=v|...") on top-level pipes.
fn split_template(body: &str) -> (String, Vec<TemplateParam>) {
    let mut segments: Vec<String> = vec![String::new()];
    let bytes = body.as_bytes();
    let mut brace_depth = 0usize;
    let mut link_depth = 0usize;
    let mut i = 0;
    while i < bytes.len() {
        if i + 1 < bytes.len() && bytes[i] == b'{' && bytes[i + 1] == b'{' {
            brace_depth += 1;
            segments.last_mut().unwrap().push_str("{{");
            i += 2;
        } else if i + 1 < bytes.len() && bytes[i] == b'}' && bytes[i + 1] == b'}' {
            brace_depth = brace_depth.saturating_sub(1);
            segments.last_mut().unwrap().push_str("}}");
            i += 2;
        } else if i + 1 < bytes.len() && bytes[i] == b'[' && bytes[i + 1] == b'[' {
            link_depth += 1;
            segments.last_mut().unwrap().push_str("[[");
            i += 2;
        } else if i + 1 < bytes.len() && bytes[i] == b']' && bytes[i + 1] == b']' {
            link_depth = link_depth.saturating_sub(1);
            segments.last_mut().unwrap().push_str("]]");
            i += 2;
        } else if bytes[i] == b'|' && brace_depth == 0 && link_depth == 0 {
            segments.push(String::new());
            i += 1;
        } else {
            let ch = body[i..].chars().next().unwrap();
            segments.last_mut().unwrap().push(ch);
            i += ch.len_utf8();
        }
    }
    let name = segments.remove(0).trim().to_string();
    let params = segments
        .into_iter()
        .map(|seg| {
            // A named parameter has '=' outside any nested construct.
            match top_level_eq(&seg) {
                Some(pos) => TemplateParam::Named(
                    seg[..pos].trim().to_string(),
                    seg[pos + 1..].trim().to_string(),
                ),
                None => TemplateParam::Positional(seg.trim().to_string()),
            }
        })
        .collect();
    (name, params)
}

fn top_level_eq(segment: &str) -> Option<usize> {
    let bytes = segment.as_bytes();
    let mut brace_depth = 0usize;
    let mut link_depth = 0usize;
    let mut i = 0;
    while i < bytes.len() {
        if i + 1 < bytes.len() && bytes[i] == b'{' && bytes[i + 1] == b'{' {
            brace_depth += 1;
            i += 2;
        } else if i + 1 < bytes.len() && bytes[i] == b'}' && bytes[i + 1] == b'}' {
            brace_depth = brace_depth.saturating_sub(1);
            i += 2;
        } else if i + 1 < bytes.len() && bytes[i] == b'[' && bytes[i + 1] == b'[' {
            link_depth += 1;
            i += 2;
        } else if i + 1 < bytes.len() && bytes[i] == b']' && bytes[i + 1] == b']' {
            link_depth = link_depth.saturating_sub(1);
            i += 2;
        } else if bytes[i] == b'=' && brace_depth == 0 && link_depth == 0 {
            return Some(i);
        } else {
            i += 1;
        }
    }
    None
}

/// Cleans markup in a parameter value or paragraph: nested templates are
/// replaced by their space-joined positional arguments, links keep their
/// label, and whitespace is collapsed. Assumes comments/refs were stripped.
fn clean_markup(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if i + 1 < bytes.len() && bytes[i] == b'{' && bytes[i + 1] == b'{' {
            match template_end(text, i) {
                Some(end) => {
                    let (_, params) = split_template(&text[i + 2..end - 2]);
                    let joined: Vec<String> = params
                        .into_iter()
                        .filter_map(|p| match p {
                            TemplateParam::Positional(v) => Some(clean_markup(&v)),
                            TemplateParam::Named(..) => None,
                        })
                        .filter(|v| !v.is_empty())
                        .collect();
                    out.push(' ');
                    out.push_str(&joined.join(" "));
                    out.push(' ');
                    i = end;
                }
                None => {
                    // Unbalanced nested template: pass through.
                    out.push_str("{{");
                    i += 2;
                }
            }
        } else if i + 1 < bytes.len() && bytes[i] == b'[' && bytes[i + 1] == b'[' {
            match text[i + 2..].find("]]") {
                Some(rel_end) => {
                    let inner = &text[i + 2..i + 2 + rel_end];
                    let label = inner.rsplit('|').next().unwrap_or(inner);
                    out.push_str(&clean_markup(label));
                    i += 2 + rel_end + 2;
                }
                None => {
                    out.push_str("[[");
                    i += 2;
                }
            }
        } else {
            let ch = text[i..].chars().next().unwrap();
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Extracts the first top-level template whose name starts with "Infobox"
/// (case-insensitive) and returns its named parameters in source order with
/// cleaned values. None if there is no infobox or braces are unbalanced.
pub fn parse_infobox(wikitext: &str) -> Option<Vec<(String, String)>> {
    let text = strip_comments_and_refs(wikitext);
    if !braces_balanced(&text) {
        return None;
    }
    let bytes = text.as_bytes();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'{' && bytes[i + 1] == b'{' {
            let end = template_end(&text, i)?;
            let (name, params) = split_template(&text[i + 2..end - 2]);
            if name.to_ascii_lowercase().starts_with("infobox") {
                let attrs: Vec<(String, String)> = params
                    .into_iter()
                    .filter_map(|p| match p {
                        TemplateParam::Named(k, v) if !k.is_empty() => {
                            Some((k, clean_markup(&v)))
                        }
                        _ => None,
                    })
                    .collect();
                return Some(attrs);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    None
}

/// First non-empty paragraph after all leading templates, cleaned like
/// infobox values, with bold markers removed.
pub fn extract_lead(wikitext: &str) -> String {
    let text = strip_comments_and_refs(wikitext);
    let mut rest = text.as_str();
    loop {
        rest = rest.trim_start();
        if rest.starts_with("{{") {
            let offset = text.len() - rest.len();
            match template_end(&text, offset) {
                Some(end) => rest = &text[end..],
                None => return String::new(),
            }
        } else {
            break;
        }
    }
    for paragraph in rest.split("\n\n") {
        let cleaned = clean_markup(&paragraph.replace("'''", ""));
        if !cleaned.is_empty() {
            return cleaned;
        }
    }
    String::new()
}

// ---------------------------------------------------------------------------
// Linearization
// ---------------------------------------------------------------------------

/// Space-joined "name[value]" units in source order. Inside a value, "]" is
/// escaped as "\]" and "\" as "\\" so the format stays invertible.
pub fn linearize_infobox(attrs: &[(String, String)]) -> Result<String, CorpusError> {
    if attrs.is_empty() {
        return Err(CorpusError::EmptyAttributes);
    }
    let units: Vec<String> = attrs
        .iter()
        .map(|(name, value)| {
            let escaped = value.replace('\\', "\\\\").replace(']', "\\]");
            format!("{name}[{escaped}]")
        })
        .collect();
    Ok(units.join(" "))
}

/// Inverts [`linearize_infobox`]; a bracket-aware parse back to the
/// (name, value) list. None on malformed input.
pub fn parse_linearized(text: &str) -> Option<Vec<(String, String)>> {
    let mut attrs = Vec::new();
    let mut chars = text.chars().peekable();
    loop {
        while chars.peek() == Some(&' ') {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut name = String::new();
        loop {
            match chars.next() {
                Some('[') => break,
                Some(c) => name.push(c),
                None => return None,
            }
        }
        let mut value = String::new();
        loop {
            match chars.next() {
                Some('\\') => match chars.next() {
                    Some(c @ (']' | '\\')) => value.push(c),
                    Some(c) => {
                        value.push('\\');
                        value.push(c);
                    }
                    None => return None,
                },
                Some(']') => break,
                Some(c) => value.push(c),
                None => return None,
            }
        }
        attrs.push((name, value));
    }
    if attrs.is_empty() {
        None
    } else {
        Some(attrs)
    }
}

// ---------------------------------------------------------------------------
// Revision sampling
// ---------------------------------------------------------------------------

pub const DEFAULT_INTERVAL_LOW: i64 = 270;
pub const DEFAULT_INTERVAL_HIGH: i64 = 450;
pub const DEFAULT_SKIP_FIRST: usize = 5;

/// Window-samples a chronological revision timeline. The first retained
/// revision anchors the windows; each window spans a fresh uniform draw
/// X in [low, high] days and keeps the latest revision inside it. Windows
/// advance whether or not a revision was found, and stop past the last
/// revision, so later rng draws cannot affect the result.
pub fn sample_revision_indices<R: Rng>(
    timestamps: &[CalendarDate],
    interval_low: i64,
    interval_high: i64,
    skip_first: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert!(interval_low <= interval_high);
    sample_with_draws(timestamps, skip_first, || {
        rng.gen_range(interval_low..=interval_high)
    })
}

fn sample_with_draws(
    timestamps: &[CalendarDate],
    skip_first: usize,
    mut draw: impl FnMut() -> i64,
) -> Vec<usize> {
    if timestamps.len() <= skip_first {
        return Vec::new();
    }
    let ordinals: Vec<i64> = timestamps[skip_first..].iter().map(|t| t.to_ordinal()).collect();
    let mut selected = vec![skip_first];
    let last = *ordinals.last().unwrap();
    let mut anchor = ordinals[0];
    while anchor < last {
        let x = draw();
        let window_end = anchor + x;
        // Latest revision in (anchor, anchor + x].
        let pick = ordinals
            .iter()
            .enumerate()
            .filter(|&(_, &o)| o > anchor && o <= window_end)
            .map(|(i, _)| i)
            .last();
        if let Some(i) = pick {
            selected.push(skip_first + i);
        }
        anchor = window_end;
    }
    selected
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// A subject together with its sampled revision timestamps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledSubject {
    pub subject_id: String,
    pub timestamps: Vec<CalendarDate>,
}

pub const DEFAULT_CUTOFF: (i32, u32, u32) = (2018, 12, 31);
pub const DEFAULT_FUTURE_DOWNSAMPLE: f64 = 0.10;

#[derive(Debug, Clone, Copy)]
pub struct SplitOptions {
    pub cutoff: CalendarDate,
    pub dev_fraction: f64,
    pub test_same_fraction: f64,
    pub future_downsample: f64,
    /// Also downsample the test-same-time split by `future_downsample`.
    pub downsample_test_same: bool,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        let (y, m, d) = DEFAULT_CUTOFF;
        Self {
            cutoff: CalendarDate::new(y, m, d).expect("valid default cutoff"),
            dev_fraction: 0.05,
            test_same_fraction: 0.05,
            future_downsample: DEFAULT_FUTURE_DOWNSAMPLE,
            downsample_test_same: false,
            seed: 0,
        }
    }
}

/// Partitions subjects into train/dev/test-same-time/test-future.
///
/// Subjects whose revisions all fall after the cutoff form the future pool
/// (downsampled); every other subject is split by subject identity, with its
/// after-cutoff revisions dropped. Subject sets of {train, dev} and the two
/// test splits are disjoint by construction.
pub fn build_splits(
    subjects: &[SampledSubject],
    opts: &SplitOptions,
) -> Result<SplitManifest, CorpusError> {
    if subjects.is_empty() {
        return Err(CorpusError::EmptySubjects);
    }
    let f = (opts.dev_fraction, opts.test_same_fraction);
    if !(f.0 > 0.0 && f.0 < 1.0 && f.1 > 0.0 && f.1 < 1.0 && f.0 + f.1 < 1.0) {
        return Err(CorpusError::BadFractions);
    }
    let mut ordered: Vec<&SampledSubject> = subjects.iter().collect();
    ordered.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    let mut future_pool = Vec::new();
    let mut past_pool = Vec::new();
    for subject in ordered {
        let any_after = subject.timestamps.iter().any(|t| *t > opts.cutoff);
        let any_at_or_before = subject.timestamps.iter().any(|t| *t <= opts.cutoff);
        if any_after && !any_at_or_before {
            future_pool.push(subject);
        } else if any_at_or_before {
            past_pool.push(subject);
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    future_pool.shuffle(&mut rng);
    let keep_future = (opts.future_downsample * future_pool.len() as f64).round() as usize;
    future_pool.truncate(keep_future);
    future_pool.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    past_pool.shuffle(&mut rng);
    let n = past_pool.len();
    let n_dev = ((opts.dev_fraction * n as f64).round() as usize).min(n);
    let n_test_same = ((opts.test_same_fraction * n as f64).round() as usize).min(n - n_dev);
    let (dev_subjects, rest) = past_pool.split_at(n_dev);
    let (test_same_subjects, train_subjects) = rest.split_at(n_test_same);

    let mut test_same_subjects = test_same_subjects.to_vec();
    if opts.downsample_test_same {
        let keep = (opts.future_downsample * test_same_subjects.len() as f64).round() as usize;
        test_same_subjects.truncate(keep);
    }

    let past_entries = |subjects: &[&SampledSubject]| {
        let mut out: Vec<(String, CalendarDate)> = subjects
            .iter()
            .flat_map(|s| {
                s.timestamps
                    .iter()
                    .filter(|t| **t <= opts.cutoff)
                    .map(|t| (s.subject_id.clone(), *t))
            })
            .collect();
        out.sort();
        out
    };
    let mut future: Vec<(String, CalendarDate)> = future_pool
        .iter()
        .flat_map(|s| s.timestamps.iter().map(|t| (s.subject_id.clone(), *t)))
        .collect();
    future.sort();

    Ok(SplitManifest {
        cutoff: opts.cutoff,
        train: past_entries(train_subjects),
        dev: past_entries(dev_subjects),
        test_same_time: past_entries(&test_same_subjects),
        test_future: future,
    })
}

// ---------------------------------------------------------------------------
// End-to-end builder
// ---------------------------------------------------------------------------

/// One raw revision as read from a per-subject input file.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct RawRevision {
    pub timestamp: CalendarDate,
    pub wikitext: String,
}

/// Reads a directory of per-subject `.jsonl` files (subject id = file stem,
/// each line a [`RawRevision`]).
pub fn read_subject_dir(dir: &Path) -> Result<BTreeMap<String, Vec<RawRevision>>, CorpusError> {
    let mut subjects = BTreeMap::new();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let subject_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = std::io::BufReader::new(std::fs::File::open(&path)?);
        let mut revisions = Vec::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rev: RawRevision =
                serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            revisions.push(rev);
        }
        if !revisions.windows(2).all(|w| w[0].timestamp < w[1].timestamp) {
            return Err(CorpusError::UnorderedRevisions(subject_id));
        }
        subjects.insert(subject_id, revisions);
    }
    Ok(subjects)
}

pub struct BuiltCorpus {
    pub manifest: SplitManifest,
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test_same_time: Vec<CorpusRecord>,
    pub test_future: Vec<CorpusRecord>,
    /// (mean attributes per revision, mean lead length in words) over all
    /// retained revisions, for comparison against reported corpus statistics.
    pub stats: (f64, f64),
}

/// Full pipeline: parse revisions, drop the ones without an infobox or with
/// an empty lead, window-sample each subject's timeline, and build splits.
pub fn build_corpus(
    subjects: &BTreeMap<String, Vec<RawRevision>>,
    interval_low: i64,
    interval_high: i64,
    skip_first: usize,
    opts: &SplitOptions,
) -> Result<BuiltCorpus, CorpusError> {
    let mut sampled_subjects = Vec::new();
    let mut records: BTreeMap<(String, CalendarDate), CorpusRecord> = BTreeMap::new();
    let mut attr_total = 0usize;
    let mut lead_words_total = 0usize;
    let mut retained = 0usize;
    for (subject_id, revisions) in subjects {
        // Per-subject rng keyed on the master seed and subject id keeps the
        // sampling independent of which other subjects are present.
        let mut rng = ChaCha20Rng::seed_from_u64(
            crate::seeds::derive_seed(opts.seed, &format!("sample/{subject_id}")),
        );
        let parsed: Vec<RevisionRecord> = revisions
            .iter()
            .filter_map(|rev| {
                let infobox = parse_infobox(&rev.wikitext)?;
                if infobox.is_empty() {
                    return None;
                }
                let lead = extract_lead(&rev.wikitext);
                if lead.is_empty() {
                    return None;
                }
                Some(RevisionRecord {
                    subject_id: subject_id.clone(),
                    timestamp: rev.timestamp,
                    infobox,
                    lead,
                })
            })
            .collect();
        let timestamps: Vec<CalendarDate> = parsed.iter().map(|r| r.timestamp).collect();
        let picked =
            sample_revision_indices(&timestamps, interval_low, interval_high, skip_first, &mut rng);
        if picked.is_empty() {
            continue;
        }
        let mut kept_timestamps = Vec::new();
        for &i in &picked {
            let rev = &parsed[i];
            attr_total += rev.infobox.len();
            lead_words_total += rev.lead.split_whitespace().count();
            retained += 1;
            kept_timestamps.push(rev.timestamp);
            records.insert(
                (subject_id.clone(), rev.timestamp),
                CorpusRecord {
                    source: linearize_infobox(&rev.infobox)?,
                    target: rev.lead.clone(),
                    timestamp: rev.timestamp,
                },
            );
        }
        sampled_subjects.push(SampledSubject {
            subject_id: subject_id.clone(),
            timestamps: kept_timestamps,
        });
    }
    let manifest = build_splits(&sampled_subjects, opts)?;
    let collect = |entries: &[(String, CalendarDate)]| {
        entries
            .iter()
            .map(|key| records[key].clone())
            .collect::<Vec<_>>()
    };
    let stats = if retained == 0 {
        (0.0, 0.0)
    } else {
        (attr_total as f64 / retained as f64, lead_words_total as f64 / retained as f64)
    };
    Ok(BuiltCorpus {
        train: collect(&manifest.train),
        dev: collect(&manifest.dev),
        test_same_time: collect(&manifest.test_same_time),
        test_future: collect(&manifest.test_future),
        manifest,
        stats,
    })
}
